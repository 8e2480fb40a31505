//! Two-round gated communication.
//!
//! One protocol step runs, for every agent at once: encode → first-round
//! aggregation over one-hop neighbours → gate → optional second-round
//! aggregation over two-hop neighbours (relayed unmodified) → policy head.
//! Rounds are synchronous: each reads only the previous round's embeddings,
//! so results do not depend on agent order.
//!
//! The batched functions work on `B · N` agent rows (sample-major) and a
//! topology per sample; they are shared by rollouts (`B = 1`) and training.

use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::commgraph::{LedgerEntry, Topology};
use crate::diffmath::{Adjacency, Matrix, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::neural::{self, Bound, NetDims, Round};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProtocolMode {
    /// Gated two-hop second round.
    Ac2c,
    /// Two-hop second round for every agent.
    Ac2cNoController,
    /// Second exchange with one-hop neighbours, ungated.
    GnnTwoRound,
    /// First round only; the second-round embedding is zero.
    OneRound,
}

impl ProtocolMode {
    pub const ALL: [ProtocolMode; 4] = [
        ProtocolMode::Ac2c,
        ProtocolMode::Ac2cNoController,
        ProtocolMode::GnnTwoRound,
        ProtocolMode::OneRound,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ProtocolMode::Ac2c => "ac2c",
            ProtocolMode::Ac2cNoController => "ac2c_no_controller",
            ProtocolMode::GnnTwoRound => "gnn_two_round",
            ProtocolMode::OneRound => "one_round",
        }
    }

    /// Whether the gating controller is consulted.
    pub fn uses_controller(self) -> bool {
        self == ProtocolMode::Ac2c
    }
}

impl fmt::Display for ProtocolMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ProtocolMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ProtocolMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown protocol mode `{s}` (expected ac2c, ac2c_no_controller, gnn_two_round or one_round)"
                ))
            })
    }
}

pub fn check_threshold(mode: ProtocolMode, threshold: f64) -> Result<()> {
    if mode.uses_controller() && !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!("gate threshold must lie in (0, 1), got {threshold}")));
    }
    Ok(())
}

/// `z_i = score_i > T` (strict) in gated mode; mode overrides otherwise.
pub fn gates_from_scores(mode: ProtocolMode, scores: &[f64], threshold: f64) -> Result<Vec<bool>> {
    check_threshold(mode, threshold)?;
    Ok(match mode {
        ProtocolMode::Ac2c => scores.iter().map(|&s| s > threshold).collect(),
        ProtocolMode::Ac2cNoController => vec![true; scores.len()],
        ProtocolMode::GnnTwoRound | ProtocolMode::OneRound => vec![false; scores.len()],
    })
}

fn check_batch(topos: &[Topology], rows: usize) -> Result<usize> {
    let Some(first) = topos.first() else {
        return Err(Error::Dimension("empty topology batch".into()));
    };
    let n = first.n_agents();
    if topos.iter().any(|t| t.n_agents() != n) || rows != n * topos.len() {
        return Err(Error::Dimension(format!(
            "{rows} agent rows do not match {} topologies of {n} agents",
            topos.len()
        )));
    }
    Ok(n)
}

fn with_self(i: usize, others: &[usize], offset: usize) -> Vec<usize> {
    let mut row = Vec::with_capacity(others.len() + 1);
    row.push(offset + i);
    row.extend(others.iter().map(|&j| offset + j));
    row
}

/// First-round sets: each agent attends over itself and its one-hop
/// neighbours.
pub fn round1_adjacency(topos: &[Topology]) -> Adjacency {
    let mut adj = Vec::new();
    for (b, t) in topos.iter().enumerate() {
        let off = b * t.n_agents();
        for i in 0..t.n_agents() {
            adj.push(with_self(i, t.one_hop(i), off));
        }
    }
    Rc::new(adj)
}

/// Second-round sets, or `None` when the mode has no second round. Agents
/// with a closed gate get an empty set, which produces an all-zero
/// embedding.
pub fn round2_adjacency(mode: ProtocolMode, topos: &[Topology], gates: &[bool]) -> Option<Adjacency> {
    if mode == ProtocolMode::OneRound {
        return None;
    }
    let mut adj = Vec::new();
    for (b, t) in topos.iter().enumerate() {
        let off = b * t.n_agents();
        for i in 0..t.n_agents() {
            adj.push(match mode {
                ProtocolMode::GnnTwoRound => with_self(i, t.one_hop(i), off),
                _ if gates[off + i] => with_self(i, t.two_hop(i), off),
                _ => Vec::new(),
            });
        }
    }
    Some(Rc::new(adj))
}

/// Nodes produced by the encoder and first round.
#[derive(Clone, Copy, Debug)]
pub struct FirstRound {
    pub c0: Var,
    pub h_next: Var,
    pub c1: Var,
    pub attention: Var,
}

pub fn first_round(
    tape: &mut Tape,
    actor: Bound,
    dims: &NetDims,
    topos: &[Topology],
    obs: Var,
    hist: Var,
) -> Result<FirstRound> {
    check_batch(topos, tape.value(obs).rows())?;
    let (c0, h_next) = neural::encode(tape, actor, dims, obs, hist)?;
    let a = neural::attend(tape, actor, dims, Round::First, c0, round1_adjacency(topos))?;
    Ok(FirstRound { c0, h_next, c1: a.embedding, attention: a.attention })
}

/// Evaluates the controller (never trainable here) and applies the gate
/// rule. Returns the gates and, in gated mode, the raw scores.
pub fn gate(
    tape: &mut Tape,
    controller: &ParamStore,
    dims: &NetDims,
    mode: ProtocolMode,
    threshold: f64,
    c0: Var,
    c1: Var,
) -> Result<(Vec<bool>, Option<Vec<f64>>)> {
    let rows = tape.value(c0).rows();
    if !mode.uses_controller() {
        return Ok((gates_from_scores(mode, &vec![0.0; rows], threshold)?, None));
    }
    let s = neural::controller_score(tape, Bound::frozen(controller), dims, c0, c1)?;
    let scores = tape.value(s).data().to_vec();
    Ok((gates_from_scores(mode, &scores, threshold)?, Some(scores)))
}

/// Second-round embeddings plus the attention node (absent in one-round
/// mode, where the result is a constant zero block).
pub fn second_round(
    tape: &mut Tape,
    actor: Bound,
    dims: &NetDims,
    mode: ProtocolMode,
    topos: &[Topology],
    c1: Var,
    gates: &[bool],
) -> Result<(Var, Option<Var>)> {
    let rows = tape.value(c1).rows();
    check_batch(topos, rows)?;
    if gates.len() != rows {
        return Err(Error::Dimension(format!("{} gates for {rows} agents", gates.len())));
    }
    match round2_adjacency(mode, topos, gates) {
        None => Ok((tape.constant(Matrix::zeros(rows, dims.hidden))?, None)),
        Some(adj) => {
            let a = neural::attend(tape, actor, dims, Round::Second, c1, adj)?;
            Ok((a.embedding, Some(a.attention)))
        }
    }
}

/// Full forward pass of one protocol step over a batch.
#[derive(Clone, Debug)]
pub struct Forward {
    pub first: FirstRound,
    pub c2: Var,
    pub attention2: Option<Var>,
    pub gates: Vec<bool>,
    pub scores: Option<Vec<f64>>,
    pub actions: Var,
    /// Policy output before the `tanh` bound.
    pub preactivation: Var,
}

#[allow(clippy::too_many_arguments)]
pub fn forward(
    tape: &mut Tape,
    actor: Bound,
    controller: &ParamStore,
    dims: &NetDims,
    mode: ProtocolMode,
    threshold: f64,
    topos: &[Topology],
    obs: Var,
    hist: Var,
) -> Result<Forward> {
    let first = first_round(tape, actor, dims, topos, obs, hist)?;
    let (gates, scores) = gate(tape, controller, dims, mode, threshold, first.c0, first.c1)?;
    let (c2, attention2) = second_round(tape, actor, dims, mode, topos, first.c1, &gates)?;
    let (preactivation, actions) = neural::policy_head(tape, actor, dims, first.c0, first.c1, c2)?;
    Ok(Forward { first, c2, attention2, gates, scores, actions, preactivation })
}

fn rows_of(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.rows()).map(|r| m.row(r).to_vec()).collect()
}

/// Per-agent embeddings and gate decisions of one step.
#[derive(Clone, Debug, PartialEq)]
pub struct RoundState {
    pub c0: Vec<Vec<f64>>,
    pub c1: Vec<Vec<f64>>,
    /// All-zero rows for agents whose gate stayed closed.
    pub c2: Vec<Vec<f64>>,
    pub gates: Vec<bool>,
    /// Controller scores, present in gated mode.
    pub scores: Option<Vec<f64>>,
    /// Per agent, weights over itself followed by its one-hop neighbours.
    pub attention1: Vec<Vec<f64>>,
    /// Per agent, second-round weights (empty when no second round ran).
    pub attention2: Vec<Vec<f64>>,
}

/// Result of [`Protocol::step`].
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub state: RoundState,
    /// Raw policy output per agent (logits or bounded vector).
    pub actions: Vec<Vec<f64>>,
    pub next_histories: Vec<Vec<f64>>,
    pub ledger: LedgerEntry,
}

/// Per-step protocol execution on plain vectors.
pub struct Protocol<'a> {
    pub dims: &'a NetDims,
    pub actor: &'a ParamStore,
    pub controller: &'a ParamStore,
    pub mode: ProtocolMode,
    pub threshold: f64,
    /// Bits per transmitted embedding.
    pub message_bits: u64,
}

impl Protocol<'_> {
    fn constant_rows(tape: &mut Tape, rows: &[Vec<f64>], width: usize, what: &str) -> Result<Var> {
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::Dimension(format!("{what} rows must have width {width}")));
        }
        if rows.is_empty() {
            return Err(Error::Dimension(format!("no {what} rows")));
        }
        tape.constant(Matrix::from_rows(rows))
    }

    fn check_agents(topo: &Topology, n: usize) -> Result<()> {
        if topo.n_agents() != n {
            return Err(Error::Dimension(format!(
                "topology has {} agents, inputs have {n}",
                topo.n_agents()
            )));
        }
        Ok(())
    }

    /// First-round embeddings from given initial embeddings.
    pub fn run_round1(&self, topo: &Topology, c0: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        Self::check_agents(topo, c0.len())?;
        let mut t = Tape::new();
        let c0v = Self::constant_rows(&mut t, c0, self.dims.hidden, "embedding")?;
        let a = neural::attend(
            &mut t,
            Bound::frozen(self.actor),
            self.dims,
            Round::First,
            c0v,
            round1_adjacency(std::slice::from_ref(topo)),
        )?;
        Ok(rows_of(t.value(a.embedding)))
    }

    pub fn run_gate(&self, c0: &[Vec<f64>], c1: &[Vec<f64>]) -> Result<Vec<bool>> {
        let mut t = Tape::new();
        let a = Self::constant_rows(&mut t, c0, self.dims.hidden, "embedding")?;
        let b = Self::constant_rows(&mut t, c1, self.dims.hidden, "embedding")?;
        Ok(gate(&mut t, self.controller, self.dims, self.mode, self.threshold, a, b)?.0)
    }

    pub fn run_round2(&self, topo: &Topology, c1: &[Vec<f64>], gates: &[bool]) -> Result<Vec<Vec<f64>>> {
        Self::check_agents(topo, c1.len())?;
        let mut t = Tape::new();
        let c1v = Self::constant_rows(&mut t, c1, self.dims.hidden, "embedding")?;
        let (c2, _) = second_round(
            &mut t,
            Bound::frozen(self.actor),
            self.dims,
            self.mode,
            std::slice::from_ref(topo),
            c1v,
            gates,
        )?;
        Ok(rows_of(t.value(c2)))
    }

    /// One full protocol step for every agent.
    pub fn step(&self, topo: &Topology, observations: &[Vec<f64>], histories: &[Vec<f64>]) -> Result<StepOutput> {
        let n = topo.n_agents();
        if observations.len() != n || histories.len() != n {
            return Err(Error::Dimension(format!(
                "{} observations and {} histories for {n} agents",
                observations.len(),
                histories.len()
            )));
        }
        let mut t = Tape::new();
        let obs = Self::constant_rows(&mut t, observations, self.dims.obs_dim, "observation")?;
        let hist = Self::constant_rows(&mut t, histories, self.dims.hidden, "history")?;
        let f = forward(
            &mut t,
            Bound::frozen(self.actor),
            self.controller,
            self.dims,
            self.mode,
            self.threshold,
            std::slice::from_ref(topo),
            obs,
            hist,
        )?;
        let attention1 = t.attention_weights(f.first.attention).expect("attention node").to_vec();
        let attention2 = match f.attention2 {
            Some(v) => t.attention_weights(v).expect("attention node").to_vec(),
            None => vec![Vec::new(); n],
        };
        let ledger = LedgerEntry::record(topo, &f.gates, self.mode, self.message_bits);
        Ok(StepOutput {
            state: RoundState {
                c0: rows_of(t.value(f.first.c0)),
                c1: rows_of(t.value(f.first.c1)),
                c2: rows_of(t.value(f.c2)),
                gates: f.gates,
                scores: f.scores,
                attention1,
                attention2,
            },
            actions: rows_of(t.value(f.actions)),
            next_histories: rows_of(t.value(f.first.h_next)),
            ledger,
        })
    }
}
