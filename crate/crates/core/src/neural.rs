//! Network blocks: recurrent encoder, per-round attention heads, gating
//! controller, actor and centralized critic.
//!
//! Every block is a pure function of a [`ParamStore`] and its inputs and is
//! written against a [`Tape`] so the same code serves inference and training.
//! Batched inputs put one agent per row; the attention heads take explicit
//! per-row neighbour lists so several agents (or several samples' worth of
//! agents) can be aggregated in one call.

use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffmath::{Adjacency, Matrix, ParamStore, Tape, Var};
use crate::error::{Error, Result};

/// Shape of an agent's action output.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    /// Logits over `action_dim` choices.
    Discrete,
    /// A `tanh`-bounded vector in `[-1, 1]^action_dim`.
    Continuous,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetDims {
    pub obs_dim: usize,
    /// Width of the history, every embedding and every attention projection.
    pub hidden: usize,
    pub action_dim: usize,
    pub action: ActionKind,
    /// Agent slots seen by the centralized critic.
    pub n_agents: usize,
}

impl NetDims {
    pub fn critic_input_per_agent(&self) -> usize {
        self.hidden + self.obs_dim + self.action_dim
    }
}

/// Communication round served by an attention head.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Round {
    First,
    Second,
}

impl Round {
    fn prefix(self) -> &'static str {
        match self {
            Round::First => "attn1",
            Round::Second => "attn2",
        }
    }
}

/// A parameter store bound for one forward pass.
#[derive(Clone, Copy)]
pub struct Bound<'a> {
    pub store: &'a ParamStore,
    pub trainable: bool,
}

impl<'a> Bound<'a> {
    pub fn trainable(store: &'a ParamStore) -> Self {
        Self { store, trainable: true }
    }

    pub fn frozen(store: &'a ParamStore) -> Self {
        Self { store, trainable: false }
    }

    fn get(&self, tape: &mut Tape, name: &str) -> Result<Var> {
        tape.param(self.store, name, self.trainable)
    }
}

fn check_cols(tape: &Tape, v: Var, cols: usize, what: &str) -> Result<()> {
    let got = tape.value(v).cols();
    if got != cols {
        return Err(Error::Dimension(format!("{what}: expected width {cols}, got {got}")));
    }
    Ok(())
}

fn linear(tape: &mut Tape, p: Bound, x: Var, w: &str, b: &str) -> Result<Var> {
    let w = p.get(tape, w)?;
    let b = p.get(tape, b)?;
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

// ---- initialization ------------------------------------------------------

fn dense<R: Rng>(s: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Result<()> {
    s.insert_uniform(format!("{name}.w"), fan_in, fan_out, fan_in, rng)?;
    s.insert_uniform(format!("{name}.b"), 1, fan_out, fan_in, rng)
}

/// Encoder, both attention heads and the policy head. These are shared by
/// all agents and optimized together.
pub fn init_actor<R: Rng>(dims: &NetDims, rng: &mut R) -> Result<ParamStore> {
    let (o, d, a) = (dims.obs_dim, dims.hidden, dims.action_dim);
    let mut s = ParamStore::new();
    for gate in ["r", "z", "n"] {
        s.insert_uniform(format!("encoder.w_x{gate}"), o, d, d, rng)?;
        s.insert_uniform(format!("encoder.w_h{gate}"), d, d, d, rng)?;
    }
    for b in ["b_r", "b_z", "b_xn", "b_hn"] {
        s.insert_uniform(format!("encoder.{b}"), 1, d, d, rng)?;
    }
    for round in [Round::First, Round::Second] {
        for m in ["w_q", "w_k", "w_v"] {
            s.insert_uniform(format!("{}.{m}", round.prefix()), d, d, d, rng)?;
        }
    }
    dense(&mut s, "policy.l1", 3 * d, d, rng)?;
    dense(&mut s, "policy.l2", d, a, rng)?;
    Ok(s)
}

pub fn init_controller<R: Rng>(dims: &NetDims, rng: &mut R) -> Result<ParamStore> {
    let d = dims.hidden;
    let mut s = ParamStore::new();
    dense(&mut s, "controller.l1", 2 * d, d, rng)?;
    dense(&mut s, "controller.l2", d, 1, rng)?;
    Ok(s)
}

pub fn init_critic<R: Rng>(dims: &NetDims, rng: &mut R) -> Result<ParamStore> {
    let d = dims.hidden;
    let mut s = ParamStore::new();
    dense(&mut s, "critic.enc", dims.critic_input_per_agent(), d, rng)?;
    dense(&mut s, "critic.l1", dims.n_agents * d, d, rng)?;
    dense(&mut s, "critic.l2", d, dims.n_agents, rng)?;
    Ok(s)
}

// ---- batched blocks ------------------------------------------------------

/// Gated recurrent cell. `obs` is `M × obs_dim`, `hist` is `M × hidden`.
/// Returns `(c0, h_next)`; the cell output is the new history, so both
/// handles refer to the same node.
pub fn encode(tape: &mut Tape, p: Bound, dims: &NetDims, obs: Var, hist: Var) -> Result<(Var, Var)> {
    check_cols(tape, obs, dims.obs_dim, "encoder observation")?;
    check_cols(tape, hist, dims.hidden, "encoder history")?;
    if tape.value(obs).rows() != tape.value(hist).rows() {
        return Err(Error::Dimension("encoder observation/history row counts differ".into()));
    }
    let gate = |tape: &mut Tape, g: &str, bias: &str| -> Result<Var> {
        let wx = p.get(tape, &format!("encoder.w_x{g}"))?;
        let wh = p.get(tape, &format!("encoder.w_h{g}"))?;
        let b = p.get(tape, &format!("encoder.{bias}"))?;
        let xa = tape.matmul(obs, wx)?;
        let ha = tape.matmul(hist, wh)?;
        let s = tape.add(xa, ha)?;
        let s = tape.add_row(s, b)?;
        tape.sigmoid(s)
    };
    let r = gate(tape, "r", "b_r")?;
    let z = gate(tape, "z", "b_z")?;

    let wxn = p.get(tape, "encoder.w_xn")?;
    let whn = p.get(tape, "encoder.w_hn")?;
    let bxn = p.get(tape, "encoder.b_xn")?;
    let bhn = p.get(tape, "encoder.b_hn")?;
    let xn = tape.matmul(obs, wxn)?;
    let xn = tape.add_row(xn, bxn)?;
    let hn = tape.matmul(hist, whn)?;
    let hn = tape.add_row(hn, bhn)?;
    let rh = tape.mul(r, hn)?;
    let n = tape.add(xn, rh)?;
    let n = tape.tanh(n)?;

    // h' = (1 − z)·n + z·h
    let one_minus_z = tape.affine(z, -1.0, 1.0)?;
    let a = tape.mul(one_minus_z, n)?;
    let b = tape.mul(z, hist)?;
    let h_next = tape.add(a, b)?;
    Ok((h_next, h_next))
}

/// Output of an attention head.
#[derive(Clone, Copy, Debug)]
pub struct Attended {
    /// `tanh` of the attention-weighted values.
    pub embedding: Var,
    /// The raw attention node; its weights are available through
    /// [`Tape::attention_weights`].
    pub attention: Var,
}

/// Attention aggregation for one round. Row `i` of the result is
/// `tanh(Σ_j α_ij v_j)` with `α_i = softmax_j LeakyReLU(q_i·k_j / √d)` over
/// `adjacency[i]`. Callers decide whether `i` appears in its own list; an
/// empty list yields a zero row.
pub fn attend(tape: &mut Tape, p: Bound, dims: &NetDims, round: Round, emb: Var, adjacency: Adjacency) -> Result<Attended> {
    check_cols(tape, emb, dims.hidden, "attention input")?;
    let pre = round.prefix();
    let wq = p.get(tape, &format!("{pre}.w_q"))?;
    let wk = p.get(tape, &format!("{pre}.w_k"))?;
    let wv = p.get(tape, &format!("{pre}.w_v"))?;
    let q = tape.matmul(emb, wq)?;
    let k = tape.matmul(emb, wk)?;
    let v = tape.matmul(emb, wv)?;
    let scale = 1.0 / (dims.hidden as f64).sqrt();
    let attention = tape.attention(q, k, v, adjacency, scale)?;
    let embedding = tape.tanh(attention)?;
    Ok(Attended { embedding, attention })
}

/// Controller pre-activation; the gate probability is its sigmoid.
pub fn controller_logit(tape: &mut Tape, p: Bound, dims: &NetDims, c0: Var, c1: Var) -> Result<Var> {
    check_cols(tape, c0, dims.hidden, "controller c0")?;
    check_cols(tape, c1, dims.hidden, "controller c1")?;
    let x = tape.concat(&[c0, c1])?;
    let h = linear(tape, p, x, "controller.l1.w", "controller.l1.b")?;
    let h = tape.relu(h)?;
    linear(tape, p, h, "controller.l2.w", "controller.l2.b")
}

/// Gate probability `h(c0, c1) ∈ (0, 1)`, one row per agent.
pub fn controller_score(tape: &mut Tape, p: Bound, dims: &NetDims, c0: Var, c1: Var) -> Result<Var> {
    let s = controller_logit(tape, p, dims, c0, c1)?;
    tape.sigmoid(s)
}

/// Policy head on `[c0, c1, c2]`: logits for discrete actions, a
/// `tanh`-bounded vector for continuous ones.
pub fn act(tape: &mut Tape, p: Bound, dims: &NetDims, c0: Var, c1: Var, c2: Var) -> Result<Var> {
    Ok(policy_head(tape, p, dims, c0, c1, c2)?.1)
}

/// Like [`act`], also returning the output layer before the bound (the
/// logits themselves for discrete actions).
pub fn policy_head(tape: &mut Tape, p: Bound, dims: &NetDims, c0: Var, c1: Var, c2: Var) -> Result<(Var, Var)> {
    for (v, what) in [(c0, "policy c0"), (c1, "policy c1"), (c2, "policy c2")] {
        check_cols(tape, v, dims.hidden, what)?;
    }
    let x = tape.concat(&[c0, c1, c2])?;
    let h = linear(tape, p, x, "policy.l1.w", "policy.l1.b")?;
    let h = tape.relu(h)?;
    let out = linear(tape, p, h, "policy.l2.w", "policy.l2.b")?;
    match dims.action {
        ActionKind::Discrete => Ok((out, out)),
        ActionKind::Continuous => Ok((out, tape.tanh(out)?)),
    }
}

/// Centralized critic. Inputs hold `B · n_agents` rows, sample-major. Each
/// agent's `(h, o, a)` row goes through a shared encoding layer; the
/// encodings of a sample are concatenated in agent order and mapped by a
/// hidden layer to one value per agent. Returns `B × n_agents`.
pub fn critic_value(tape: &mut Tape, p: Bound, dims: &NetDims, hist: Var, obs: Var, actions: Var) -> Result<Var> {
    check_cols(tape, hist, dims.hidden, "critic history")?;
    check_cols(tape, obs, dims.obs_dim, "critic observation")?;
    check_cols(tape, actions, dims.action_dim, "critic action")?;
    let rows = tape.value(hist).rows();
    if rows == 0 || !rows.is_multiple_of(dims.n_agents) {
        return Err(Error::Dimension(format!(
            "critic needs a multiple of {} agent rows, got {rows}",
            dims.n_agents
        )));
    }
    if tape.value(obs).rows() != rows || tape.value(actions).rows() != rows {
        return Err(Error::Dimension("critic inputs disagree on agent rows".into()));
    }
    let per = tape.concat(&[hist, obs, actions])?;
    let e = linear(tape, p, per, "critic.enc.w", "critic.enc.b")?;
    let e = tape.relu(e)?;
    let batch = rows / dims.n_agents;
    let joint = tape.reshape(e, batch, dims.n_agents * dims.hidden)?;
    let h = linear(tape, p, joint, "critic.l1.w", "critic.l1.b")?;
    let h = tape.relu(h)?;
    linear(tape, p, h, "critic.l2.w", "critic.l2.b")
}

// ---- single-agent conveniences -------------------------------------------

/// Inference helpers on plain vectors for one agent at a time.
pub struct AgentNets<'a> {
    pub dims: &'a NetDims,
    pub actor: &'a ParamStore,
    pub controller: &'a ParamStore,
}

impl AgentNets<'_> {
    pub fn encode(&self, obs: &[f64], hist: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut t = Tape::new();
        let o = t.constant(Matrix::row_vector(obs))?;
        let h = t.constant(Matrix::row_vector(hist))?;
        let (c0, h_next) = encode(&mut t, Bound::frozen(self.actor), self.dims, o, h)?;
        Ok((t.value(c0).data().to_vec(), t.value(h_next).data().to_vec()))
    }

    /// Aggregates `self_emb` with `neighbours`; the agent's own value takes
    /// part in the softmax. Returns the new embedding and the weights
    /// (self first, then neighbours in order).
    pub fn attend(&self, round: Round, self_emb: &[f64], neighbours: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut rows = vec![self_emb.to_vec()];
        rows.extend(neighbours.iter().cloned());
        if rows.iter().any(|r| r.len() != self.dims.hidden) {
            return Err(Error::Dimension(format!("embeddings must have width {}", self.dims.hidden)));
        }
        let mut t = Tape::new();
        let e = t.constant(Matrix::from_rows(&rows))?;
        let mut adj = vec![Vec::new(); rows.len()];
        adj[0] = (0..rows.len()).collect();
        let out = attend(&mut t, Bound::frozen(self.actor), self.dims, round, e, Rc::new(adj))?;
        let weights = t.attention_weights(out.attention).expect("attention node")[0].clone();
        Ok((t.value(out.embedding).row(0).to_vec(), weights))
    }

    pub fn controller_score(&self, c0: &[f64], c1: &[f64]) -> Result<f64> {
        let mut t = Tape::new();
        let a = t.constant(Matrix::row_vector(c0))?;
        let b = t.constant(Matrix::row_vector(c1))?;
        let s = controller_score(&mut t, Bound::frozen(self.controller), self.dims, a, b)?;
        Ok(t.value(s).item())
    }

    pub fn act(&self, c0: &[f64], c1: &[f64], c2: &[f64]) -> Result<Vec<f64>> {
        let mut t = Tape::new();
        let a = t.constant(Matrix::row_vector(c0))?;
        let b = t.constant(Matrix::row_vector(c1))?;
        let c = t.constant(Matrix::row_vector(c2))?;
        let out = act(&mut t, Bound::frozen(self.actor), self.dims, a, b, c)?;
        Ok(t.value(out).data().to_vec())
    }
}

/// One critic evaluation for a single joint sample; slices are per agent.
pub fn critic_values(
    critic: &ParamStore,
    dims: &NetDims,
    hist: &[Vec<f64>],
    obs: &[Vec<f64>],
    actions: &[Vec<f64>],
) -> Result<Vec<f64>> {
    for (len, what) in [(hist.len(), "histories"), (obs.len(), "observations"), (actions.len(), "actions")] {
        if len != dims.n_agents {
            return Err(Error::Dimension(format!("critic expects {} agent {what}, got {len}", dims.n_agents)));
        }
    }
    let mut t = Tape::new();
    let h = t.constant(Matrix::from_rows(hist))?;
    let o = t.constant(Matrix::from_rows(obs))?;
    let a = t.constant(Matrix::from_rows(actions))?;
    let q = critic_value(&mut t, Bound::frozen(critic), dims, h, o, a)?;
    Ok(t.value(q).data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::fd;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims(action: ActionKind) -> NetDims {
        NetDims {
            obs_dim: 5,
            hidden: 6,
            action_dim: 3,
            action,
            n_agents: 3,
        }
    }

    fn rand_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix {
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    fn zero_store(s: &ParamStore) -> ParamStore {
        let mut z = s.clone();
        let names: Vec<String> = z.names().map(str::to_string).collect();
        for n in names {
            z.value_mut(&n).unwrap().fill(0.0);
        }
        z
    }

    #[test]
    fn zero_encoder_gives_uniform_embedding() {
        let d = dims(ActionKind::Continuous);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let actor = zero_store(&init_actor(&d, &mut rng).unwrap());
        let ctrl = init_controller(&d, &mut rng).unwrap();
        let nets = AgentNets { dims: &d, actor: &actor, controller: &ctrl };
        let (c0, h) = nets.encode(&[0.0; 5], &[0.0; 6]).unwrap();
        assert_eq!(c0.len(), 6);
        assert!(c0.iter().all(|&v| v == c0[0]));
        assert_eq!(c0, h);
    }

    #[test]
    fn encode_is_deterministic_and_checks_dims() {
        let d = dims(ActionKind::Continuous);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let actor = init_actor(&d, &mut rng).unwrap();
        let ctrl = init_controller(&d, &mut rng).unwrap();
        let nets = AgentNets { dims: &d, actor: &actor, controller: &ctrl };
        let o = [0.1, -0.4, 0.9, 0.0, 0.3];
        let h = [0.2, 0.1, -0.7, 0.5, 0.0, 0.3];
        assert_eq!(nets.encode(&o, &h).unwrap(), nets.encode(&o, &h).unwrap());
        assert!(nets.encode(&o[..4], &h).is_err());
    }

    #[test]
    fn singleton_and_symmetric_attention() {
        let d = dims(ActionKind::Continuous);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let actor = init_actor(&d, &mut rng).unwrap();
        let ctrl = init_controller(&d, &mut rng).unwrap();
        let nets = AgentNets { dims: &d, actor: &actor, controller: &ctrl };

        // one message, self excluded from the softmax set
        let vj = rand_rows(&mut rng, 2, 6);
        let mut t = Tape::new();
        let e = t.constant(vj.clone()).unwrap();
        let out = attend(&mut t, Bound::frozen(&actor), &d, Round::First, e, Rc::new(vec![vec![1], vec![]])).unwrap();
        assert_eq!(t.attention_weights(out.attention).unwrap()[0], vec![1.0]);
        let v = vj.matmul(actor.value("attn1.w_v").unwrap());
        let expected: Vec<f64> = v.row(1).iter().map(|x| x.tanh()).collect();
        assert_eq!(t.value(out.embedding).row(0), &expected[..]);

        // two identical neighbours
        let c = vec![0.3, -0.2, 0.5, 0.1, 0.0, -0.9];
        let n = vec![0.7, 0.1, -0.3, 0.2, 0.4, 0.6];
        let mut t = Tape::new();
        let e = t.constant(Matrix::from_rows(&[c, n.clone(), n])).unwrap();
        let out = attend(&mut t, Bound::frozen(&actor), &d, Round::Second, e, Rc::new(vec![vec![1, 2], vec![], vec![]])).unwrap();
        let w = &t.attention_weights(out.attention).unwrap()[0];
        assert!((w[0] - 0.5).abs() < 1e-15 && (w[1] - 0.5).abs() < 1e-15);

        // the convenience wrapper includes self
        let (_, w) = nets.attend(Round::First, &[0.0; 6], &[]).unwrap();
        assert_eq!(w, vec![1.0]);
    }

    #[test]
    fn controller_zero_final_layer_is_half() {
        let d = dims(ActionKind::Continuous);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let actor = init_actor(&d, &mut rng).unwrap();
        let mut ctrl = init_controller(&d, &mut rng).unwrap();
        ctrl.value_mut("controller.l2.w").unwrap().fill(0.0);
        ctrl.value_mut("controller.l2.b").unwrap().fill(0.0);
        let nets = AgentNets { dims: &d, actor: &actor, controller: &ctrl };
        let s = nets.controller_score(&[0.4; 6], &[-0.1; 6]).unwrap();
        assert_eq!(s, 0.5);
    }

    #[test]
    fn controller_score_in_open_interval() {
        let d = dims(ActionKind::Continuous);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ctrl = init_controller(&d, &mut rng).unwrap();
        let mut t = Tape::new();
        let c0 = t.constant(rand_rows(&mut rng, 1000, 6)).unwrap();
        let c1 = t.constant(rand_rows(&mut rng, 1000, 6)).unwrap();
        let s = controller_score(&mut t, Bound::frozen(&ctrl), &d, c0, c1).unwrap();
        assert!(t.value(s).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn act_with_zero_c2_matches_one_round_form() {
        let d = dims(ActionKind::Discrete);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let actor = init_actor(&d, &mut rng).unwrap();
        let ctrl = init_controller(&d, &mut rng).unwrap();
        let nets = AgentNets { dims: &d, actor: &actor, controller: &ctrl };
        let c0 = [0.1, 0.2, 0.3, -0.4, 0.5, 0.0];
        let c1 = [-0.3, 0.2, 0.1, 0.4, -0.5, 0.6];
        let a = nets.act(&c0, &c1, &[0.0; 6]).unwrap();
        assert_eq!(a, nets.act(&c0, &c1, &[0.0; 6]).unwrap());
        // by hand: relu([c0, c1, 0]·W1 + b1)·W2 + b2
        let x = Matrix::row_vector(&[&c0[..], &c1[..], &[0.0; 6]].concat());
        let mut h = x.matmul(actor.value("policy.l1.w").unwrap());
        h.add_assign(actor.value("policy.l1.b").unwrap());
        let h = h.map(|v| v.max(0.0));
        let mut y = h.matmul(actor.value("policy.l2.w").unwrap());
        y.add_assign(actor.value("policy.l2.b").unwrap());
        assert_eq!(a, y.data());
    }

    #[test]
    fn continuous_actions_are_bounded() {
        let d = dims(ActionKind::Continuous);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let actor = init_actor(&d, &mut rng).unwrap();
        let mut t = Tape::new();
        let c = t.constant(rand_rows(&mut rng, 50, 6).map(|v| 40.0 * v)).unwrap();
        let a = act(&mut t, Bound::frozen(&actor), &d, c, c, c).unwrap();
        assert!(t.value(a).data().iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn critic_zero_params_and_slot_checks() {
        let d = dims(ActionKind::Continuous);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let critic = zero_store(&init_critic(&d, &mut rng).unwrap());
        let h = vec![vec![0.5; 6]; 3];
        let o = vec![vec![0.1; 5]; 3];
        let a = vec![vec![0.2; 3]; 3];
        assert_eq!(critic_values(&critic, &d, &h, &o, &a).unwrap(), vec![0.0; 3]);
        assert!(critic_values(&critic, &d, &h[..2], &o, &a).is_err());
    }

    #[test]
    fn critic_slot_permutation_is_consistent() {
        let d = dims(ActionKind::Continuous);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let critic = init_critic(&d, &mut rng).unwrap();
        let rows = |rng: &mut ChaCha8Rng, w| (0..3).map(|_| rand_rows(rng, 1, w).into_vec()).collect::<Vec<_>>();
        let (h, o, a) = (rows(&mut rng, 6), rows(&mut rng, 5), rows(&mut rng, 3));
        let q = critic_values(&critic, &d, &h, &o, &a).unwrap();
        assert_eq!(q, critic_values(&critic, &d, &h, &o, &a).unwrap());
        let swap = |v: &Vec<Vec<f64>>| vec![v[1].clone(), v[0].clone(), v[2].clone()];
        let q2 = critic_values(&critic, &d, &swap(&h), &swap(&o), &swap(&a)).unwrap();
        // slots are positional: a swapped input is a different joint input
        assert_ne!(q, q2);
    }

    /// Scalar loss through every block; gradients against central
    /// differences.
    #[test]
    fn all_blocks_match_finite_differences() {
        for (seed, action) in [(10, ActionKind::Continuous), (11, ActionKind::Discrete)] {
            let d = dims(action);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut actor = init_actor(&d, &mut rng).unwrap();
            let obs = rand_rows(&mut rng, 3, 5);
            let hist = rand_rows(&mut rng, 3, 6);
            let adj1: Adjacency = Rc::new(vec![vec![0, 1], vec![0, 1, 2], vec![1, 2]]);
            let adj2: Adjacency = Rc::new(vec![vec![0, 2], vec![], vec![0, 2]]);
            let mut loss = |s: &ParamStore, want: bool| {
                let mut t = Tape::new();
                let p = Bound::trainable(s);
                let o = t.constant(obs.clone()).unwrap();
                let h = t.constant(hist.clone()).unwrap();
                let (c0, _) = encode(&mut t, p, &d, o, h).unwrap();
                let c1 = attend(&mut t, p, &d, Round::First, c0, adj1.clone()).unwrap().embedding;
                let c2 = attend(&mut t, p, &d, Round::Second, c1, adj2.clone()).unwrap().embedding;
                let a = act(&mut t, p, &d, c0, c1, c2).unwrap();
                let sq = t.square(a).unwrap();
                let l = t.mean(sq).unwrap();
                let v = t.value(l).item();
                if !want {
                    return (v, None);
                }
                t.backward(l).unwrap();
                (v, Some(s.with_tape_grads(&t)))
            };
            let err = fd::max_param_error(&mut actor, 1e-5, &mut loss);
            assert!(err < 1e-4, "actor path max rel err {err}");
        }
    }
}
