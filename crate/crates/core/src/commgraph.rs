//! Range-limited communication topology and overhead accounting.
//!
//! Agents within Euclidean distance `L` of each other (closed disk) share a
//! direct link. From that graph each agent `i` gets:
//!
//! * `one_hop[i]`: agents within `L` of `i`, excluding `i`;
//! * `two_hop_closure[i]`: agents within `L` of some one-hop neighbour of
//!   `i` (the neighbour itself included, as it is at distance zero);
//! * `two_hop[i]`: the closure minus the one-hop set and `i` itself.
//!
//! Second-round messages to a two-hop neighbour travel through a relay, a
//! one-hop neighbour that is itself adjacent to the target.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::protocol::ProtocolMode;

/// Position in world units.
pub type Point = [f64; 2];

#[derive(Clone, Debug, PartialEq)]
pub struct Topology {
    n_agents: usize,
    active: Vec<bool>,
    one_hop: Vec<Vec<usize>>,
    two_hop_closure: Vec<Vec<usize>>,
    two_hop: Vec<Vec<usize>>,
    relays: BTreeMap<(usize, usize), Vec<usize>>,
}

/// Builds the topology for agents at `positions` with range `range`.
pub fn build_topology(positions: &[Point], range: f64) -> Result<Topology> {
    build_topology_masked(positions, &vec![true; positions.len()], range)
}

/// Like [`build_topology`], but inactive agents neither send nor receive:
/// they have empty neighbour sets and appear in nobody else's.
pub fn build_topology_masked(positions: &[Point], active: &[bool], range: f64) -> Result<Topology> {
    if !range.is_finite() || range <= 0.0 {
        return Err(Error::Config(format!("communication range must be positive, got {range}")));
    }
    if active.len() != positions.len() {
        return Err(Error::Dimension(format!(
            "{} positions but {} activity flags",
            positions.len(),
            active.len()
        )));
    }
    if let Some(i) = positions.iter().position(|p| !p[0].is_finite() || !p[1].is_finite()) {
        return Err(Error::Topology(format!("agent {i} has a non-finite position")));
    }
    let n = positions.len();
    let r2 = range * range;
    let mut one_hop = vec![Vec::new(); n];
    for i in 0..n {
        if !active[i] {
            continue;
        }
        for j in (i + 1)..n {
            if !active[j] {
                continue;
            }
            let dx = positions[i][0] - positions[j][0];
            let dy = positions[i][1] - positions[j][1];
            if dx * dx + dy * dy <= r2 {
                one_hop[i].push(j);
                one_hop[j].push(i);
            }
        }
    }
    for l in &mut one_hop {
        l.sort_unstable();
    }

    let mut two_hop_closure = Vec::with_capacity(n);
    let mut two_hop = Vec::with_capacity(n);
    let mut relays = BTreeMap::new();
    for i in 0..n {
        let mut closure = BTreeSet::new();
        for &j in &one_hop[i] {
            closure.insert(j);
            closure.extend(one_hop[j].iter().copied());
        }
        let direct: BTreeSet<usize> = one_hop[i].iter().copied().collect();
        let far: Vec<usize> = closure
            .iter()
            .copied()
            .filter(|&k| k != i && !direct.contains(&k))
            .collect();
        for &k in &far {
            let via: Vec<usize> = one_hop[i]
                .iter()
                .copied()
                .filter(|&j| one_hop[j].binary_search(&k).is_ok())
                .collect();
            relays.insert((i, k), via);
        }
        two_hop_closure.push(closure.into_iter().collect());
        two_hop.push(far);
    }

    Ok(Topology {
        n_agents: n,
        active: active.to_vec(),
        one_hop,
        two_hop_closure,
        two_hop,
        relays,
    })
}

impl Topology {
    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    pub fn is_active(&self, i: usize) -> bool {
        self.active[i]
    }

    pub fn active(&self) -> &[bool] {
        &self.active
    }

    pub fn one_hop(&self, i: usize) -> &[usize] {
        &self.one_hop[i]
    }

    pub fn two_hop_closure(&self, i: usize) -> &[usize] {
        &self.two_hop_closure[i]
    }

    pub fn two_hop(&self, i: usize) -> &[usize] {
        &self.two_hop[i]
    }

    /// Relays able to forward a second-round message from `k` to `i`.
    pub fn relay_paths(&self, i: usize, k: usize) -> Result<&[usize]> {
        self.relays
            .get(&(i, k))
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Topology(format!("agent {k} is not a two-hop neighbour of agent {i}")))
    }

    /// The relay actually used for `k → i`: the lowest-index candidate.
    pub fn chosen_relay(&self, i: usize, k: usize) -> Result<usize> {
        Ok(self.relay_paths(i, k)?[0])
    }

    /// Number of directed first-round links, `Σ_i |N_i⁽¹⁾|`.
    pub fn one_hop_links(&self) -> u64 {
        self.one_hop.iter().map(|l| l.len() as u64).sum()
    }

    /// Line-oriented dump, one line per agent:
    /// `agent <i> | one_hop: [a, b] | two_hop: [c]`.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for i in 0..self.n_agents {
            let _ = writeln!(
                out,
                "agent {i} | one_hop: {} | two_hop: {}",
                fmt_set(&self.one_hop[i]),
                fmt_set(&self.two_hop[i])
            );
        }
        out
    }
}

fn fmt_set(s: &[usize]) -> String {
    let items: Vec<String> = s.iter().map(usize::to_string).collect();
    format!("[{}]", items.join(", "))
}

/// `Σ_i |N_i⁽¹⁾| · w`.
pub fn cost_round1(topo: &Topology, w: u64) -> u64 {
    topo.one_hop_links() * w
}

/// Second-round bits. Gated two-hop modes charge `|N_i⁽²⁾| · 2w` for every
/// agent whose gate is open (each message crosses two links); the GNN
/// baseline repeats the first-round exchange; one-round charges nothing.
/// The one-bit round-two request is not billed.
pub fn cost_round2(topo: &Topology, gates: &[bool], mode: ProtocolMode, w: u64) -> u64 {
    round2_links(topo, gates, mode) * round2_link_bits(mode, w)
}

/// Links (pairs) served in the second round.
pub fn round2_links(topo: &Topology, gates: &[bool], mode: ProtocolMode) -> u64 {
    match mode {
        ProtocolMode::Ac2c | ProtocolMode::Ac2cNoController => (0..topo.n_agents())
            .filter(|&i| gates.get(i).copied().unwrap_or(false))
            .map(|i| topo.two_hop(i).len() as u64)
            .sum(),
        ProtocolMode::GnnTwoRound => topo.one_hop_links(),
        ProtocolMode::OneRound => 0,
    }
}

fn round2_link_bits(mode: ProtocolMode, w: u64) -> u64 {
    match mode {
        ProtocolMode::Ac2c | ProtocolMode::Ac2cNoController => 2 * w,
        ProtocolMode::GnnTwoRound => w,
        ProtocolMode::OneRound => 0,
    }
}

/// Bits and links exchanged during one timestep.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub round1_links: u64,
    pub round2_links: u64,
    pub round1_bits: u64,
    pub round2_bits: u64,
    /// Gate signal per agent slot (`false` for inactive slots).
    pub gates: Vec<bool>,
}

impl LedgerEntry {
    pub fn record(topo: &Topology, gates: &[bool], mode: ProtocolMode, w: u64) -> Self {
        Self {
            round1_links: topo.one_hop_links(),
            round2_links: round2_links(topo, gates, mode),
            round1_bits: cost_round1(topo, w),
            round2_bits: cost_round2(topo, gates, mode, w),
            gates: gates.to_vec(),
        }
    }

    pub fn total_bits(&self) -> u64 {
        self.round1_bits + self.round2_bits
    }

    pub fn open_gates(&self) -> usize {
        self.gates.iter().filter(|&&g| g).count()
    }
}

/// Per-timestep communication accounting for an episode.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostLedger {
    pub w: u64,
    pub entries: Vec<LedgerEntry>,
}

impl CostLedger {
    pub fn new(w: u64) -> Self {
        Self { w, entries: Vec::new() }
    }

    pub fn push(&mut self, entry: LedgerEntry) {
        self.entries.push(entry);
    }

    pub fn round1_bits(&self) -> u64 {
        self.entries.iter().map(|e| e.round1_bits).sum()
    }

    pub fn round2_bits(&self) -> u64 {
        self.entries.iter().map(|e| e.round2_bits).sum()
    }

    pub fn total_bits(&self) -> u64 {
        self.round1_bits() + self.round2_bits()
    }

    pub fn steps(&self) -> usize {
        self.entries.len()
    }
}
