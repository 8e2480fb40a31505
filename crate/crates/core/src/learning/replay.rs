use rand::seq::index;
use rand::Rng;

use crate::commgraph::{build_topology_masked, Point, Topology};
use crate::diffmath::Matrix;
use crate::error::{Error, Result};

/// One joint step as seen by the centralized learner.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub obs: Vec<Vec<f64>>,
    pub hist: Vec<Vec<f64>>,
    pub actions: Vec<Vec<f64>>,
    /// Shared team reward.
    pub reward: f64,
    pub next_obs: Vec<Vec<f64>>,
    pub next_hist: Vec<Vec<f64>>,
    pub done: bool,
    pub positions: Vec<Point>,
    pub active: Vec<bool>,
    pub next_positions: Vec<Point>,
    pub next_active: Vec<bool>,
}

impl Transition {
    pub fn n_agents(&self) -> usize {
        self.obs.len()
    }

    fn check(&self) -> Result<()> {
        let n = self.obs.len();
        let lens = [
            self.hist.len(),
            self.actions.len(),
            self.next_obs.len(),
            self.next_hist.len(),
            self.positions.len(),
            self.active.len(),
            self.next_positions.len(),
            self.next_active.len(),
        ];
        if n == 0 || lens.iter().any(|&l| l != n) {
            return Err(Error::Dimension(format!("transition fields disagree on agent count {n}: {lens:?}")));
        }
        if !self.reward.is_finite() {
            return Err(Error::NonFinite { op: "transition reward" });
        }
        Ok(())
    }
}

/// Fixed-capacity ring of transitions with seeded uniform sampling.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Transition>,
    next: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            items: Vec::new(),
            next: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Stores `t`, evicting the oldest entry when full.
    pub fn push(&mut self, t: Transition) -> Result<()> {
        t.check()?;
        if let Some(first) = self.items.first() {
            if first.n_agents() != t.n_agents() {
                return Err(Error::Dimension(format!(
                    "replay holds {}-agent transitions, got {}",
                    first.n_agents(),
                    t.n_agents()
                )));
            }
        }
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.next] = t;
        }
        self.next = (self.next + 1) % self.capacity;
        Ok(())
    }

    /// `size` distinct transitions drawn uniformly.
    pub fn sample<R: Rng>(&self, size: usize, rng: &mut R) -> Result<Vec<&Transition>> {
        if size == 0 || size > self.items.len() {
            return Err(Error::Config(format!(
                "cannot sample {size} transitions from a buffer holding {}",
                self.items.len()
            )));
        }
        Ok(index::sample(rng, self.items.len(), size)
            .into_iter()
            .map(|i| &self.items[i])
            .collect())
    }
}

/// Transitions stacked into sample-major agent rows, with the
/// communication topologies rebuilt for the current and next step.
#[derive(Clone, Debug)]
pub struct Batch {
    pub n_agents: usize,
    pub obs: Matrix,
    pub hist: Matrix,
    pub actions: Matrix,
    pub next_obs: Matrix,
    pub next_hist: Matrix,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    pub topos: Vec<Topology>,
    pub next_topos: Vec<Topology>,
}

fn stack<'a>(rows: impl Iterator<Item = &'a Vec<f64>>) -> Result<Matrix> {
    let rows: Vec<&Vec<f64>> = rows.collect();
    let w = rows.first().map_or(0, |r| r.len());
    if rows.iter().any(|r| r.len() != w) {
        return Err(Error::Dimension("ragged rows in batch".into()));
    }
    Ok(Matrix::from_rows(&rows))
}

impl Batch {
    pub fn new(transitions: &[&Transition], range: f64) -> Result<Self> {
        let Some(first) = transitions.first() else {
            return Err(Error::Config("empty batch".into()));
        };
        let n = first.n_agents();
        for t in transitions {
            t.check()?;
            if t.n_agents() != n {
                return Err(Error::Dimension("batch mixes agent counts".into()));
            }
        }
        let topos = transitions
            .iter()
            .map(|t| build_topology_masked(&t.positions, &t.active, range))
            .collect::<Result<_>>()?;
        let next_topos = transitions
            .iter()
            .map(|t| build_topology_masked(&t.next_positions, &t.next_active, range))
            .collect::<Result<_>>()?;
        Ok(Self {
            n_agents: n,
            obs: stack(transitions.iter().flat_map(|t| &t.obs))?,
            hist: stack(transitions.iter().flat_map(|t| &t.hist))?,
            actions: stack(transitions.iter().flat_map(|t| &t.actions))?,
            next_obs: stack(transitions.iter().flat_map(|t| &t.next_obs))?,
            next_hist: stack(transitions.iter().flat_map(|t| &t.next_hist))?,
            rewards: transitions.iter().map(|t| t.reward).collect(),
            dones: transitions.iter().map(|t| t.done).collect(),
            topos,
            next_topos,
        })
    }

    pub fn size(&self) -> usize {
        self.rewards.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn transition(n: usize, tag: f64) -> Transition {
        Transition {
            obs: vec![vec![tag; 2]; n],
            hist: vec![vec![0.0; 3]; n],
            actions: vec![vec![0.1; 2]; n],
            reward: tag,
            next_obs: vec![vec![tag + 0.5; 2]; n],
            next_hist: vec![vec![0.0; 3]; n],
            done: false,
            positions: (0..n).map(|i| [i as f64 * 0.3, 0.0]).collect(),
            active: vec![true; n],
            next_positions: (0..n).map(|i| [i as f64 * 0.3, 0.1]).collect(),
            next_active: vec![true; n],
        }
    }

    #[test]
    fn ring_evicts_oldest() {
        let mut r = ReplayBuffer::new(3);
        for k in 0..5 {
            r.push(transition(2, k as f64)).unwrap();
        }
        assert_eq!(r.len(), 3);
        let mut rewards: Vec<f64> = r.items.iter().map(|t| t.reward).collect();
        rewards.sort_by(f64::total_cmp);
        assert_eq!(rewards, vec![2.0, 3.0, 4.0]);
    }

    #[test]
    fn seeded_sampling_is_reproducible_and_bounded() {
        let mut r = ReplayBuffer::new(100);
        for k in 0..20 {
            r.push(transition(2, k as f64)).unwrap();
        }
        let pick = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            r.sample(8, &mut rng).unwrap().iter().map(|t| t.reward).collect::<Vec<_>>()
        };
        assert_eq!(pick(4), pick(4));
        assert!(r.sample(21, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
        let all = r.sample(20, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut seen: Vec<f64> = all.iter().map(|t| t.reward).collect();
        seen.sort_by(f64::total_cmp);
        seen.dedup();
        assert_eq!(seen.len(), 20);
    }

    #[test]
    fn agent_count_is_fixed() {
        let mut r = ReplayBuffer::new(4);
        r.push(transition(2, 0.0)).unwrap();
        assert!(r.push(transition(3, 0.0)).is_err());
    }

    #[test]
    fn batch_stacks_sample_major() {
        let a = transition(2, 1.0);
        let b = transition(2, 2.0);
        let batch = Batch::new(&[&a, &b], 0.5).unwrap();
        assert_eq!(batch.obs.shape(), (4, 2));
        assert_eq!(batch.obs.row(2), &[2.0, 2.0]);
        assert_eq!(batch.topos.len(), 2);
        assert_eq!(batch.topos[0].one_hop(0), &[1]);
    }
}
