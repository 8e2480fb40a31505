use std::rc::Rc;

use crate::commgraph::{build_topology_masked, Point, Topology};
use crate::diffmath::{Matrix, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::neural::{ActionKind, Bound, NetDims};
use crate::protocol;

use super::{Hyper, Networks, Setting};

/// One recorded step of a discrete-action rollout.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeStep {
    pub obs: Vec<Vec<f64>>,
    pub hist: Vec<Vec<f64>>,
    /// Chosen action index per agent slot (ignored for inactive slots).
    pub actions: Vec<usize>,
    pub reward: f64,
    pub positions: Vec<Point>,
    pub active: Vec<bool>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Episode {
    pub steps: Vec<EpisodeStep>,
}

impl Episode {
    pub fn rewards(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.reward).collect()
    }
}

/// Baseline subtracted from episodic returns.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Baseline {
    /// Mean return of the episodes in the update batch.
    BatchMean,
    Fixed(f64),
}

/// `G = Σ_t γᵗ r_t`.
pub fn episode_return(rewards: &[f64], gamma: f64) -> f64 {
    rewards.iter().rev().fold(0.0, |g, r| r + gamma * g)
}

/// `(1/E) Σ_e (G_e − b) Σ_t Σ_{active i} log π(a_i)`; histories are
/// treated as fixed inputs.
pub(crate) fn surrogate(
    tape: &mut Tape,
    actor: Bound,
    controller: &ParamStore,
    dims: &NetDims,
    episodes: &[Episode],
    advantages: &[f64],
    setting: &Setting,
) -> Result<Var> {
    let n = dims.n_agents;
    let (mut obs, mut hist, mut picks, mut weights) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut topos: Vec<Topology> = Vec::new();
    let scale = 1.0 / episodes.len() as f64;
    for (ep, &adv) in episodes.iter().zip(advantages) {
        for s in &ep.steps {
            if s.obs.len() != n || s.hist.len() != n || s.actions.len() != n || s.active.len() != n {
                return Err(Error::Dimension(format!("episode step does not have {n} agent slots")));
            }
            topos.push(build_topology_masked(&s.positions, &s.active, setting.range)?);
            for i in 0..n {
                if s.active[i] && s.actions[i] >= dims.action_dim {
                    return Err(Error::InvalidAction(format!(
                        "action {} outside 0..{}",
                        s.actions[i], dims.action_dim
                    )));
                }
                obs.push(s.obs[i].clone());
                hist.push(s.hist[i].clone());
                picks.push(if s.active[i] { s.actions[i] } else { 0 });
                weights.push(if s.active[i] { adv * scale } else { 0.0 });
            }
        }
    }
    if topos.is_empty() {
        return Err(Error::Config("no steps to learn from".into()));
    }
    let o = tape.constant(Matrix::from_rows(&obs))?;
    let h = tape.constant(Matrix::from_rows(&hist))?;
    let f = protocol::forward(tape, actor, controller, dims, setting.mode, setting.threshold, &topos, o, h)?;
    let logp = tape.log_softmax_rows(f.actions)?;
    let chosen = tape.pick_cols(logp, Rc::new(picks))?;
    let w = tape.constant(Matrix::from_vec(weights.len(), 1, weights))?;
    let weighted = tape.mul(chosen, w)?;
    tape.sum(weighted)
}

/// One clipped Adam step of the policy-gradient surrogate over complete
/// episodes. Returns the surrogate before the step.
pub fn reinforce_update(
    nets: &mut Networks,
    episodes: &[Episode],
    setting: &Setting,
    hyper: &Hyper,
    baseline: Baseline,
) -> Result<f64> {
    if nets.dims.action != ActionKind::Discrete {
        return Err(Error::Config("REINFORCE needs a discrete action space".into()));
    }
    if episodes.is_empty() {
        return Err(Error::Config("no episodes to learn from".into()));
    }
    let returns: Vec<f64> = episodes.iter().map(|e| episode_return(&e.rewards(), hyper.gamma)).collect();
    let b = match baseline {
        Baseline::BatchMean => returns.iter().sum::<f64>() / returns.len() as f64,
        Baseline::Fixed(b) => b,
    };
    let advantages: Vec<f64> = returns.iter().map(|g| g - b).collect();
    let mut t = Tape::new();
    let obj = surrogate(
        &mut t,
        Bound::trainable(&nets.actor),
        &nets.controller,
        &nets.dims,
        episodes,
        &advantages,
        setting,
    )?;
    let value = t.value(obj).item();
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss("policy-gradient update"));
    }
    let loss = t.affine(obj, -1.0, 0.0)?;
    t.backward(loss)?;
    nets.actor.zero_grads();
    nets.actor.accumulate_grads(&t);
    nets.actor.adam_step(hyper.actor_lr, hyper.grad_clip)?;
    Ok(value)
}
