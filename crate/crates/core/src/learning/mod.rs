//! Training: centralized critic with deterministic policy gradients,
//! REINFORCE with a return baseline, and the self-supervised gating
//! controller.

mod controller;
mod ddpg;
mod reinforce;
mod replay;
mod target;

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use controller::{controller_labels, controller_update, LabelPass};
pub use ddpg::{actor_update_ddpg, critic_update, td_targets};
pub use reinforce::{episode_return, reinforce_update, Baseline, Episode, EpisodeStep};
pub use replay::{Batch, ReplayBuffer, Transition};
pub use target::{soft_update, TargetNets};

use crate::diffmath::ParamStore;
use crate::error::{Error, Result};
use crate::neural::{init_actor, init_controller, init_critic, NetDims};
use crate::protocol::ProtocolMode;

/// Optimizer and schedule settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyper {
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub controller_lr: f64,
    pub grad_clip: f64,
    pub gamma: f64,
    pub tau: f64,
    pub hard_update_period: u64,
    pub batch_size: usize,
    pub replay_capacity: usize,
    /// Environment steps between update cycles.
    pub update_every: usize,
    pub noise_sigma: f64,
    /// Per-episode multiplicative decay of the exploration noise.
    pub noise_decay: f64,
    pub noise_min: f64,
    /// Episodes per REINFORCE update.
    pub episodes_per_update: usize,
    /// Weight of the mean squared pre-`tanh` actor output added to the
    /// DDPG actor loss; keeps continuous actions out of saturation.
    pub action_reg: f64,
}

impl Default for Hyper {
    fn default() -> Self {
        Self {
            actor_lr: 1e-4,
            critic_lr: 1e-4,
            controller_lr: 1e-4,
            grad_clip: 0.1,
            gamma: 0.99,
            tau: 0.01,
            hard_update_period: 200,
            batch_size: 128,
            replay_capacity: 1_000_000,
            update_every: 1,
            noise_sigma: 0.1,
            noise_decay: 0.999,
            noise_min: 0.01,
            episodes_per_update: 8,
            action_reg: 1e-3,
        }
    }
}

impl Hyper {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("actor_lr", self.actor_lr),
            ("critic_lr", self.critic_lr),
            ("controller_lr", self.controller_lr),
            ("grad_clip", self.grad_clip),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.action_reg >= 0.0 && self.action_reg.is_finite()) {
            return Err(Error::Config(format!("action_reg must be non-negative, got {}", self.action_reg)));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma must lie in [0, 1), got {}", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(Error::Config(format!("tau must lie in [0, 1], got {}", self.tau)));
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("replay_capacity", self.replay_capacity),
            ("update_every", self.update_every),
            ("episodes_per_update", self.episodes_per_update),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.replay_capacity < self.batch_size {
            return Err(Error::Config("replay_capacity is smaller than batch_size".into()));
        }
        Ok(())
    }
}

/// Which protocol the networks run under while training.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Setting {
    pub mode: ProtocolMode,
    pub threshold: f64,
    pub range: f64,
}

/// All trainable stores of one run.
#[derive(Clone, Debug)]
pub struct Networks {
    pub dims: NetDims,
    pub actor: ParamStore,
    pub controller: ParamStore,
    pub critic: ParamStore,
    pub targets: TargetNets,
}

const FILES: [&str; 5] = ["actor", "controller", "critic", "target_actor", "target_critic"];

impl Networks {
    pub fn new<R: Rng>(dims: NetDims, rng: &mut R) -> Result<Self> {
        let actor = init_actor(&dims, rng)?;
        let controller = init_controller(&dims, rng)?;
        let critic = init_critic(&dims, rng)?;
        let targets = TargetNets::new(&actor, &critic);
        Ok(Self { dims, actor, controller, critic, targets })
    }

    fn stores(&self) -> [&ParamStore; 5] {
        [&self.actor, &self.controller, &self.critic, &self.targets.actor, &self.targets.critic]
    }

    /// Writes one checkpoint file per store into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, store) in FILES.iter().zip(self.stores()) {
            store.save(dir.join(format!("{name}.params")))?;
        }
        std::fs::write(dir.join("target_updates"), self.targets.updates.to_string())
            .map_err(|e| Error::io(dir.join("target_updates"), e))
    }

    /// Loads a checkpoint directory and checks it against `dims`.
    pub fn load(dir: impl AsRef<Path>, dims: NetDims) -> Result<Self> {
        let dir = dir.as_ref();
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let reference = Self::new(dims.clone(), &mut rng)?;
        let mut loaded = Vec::with_capacity(FILES.len());
        for (name, expected) in FILES.iter().zip(reference.stores()) {
            let s = ParamStore::load(dir.join(format!("{name}.params")))?;
            if !s.same_layout(expected) {
                return Err(Error::Checkpoint(format!(
                    "`{name}` does not match the configured network dimensions"
                )));
            }
            loaded.push(s);
        }
        let updates_path = dir.join("target_updates");
        let updates = match std::fs::read_to_string(&updates_path) {
            Ok(text) => text
                .trim()
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad target update count `{}`", text.trim())))?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => 0,
            Err(e) => return Err(Error::io(updates_path, e)),
        };
        let mut it = loaded.into_iter();
        let mut next = || it.next().expect("five stores");
        let (actor, controller, critic, t_actor, t_critic) = (next(), next(), next(), next(), next());
        Ok(Self {
            dims,
            actor,
            controller,
            critic,
            targets: TargetNets { actor: t_actor, critic: t_critic, updates },
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::ActionKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn default_hyper_matches_published_table() {
        let h = Hyper::default();
        assert_eq!((h.actor_lr, h.critic_lr, h.grad_clip, h.gamma), (1e-4, 1e-4, 0.1, 0.99));
        assert_eq!((h.tau, h.hard_update_period), (0.01, 200));
        assert!(h.validate().is_ok());
        let bad = Hyper { gamma: 1.0, ..Hyper::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn checkpoint_directory_round_trip() {
        let dims = NetDims { obs_dim: 3, hidden: 4, action_dim: 2, action: ActionKind::Continuous, n_agents: 2 };
        let nets = Networks::new(dims.clone(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        nets.save(dir.path()).unwrap();
        let back = Networks::load(dir.path(), dims.clone()).unwrap();
        assert_eq!(back.actor, nets.actor);
        assert_eq!(back.targets.critic, nets.targets.critic);

        let other = NetDims { hidden: 5, ..dims };
        assert_eq!(Networks::load(dir.path(), other).unwrap_err().kind(), "checkpoint");
    }
}
