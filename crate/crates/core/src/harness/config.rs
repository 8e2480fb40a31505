//! Experiment configuration, stored as TOML.
//!
//! Every field has a default, so a config file only needs the keys it
//! changes. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::envs::{ActionSpace, Difficulty, EnvKind, EnvSpec};
use crate::error::{Error, Result};
use crate::learning::{Hyper, Setting};
use crate::neural::{ActionKind, NetDims};
use crate::protocol::{check_threshold, ProtocolMode};

/// Learning algorithm. `Auto` picks REINFORCE for the traffic junction and
/// DDPG for the particle worlds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trainer {
    #[default]
    Auto,
    Ddpg,
    Reinforce,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvSpec,
    pub mode: ProtocolMode,
    /// Communication range `L` (world units; cells for the junction).
    pub range: f64,
    /// Gate and labeling threshold `T`.
    pub threshold: f64,
    /// Bits per transmitted embedding (`w`).
    pub message_bits: u64,
    /// Width of histories, embeddings and hidden layers.
    pub hidden: usize,
    pub trainer: Trainer,
    pub hyper: Hyper,
    pub train_episodes: usize,
    pub eval_episodes: usize,
    /// Training episodes between evaluations; 0 evaluates only at the end.
    pub eval_interval: usize,
    /// Training episodes between checkpoints; 0 saves only the final one.
    pub checkpoint_interval: usize,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Write per-step traces of evaluation episodes.
    pub trace: bool,
}

impl Default for ExperimentConfig {
    /// Desk-scale cooperative navigation.
    fn default() -> Self {
        Self {
            env: EnvSpec::cooperative_navigation(3, 3),
            mode: ProtocolMode::Ac2c,
            range: 1.0,
            threshold: 0.3,
            message_bits: 128 * 32,
            hidden: 128,
            trainer: Trainer::Auto,
            hyper: Hyper::default(),
            train_episodes: 2000,
            eval_episodes: 200,
            eval_interval: 100,
            checkpoint_interval: 0,
            seeds: vec![0, 1, 2],
            output_dir: PathBuf::from("runs"),
            trace: false,
        }
    }
}

/// Names accepted by [`ExperimentConfig::set`].
pub const SETTABLE: [&str; 19] = [
    "env",
    "difficulty",
    "n_agents",
    "n_landmarks",
    "episode_length",
    "mode",
    "range",
    "threshold",
    "message_bits",
    "hidden",
    "trainer",
    "train_episodes",
    "eval_episodes",
    "eval_interval",
    "checkpoint_interval",
    "seeds",
    "batch_size",
    "update_every",
    "output_dir",
];

fn parse<T: std::str::FromStr>(name: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{name}`")))
}

impl ExperimentConfig {
    /// Published-scale settings for `kind` (10 agents, or the junction's
    /// full car count, hidden width 128, 2000 training episodes, five seeds).
    pub fn table_scale(kind: EnvKind) -> Self {
        let env = EnvSpec::default_for(kind);
        let threshold = if kind == EnvKind::TrafficJunction { 0.15 } else { 0.3 };
        let range = if kind == EnvKind::TrafficJunction { 3.0 } else { 1.0 };
        Self {
            env,
            threshold,
            range,
            seeds: vec![0, 1, 2, 3, 4],
            ..Self::default()
        }
    }

    /// Desk-scale defaults for `kind`.
    pub fn desk_scale(kind: EnvKind) -> Self {
        match kind {
            EnvKind::CooperativeNavigation => Self::default(),
            EnvKind::PredatorPrey => Self {
                env: EnvSpec::predator_prey(3, 3),
                ..Self::default()
            },
            EnvKind::TrafficJunction => Self {
                env: EnvSpec::traffic_junction(Difficulty::Medium),
                threshold: 0.15,
                range: 3.0,
                ..Self::default()
            },
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("bad config: {e}")))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_toml_string()?).map_err(|e| Error::io(path, e))
    }

    /// Overrides one field from its textual value.
    pub fn set(&mut self, name: &str, value: &str) -> Result<()> {
        match name {
            "env" => {
                let kind: EnvKind = value.trim().parse()?;
                let keep = (self.range, self.threshold);
                let fresh = Self::desk_scale(kind);
                self.env = fresh.env;
                if kind == EnvKind::TrafficJunction {
                    (self.range, self.threshold) = (fresh.range, fresh.threshold);
                } else {
                    (self.range, self.threshold) = keep;
                }
            }
            "difficulty" => {
                self.env.difficulty = match value.trim() {
                    "medium" => Difficulty::Medium,
                    "hard" => Difficulty::Hard,
                    _ => return Err(Error::Config(format!("unknown difficulty `{value}`"))),
                };
                if self.env.kind == EnvKind::TrafficJunction {
                    self.env = EnvSpec::traffic_junction(self.env.difficulty);
                }
            }
            "n_agents" => self.env.n_agents = parse(name, value)?,
            "n_landmarks" => self.env.n_landmarks = parse(name, value)?,
            "episode_length" => self.env.episode_length = parse(name, value)?,
            "mode" => self.mode = value.trim().parse()?,
            "range" | "L" => self.range = parse(name, value)?,
            "threshold" | "T" => self.threshold = parse(name, value)?,
            "message_bits" => self.message_bits = parse(name, value)?,
            "hidden" => self.hidden = parse(name, value)?,
            "trainer" => {
                self.trainer = match value.trim() {
                    "auto" => Trainer::Auto,
                    "ddpg" => Trainer::Ddpg,
                    "reinforce" => Trainer::Reinforce,
                    _ => return Err(Error::Config(format!("unknown trainer `{value}`"))),
                }
            }
            "train_episodes" => self.train_episodes = parse(name, value)?,
            "eval_episodes" => self.eval_episodes = parse(name, value)?,
            "eval_interval" => self.eval_interval = parse(name, value)?,
            "checkpoint_interval" => self.checkpoint_interval = parse(name, value)?,
            "seeds" => {
                self.seeds = value
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| parse(name, s))
                    .collect::<Result<_>>()?
            }
            "batch_size" => self.hyper.batch_size = parse(name, value)?,
            "update_every" => self.hyper.update_every = parse(name, value)?,
            "output_dir" => self.output_dir = PathBuf::from(value),
            _ => {
                return Err(Error::Config(format!(
                    "unknown parameter `{name}` (valid: {})",
                    SETTABLE.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// The trainer that will actually run.
    pub fn resolved_trainer(&self) -> Result<Trainer> {
        let natural = match self.env.action_space() {
            ActionSpace::Discrete(_) => Trainer::Reinforce,
            ActionSpace::Continuous(_) => Trainer::Ddpg,
        };
        match self.trainer {
            Trainer::Auto => Ok(natural),
            t if t == natural => Ok(t),
            t => Err(Error::Config(format!("{t:?} cannot train {}", self.env.kind))),
        }
    }

    /// Hard errors for invalid settings; returns warnings for unusual but
    /// legal ones.
    pub fn validate(&self) -> Result<Vec<String>> {
        self.env.validate()?;
        self.hyper.validate()?;
        check_threshold(self.mode, self.threshold)?;
        self.resolved_trainer()?;
        if !(self.range > 0.0 && self.range.is_finite()) {
            return Err(Error::Config(format!("range must be positive, got {}", self.range)));
        }
        if self.hidden == 0 {
            return Err(Error::Config("hidden width must be at least 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        let mut warnings = Vec::new();
        if self.mode == ProtocolMode::Ac2c {
            let (lo, hi) = match self.env.kind {
                EnvKind::TrafficJunction => (0.1, 0.2),
                _ => (0.1, 0.6),
            };
            if self.threshold < lo || self.threshold > hi {
                warnings.push(format!(
                    "threshold {} is outside the usual {lo}..={hi} for {}",
                    self.threshold, self.env.kind
                ));
            }
        }
        Ok(warnings)
    }

    pub fn net_dims(&self) -> NetDims {
        let space = self.env.action_space();
        NetDims {
            obs_dim: self.env.obs_dim(),
            hidden: self.hidden,
            action_dim: space.dim(),
            action: match space {
                ActionSpace::Discrete(_) => ActionKind::Discrete,
                ActionSpace::Continuous(_) => ActionKind::Continuous,
            },
            n_agents: self.env.n_agents,
        }
    }

    pub fn setting(&self) -> Setting {
        Setting {
            mode: self.mode,
            threshold: self.threshold,
            range: self.range,
        }
    }
}
