//! Benchmark environments: cooperative navigation, predator-prey and the
//! traffic junction gridworld.
//!
//! All environments share one team reward per step and expose agent
//! positions (and activity, for the junction) so communication topologies
//! can be rebuilt every step.

mod particle;
mod trace;
mod traffic;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use particle::{crowding_penalty, detection_reward, team_reward, ParticleWorld, DAMPING, DT};
pub use trace::{read_trace, TraceRecord, TraceWriter};
pub use traffic::{Difficulty, JunctionLayout, TrafficJunction, BRAKE, GAS};

use crate::commgraph::Point;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvKind {
    TrafficJunction,
    CooperativeNavigation,
    PredatorPrey,
}

impl EnvKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EnvKind::TrafficJunction => "traffic_junction",
            EnvKind::CooperativeNavigation => "cooperative_navigation",
            EnvKind::PredatorPrey => "predator_prey",
        }
    }
}

impl fmt::Display for EnvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EnvKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "traffic_junction" | "tj" => Ok(EnvKind::TrafficJunction),
            "cooperative_navigation" | "cn" => Ok(EnvKind::CooperativeNavigation),
            "predator_prey" | "pp" => Ok(EnvKind::PredatorPrey),
            _ => Err(Error::Config(format!(
                "unknown environment `{s}` (expected traffic_junction, cooperative_navigation or predator_prey)"
            ))),
        }
    }
}

/// Environment description. For the traffic junction, `n_agents` is the
/// number of car slots and must equal the difficulty's car limit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSpec {
    pub kind: EnvKind,
    pub n_agents: usize,
    /// Landmarks (navigation) or preys (predator-prey); unused by the
    /// junction.
    #[serde(default)]
    pub n_landmarks: usize,
    pub episode_length: usize,
    #[serde(default)]
    pub difficulty: Difficulty,
    /// Navigation only: landmarks keep one layout, drawn from
    /// `layout_seed`, across all episodes; otherwise they are redrawn at
    /// every reset like the agents.
    #[serde(default = "yes")]
    pub fixed_landmarks: bool,
    #[serde(default)]
    pub layout_seed: u64,
}

fn yes() -> bool {
    true
}

impl EnvSpec {
    pub fn cooperative_navigation(n_agents: usize, n_landmarks: usize) -> Self {
        Self {
            kind: EnvKind::CooperativeNavigation,
            n_agents,
            n_landmarks,
            episode_length: 50,
            difficulty: Difficulty::Medium,
            fixed_landmarks: true,
            layout_seed: 0,
        }
    }

    pub fn predator_prey(n_predators: usize, n_preys: usize) -> Self {
        Self {
            kind: EnvKind::PredatorPrey,
            n_agents: n_predators,
            n_landmarks: n_preys,
            episode_length: 50,
            difficulty: Difficulty::Medium,
            fixed_landmarks: true,
            layout_seed: 0,
        }
    }

    pub fn traffic_junction(difficulty: Difficulty) -> Self {
        let layout = JunctionLayout::new(difficulty);
        Self {
            kind: EnvKind::TrafficJunction,
            n_agents: layout.max_agents,
            n_landmarks: 0,
            episode_length: match difficulty {
                Difficulty::Medium => 60,
                Difficulty::Hard => 80,
            },
            difficulty,
            fixed_landmarks: true,
            layout_seed: 0,
        }
    }

    /// Default description for `kind` at its published scale.
    pub fn default_for(kind: EnvKind) -> Self {
        match kind {
            EnvKind::CooperativeNavigation => Self::cooperative_navigation(10, 10),
            EnvKind::PredatorPrey => Self::predator_prey(10, 10),
            EnvKind::TrafficJunction => Self::traffic_junction(Difficulty::Medium),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_agents == 0 || self.episode_length == 0 {
            return Err(Error::Config("environment needs at least one agent and one step".into()));
        }
        match self.kind {
            EnvKind::TrafficJunction => {
                let max = JunctionLayout::new(self.difficulty).max_agents;
                if self.n_agents != max {
                    return Err(Error::Config(format!(
                        "{:?} traffic junction has {max} car slots, got n_agents = {}",
                        self.difficulty, self.n_agents
                    )));
                }
            }
            _ if self.n_landmarks == 0 => {
                return Err(Error::Config(format!("{} needs at least one landmark/prey", self.kind)));
            }
            _ => {}
        }
        Ok(())
    }

    pub fn obs_dim(&self) -> usize {
        match self.kind {
            EnvKind::CooperativeNavigation => 4 + 2 * self.n_landmarks + 2 * 2,
            EnvKind::PredatorPrey => 4 + 2 * 3 + 2 * 3,
            EnvKind::TrafficJunction => TrafficJunction::obs_dim_for(self.difficulty),
        }
    }

    pub fn action_space(&self) -> ActionSpace {
        match self.kind {
            EnvKind::TrafficJunction => ActionSpace::Discrete(2),
            _ => ActionSpace::Continuous(2),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActionSpace {
    Discrete(usize),
    Continuous(usize),
}

impl ActionSpace {
    /// Width of the policy output.
    pub fn dim(self) -> usize {
        match self {
            ActionSpace::Discrete(n) | ActionSpace::Continuous(n) => n,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Action {
    Discrete(usize),
    Continuous(Vec<f64>),
}

/// Outcome of one environment step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub obs: Vec<Vec<f64>>,
    /// Team reward, identical for every agent.
    pub reward: f64,
    pub done: bool,
    /// Agents involved in a collision this step.
    pub collisions: usize,
}

/// Any of the benchmark environments.
#[derive(Clone, Debug)]
pub enum Env {
    Particle(ParticleWorld),
    Traffic(TrafficJunction),
}

impl Env {
    pub fn new(spec: &EnvSpec) -> Result<Self> {
        spec.validate()?;
        Ok(match spec.kind {
            EnvKind::TrafficJunction => Env::Traffic(TrafficJunction::new(spec.difficulty, spec.episode_length)),
            _ => Env::Particle(ParticleWorld::new(spec)?),
        })
    }

    pub fn kind(&self) -> EnvKind {
        match self {
            Env::Particle(p) => p.kind(),
            Env::Traffic(_) => EnvKind::TrafficJunction,
        }
    }

    /// Starts a new episode; deterministic in `seed`.
    pub fn reset(&mut self, seed: u64) -> Vec<Vec<f64>> {
        match self {
            Env::Particle(p) => p.reset(seed),
            Env::Traffic(t) => t.reset(seed),
        }
    }

    pub fn step(&mut self, actions: &[Action]) -> Result<StepResult> {
        match self {
            Env::Particle(p) => p.step(actions),
            Env::Traffic(t) => t.step(actions),
        }
    }

    pub fn observe(&self, agent: usize) -> Vec<f64> {
        match self {
            Env::Particle(p) => p.observe(agent),
            Env::Traffic(t) => t.observe(agent),
        }
    }

    pub fn observations(&self) -> Vec<Vec<f64>> {
        (0..self.n_agents()).map(|i| self.observe(i)).collect()
    }

    pub fn n_agents(&self) -> usize {
        match self {
            Env::Particle(p) => p.n_agents(),
            Env::Traffic(t) => t.layout().max_agents,
        }
    }

    pub fn positions(&self) -> Vec<Point> {
        match self {
            Env::Particle(p) => p.positions().to_vec(),
            Env::Traffic(t) => t.positions(),
        }
    }

    pub fn active(&self) -> Vec<bool> {
        match self {
            Env::Particle(p) => vec![true; p.n_agents()],
            Env::Traffic(t) => t.active(),
        }
    }

    /// Identity of the agent in each slot (`None` for an empty slot).
    pub fn occupants(&self) -> Vec<Option<u64>> {
        match self {
            Env::Particle(p) => (0..p.n_agents() as u64).map(Some).collect(),
            Env::Traffic(t) => t.occupants(),
        }
    }

    pub fn episode_length(&self) -> usize {
        match self {
            Env::Particle(p) => p.episode_length(),
            Env::Traffic(t) => t.episode_length(),
        }
    }
}

/// Per-step collision counts of a finished episode.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeOutcome {
    pub kind: EnvKind,
    pub collisions: Vec<usize>,
}

/// Junction episodes succeed when no collision ever occurred.
pub fn success(outcome: &EpisodeOutcome) -> Result<bool> {
    if outcome.kind != EnvKind::TrafficJunction {
        return Err(Error::Config(format!("success is only defined for traffic_junction, not {}", outcome.kind)));
    }
    Ok(outcome.collisions.iter().all(|&c| c == 0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn success_rule() {
        let o = |c: Vec<usize>| EpisodeOutcome { kind: EnvKind::TrafficJunction, collisions: c };
        assert!(success(&o(vec![0, 0, 0])).unwrap());
        assert!(!success(&o(vec![0, 2, 0])).unwrap());
        assert!(success(&o(vec![])).unwrap());
        let cn = EpisodeOutcome { kind: EnvKind::CooperativeNavigation, collisions: vec![] };
        assert_eq!(success(&cn).unwrap_err().kind(), "config");
    }

    #[test]
    fn spec_defaults() {
        let cn = EnvSpec::default_for(EnvKind::CooperativeNavigation);
        assert_eq!(cn.obs_dim(), 2 + 2 + 2 * 10 + 2 * 2);
        assert_eq!(cn.episode_length, 50);
        let tj = EnvSpec::traffic_junction(Difficulty::Hard);
        assert_eq!((tj.n_agents, tj.episode_length), (20, 80));
        assert_eq!(tj.action_space(), ActionSpace::Discrete(2));
        let bad = EnvSpec { n_agents: 5, ..tj };
        assert!(bad.validate().is_err());
        assert_eq!("pp".parse::<EnvKind>().unwrap(), EnvKind::PredatorPrey);
    }
}
