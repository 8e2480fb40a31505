//! Continuous 2-D particle worlds: cooperative navigation (agents cover
//! landmarks) and predator-prey (predators chase scripted, faster preys).
//!
//! Agents are force-controlled point masses with velocity damping inside
//! the box `[-1, 1]²`. Observed positions of other entities are relative
//! to the observing agent.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Action, EnvKind, EnvSpec, StepResult};
use crate::commgraph::Point;
use crate::error::{Error, Result};

pub const DT: f64 = 0.1;
pub const DAMPING: f64 = 0.25;
const BOX: f64 = 1.0;

const NAV_ACCEL: f64 = 5.0;
const PREDATOR_ACCEL: f64 = 3.0;
const PREDATOR_MAX_SPEED: f64 = 1.0;
const PREY_ACCEL: f64 = 4.0;
const PREY_MAX_SPEED: f64 = 1.3 * PREDATOR_MAX_SPEED;

const TIER_NEAR: f64 = 0.1;
const TIER_FAR: f64 = 0.2;
const CROWDING: f64 = 0.5;

/// Reward for an agent whose nearest landmark is `d` away: +1 below 0.1,
/// +0.5 below 0.2 (tiers are exclusive), else 0.
pub fn detection_reward(d: f64) -> f64 {
    if d < TIER_NEAR {
        1.0
    } else if d < TIER_FAR {
        0.5
    } else {
        0.0
    }
}

/// Penalty received by each agent of a pair `d` apart.
pub fn crowding_penalty(d: f64) -> f64 {
    if d < CROWDING {
        -0.25
    } else {
        0.0
    }
}

fn dist(a: Point, b: Point) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Team reward: `0.01 · (−Σ_landmarks distance to closest agent)` plus
/// every agent's detection reward plus every pair's crowding penalties.
/// Returns the reward and the number of agents in at least one crowded
/// pair.
pub fn team_reward(agents: &[Point], landmarks: &[Point]) -> (f64, usize) {
    let coverage: f64 = landmarks
        .iter()
        .map(|&l| agents.iter().map(|&a| dist(a, l)).fold(f64::INFINITY, f64::min))
        .sum();
    let mut reward = -0.01 * coverage;
    for &a in agents {
        let nearest = landmarks.iter().map(|&l| dist(a, l)).fold(f64::INFINITY, f64::min);
        reward += detection_reward(nearest);
    }
    let mut crowded = vec![false; agents.len()];
    for i in 0..agents.len() {
        for j in i + 1..agents.len() {
            let p = crowding_penalty(dist(agents[i], agents[j]));
            if p != 0.0 {
                reward += 2.0 * p;
                crowded[i] = true;
                crowded[j] = true;
            }
        }
    }
    (reward, crowded.iter().filter(|&&c| c).count())
}

/// Indices of the `k` entities closest to `from`, ties broken by index.
fn closest(from: Point, others: &[Point], skip: Option<usize>, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..others.len()).filter(|&j| Some(j) != skip).collect();
    idx.sort_by(|&a, &b| dist(from, others[a]).total_cmp(&dist(from, others[b])).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn integrate(pos: &mut Point, vel: &mut [f64; 2], force: [f64; 2], max_speed: Option<f64>) {
    for d in 0..2 {
        vel[d] = vel[d] * (1.0 - DAMPING) + force[d] * DT;
    }
    if let Some(max) = max_speed {
        let speed = (vel[0] * vel[0] + vel[1] * vel[1]).sqrt();
        if speed > max {
            vel[0] *= max / speed;
            vel[1] *= max / speed;
        }
    }
    for d in 0..2 {
        pos[d] += vel[d] * DT;
        if pos[d].abs() > BOX {
            pos[d] = pos[d].clamp(-BOX, BOX);
            vel[d] = 0.0;
        }
    }
}

#[derive(Clone, Debug)]
pub struct ParticleWorld {
    kind: EnvKind,
    episode_length: usize,
    t: usize,
    pos: Vec<Point>,
    vel: Vec<[f64; 2]>,
    /// Landmarks or preys.
    targets: Vec<Point>,
    target_vel: Vec<[f64; 2]>,
    /// Landmark layout shared by every episode, when fixed.
    layout: Option<Vec<Point>>,
    rng: ChaCha8Rng,
}

fn draw_targets(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point> {
    (0..n).map(|_| [rng.gen_range(-0.9..0.9), rng.gen_range(-0.9..0.9)]).collect()
}

impl ParticleWorld {
    pub fn new(spec: &EnvSpec) -> Result<Self> {
        if spec.kind == EnvKind::TrafficJunction {
            return Err(Error::Config("traffic_junction is not a particle world".into()));
        }
        let mut w = Self {
            kind: spec.kind,
            episode_length: spec.episode_length,
            t: 0,
            pos: vec![[0.0; 2]; spec.n_agents],
            vel: vec![[0.0; 2]; spec.n_agents],
            targets: vec![[0.0; 2]; spec.n_landmarks],
            target_vel: vec![[0.0; 2]; spec.n_landmarks],
            layout: (spec.kind == EnvKind::CooperativeNavigation && spec.fixed_landmarks)
                .then(|| draw_targets(&mut ChaCha8Rng::seed_from_u64(spec.layout_seed), spec.n_landmarks)),
            rng: ChaCha8Rng::seed_from_u64(0),
        };
        w.reset(0);
        Ok(w)
    }

    pub fn kind(&self) -> EnvKind {
        self.kind
    }

    pub fn n_agents(&self) -> usize {
        self.pos.len()
    }

    pub fn episode_length(&self) -> usize {
        self.episode_length
    }

    pub fn positions(&self) -> &[Point] {
        &self.pos
    }

    pub fn velocities(&self) -> &[[f64; 2]] {
        &self.vel
    }

    /// Landmark (navigation) or prey (predator-prey) positions.
    pub fn targets(&self) -> &[Point] {
        &self.targets
    }

    /// Places entities directly; velocities are zeroed. Used to script
    /// scenarios.
    pub fn set_layout(&mut self, agents: &[Point], targets: &[Point]) -> Result<()> {
        if agents.len() != self.pos.len() || targets.len() != self.targets.len() {
            return Err(Error::Dimension("layout does not match entity counts".into()));
        }
        self.pos = agents.to_vec();
        self.targets = targets.to_vec();
        self.vel.iter_mut().chain(self.target_vel.iter_mut()).for_each(|v| *v = [0.0; 2]);
        Ok(())
    }

    pub fn reset(&mut self, seed: u64) -> Vec<Vec<f64>> {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.t = 0;
        for p in self.pos.iter_mut() {
            *p = [self.rng.gen_range(-BOX..BOX), self.rng.gen_range(-BOX..BOX)];
        }
        self.targets = match &self.layout {
            Some(l) => l.clone(),
            None => draw_targets(&mut self.rng, self.targets.len()),
        };
        self.vel.iter_mut().chain(self.target_vel.iter_mut()).for_each(|v| *v = [0.0; 2]);
        (0..self.n_agents()).map(|i| self.observe(i)).collect()
    }

    fn rel(&self, i: usize, p: Point) -> [f64; 2] {
        [p[0] - self.pos[i][0], p[1] - self.pos[i][1]]
    }

    pub fn observe(&self, i: usize) -> Vec<f64> {
        let me = self.pos[i];
        let mut o = vec![me[0], me[1], self.vel[i][0], self.vel[i][1]];
        let push_closest = |o: &mut Vec<f64>, idx: Vec<usize>, from: &[Point], k: usize| {
            for &j in &idx {
                o.extend(self.rel(i, from[j]));
            }
            o.extend(std::iter::repeat_n(0.0, 2 * (k - idx.len())));
        };
        match self.kind {
            EnvKind::CooperativeNavigation => {
                for &l in &self.targets {
                    o.extend(self.rel(i, l));
                }
                push_closest(&mut o, closest(me, &self.pos, Some(i), 2), &self.pos, 2);
            }
            _ => {
                push_closest(&mut o, closest(me, &self.targets, None, 3), &self.targets, 3);
                push_closest(&mut o, closest(me, &self.pos, Some(i), 3), &self.pos, 3);
            }
        }
        o
    }

    fn parse(&self, actions: &[Action]) -> Result<Vec<[f64; 2]>> {
        if actions.len() != self.n_agents() {
            return Err(Error::InvalidAction(format!(
                "expected {} actions, got {}",
                self.n_agents(),
                actions.len()
            )));
        }
        actions
            .iter()
            .map(|a| match a {
                Action::Continuous(v) if v.len() == 2 && v.iter().all(|x| x.is_finite()) => {
                    Ok([v[0].clamp(-1.0, 1.0), v[1].clamp(-1.0, 1.0)])
                }
                other => Err(Error::InvalidAction(format!("expected a finite 2-D force, got {other:?}"))),
            })
            .collect()
    }

    /// Applies one force per agent (components clamped to `[-1, 1]`).
    pub fn step(&mut self, actions: &[Action]) -> Result<StepResult> {
        let forces = self.parse(actions)?;
        let (accel, max_speed) = match self.kind {
            EnvKind::CooperativeNavigation => (NAV_ACCEL, None),
            _ => (PREDATOR_ACCEL, Some(PREDATOR_MAX_SPEED)),
        };
        if self.kind == EnvKind::PredatorPrey {
            // preys react to the predators' pre-step positions
            for k in 0..self.targets.len() {
                let prey = self.targets[k];
                let force = match closest(prey, &self.pos, None, 1).first() {
                    Some(&j) => {
                        let away = [prey[0] - self.pos[j][0], prey[1] - self.pos[j][1]];
                        let n = (away[0] * away[0] + away[1] * away[1]).sqrt();
                        if n > 0.0 {
                            [PREY_ACCEL * away[0] / n, PREY_ACCEL * away[1] / n]
                        } else {
                            [0.0, 0.0]
                        }
                    }
                    None => [0.0, 0.0],
                };
                integrate(&mut self.targets[k], &mut self.target_vel[k], force, Some(PREY_MAX_SPEED));
            }
        }
        for (i, f) in forces.iter().enumerate() {
            integrate(&mut self.pos[i], &mut self.vel[i], [accel * f[0], accel * f[1]], max_speed);
        }
        self.t += 1;
        let (reward, collisions) = team_reward(&self.pos, &self.targets);
        Ok(StepResult {
            obs: (0..self.n_agents()).map(|i| self.observe(i)).collect(),
            reward,
            done: self.t >= self.episode_length,
            collisions,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiers_are_exclusive() {
        assert_eq!(detection_reward(0.05), 1.0);
        assert_eq!(detection_reward(0.15), 0.5);
        assert_eq!(detection_reward(0.4), 0.0);
        assert_eq!(detection_reward(0.1), 0.5);
        assert_eq!(crowding_penalty(0.4), -0.25);
        assert_eq!(crowding_penalty(0.5), 0.0);
    }

    #[test]
    fn observation_widths() {
        let mut cn = ParticleWorld::new(&EnvSpec::cooperative_navigation(10, 10)).unwrap();
        assert!(cn.reset(3).iter().all(|o| o.len() == 28));
        let mut pp = ParticleWorld::new(&EnvSpec::predator_prey(4, 2)).unwrap();
        let obs = pp.reset(3);
        assert!(obs.iter().all(|o| o.len() == 16));
        // only two preys: third prey slot is zero padding
        assert_eq!(&obs[0][8..10], &[0.0, 0.0]);
    }

    #[test]
    fn predator_sees_all_three_peers() {
        let mut pp = ParticleWorld::new(&EnvSpec::predator_prey(4, 3)).unwrap();
        let agents = [[0.0, 0.0], [0.5, 0.0], [0.0, -0.2], [0.9, 0.9]];
        pp.set_layout(&agents, &[[0.1, 0.1], [0.2, 0.2], [0.3, 0.3]]).unwrap();
        let o = pp.observe(0);
        // sorted by distance: agent 2, agent 1, agent 3
        assert_eq!(&o[10..16], &[0.0, -0.2, 0.5, 0.0, 0.9, 0.9]);
    }

    #[test]
    fn landmarks_stay_fixed_unless_configured_otherwise() {
        let spec = EnvSpec::cooperative_navigation(3, 3);
        let mut w = ParticleWorld::new(&spec).unwrap();
        w.reset(1);
        let (agents, landmarks) = (w.positions().to_vec(), w.targets().to_vec());
        w.reset(2);
        assert_ne!(w.positions(), &agents[..]);
        assert_eq!(w.targets(), &landmarks[..]);

        let mut other = ParticleWorld::new(&EnvSpec { layout_seed: 9, ..spec.clone() }).unwrap();
        other.reset(1);
        assert_eq!(other.positions(), &agents[..]);
        assert_ne!(other.targets(), &landmarks[..]);

        let mut moving = ParticleWorld::new(&EnvSpec { fixed_landmarks: false, ..spec }).unwrap();
        moving.reset(1);
        let first = moving.targets().to_vec();
        moving.reset(2);
        assert_ne!(moving.targets(), &first[..]);

        // preys always start from fresh positions
        let mut pp = ParticleWorld::new(&EnvSpec::predator_prey(3, 2)).unwrap();
        pp.reset(1);
        let first = pp.targets().to_vec();
        pp.reset(2);
        assert_ne!(pp.targets(), &first[..]);
    }

    #[test]
    fn reset_is_deterministic() {
        let spec = EnvSpec::cooperative_navigation(3, 3);
        let mut a = ParticleWorld::new(&spec).unwrap();
        let mut b = ParticleWorld::new(&spec).unwrap();
        assert_eq!(a.reset(11), b.reset(11));
        assert_ne!(a.reset(11), b.reset(12));
    }

    #[test]
    fn walls_stop_motion() {
        let mut w = ParticleWorld::new(&EnvSpec::cooperative_navigation(1, 1)).unwrap();
        w.set_layout(&[[0.99, 0.0]], &[[0.0, 0.0]]).unwrap();
        for _ in 0..5 {
            w.step(&[Action::Continuous(vec![1.0, 0.0])]).unwrap();
        }
        assert_eq!(w.positions()[0][0], 1.0);
        assert_eq!(w.velocities()[0][0], 0.0);
    }

    #[test]
    fn invalid_actions_rejected() {
        let mut w = ParticleWorld::new(&EnvSpec::cooperative_navigation(2, 2)).unwrap();
        assert!(w.step(&[Action::Discrete(0), Action::Continuous(vec![0.0, 0.0])]).is_err());
        assert!(w.step(&[Action::Continuous(vec![f64::NAN, 0.0]), Action::Continuous(vec![0.0, 0.0])]).is_err());
        assert!(w.step(&[Action::Continuous(vec![0.0, 0.0])]).is_err());
    }

    #[test]
    fn preys_outrun_predators() {
        let mut w = ParticleWorld::new(&EnvSpec::predator_prey(1, 1)).unwrap();
        w.set_layout(&[[-0.9, 0.0]], &[[-0.6, 0.0]]).unwrap();
        for _ in 0..10 {
            w.step(&[Action::Continuous(vec![1.0, 0.0])]).unwrap();
        }
        assert!(w.targets()[0][0] - w.positions()[0][0] > 0.3);
    }

    #[test]
    fn episode_ends_on_length() {
        let mut w = ParticleWorld::new(&EnvSpec::cooperative_navigation(1, 1)).unwrap();
        w.reset(0);
        let mut done = false;
        for _ in 0..50 {
            done = w.step(&[Action::Continuous(vec![0.0, 0.0])]).unwrap().done;
        }
        assert!(done);
    }
}
