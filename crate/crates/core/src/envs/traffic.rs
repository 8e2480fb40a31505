//! Traffic junction gridworld.
//!
//! Two-lane roads cross a square grid; every lane is a one-way route from
//! one border to the opposite one. Cars appear at route starts, choose
//! gas (advance one cell) or brake (stay) each step and leave the grid at
//! the route end. Cars see only themselves; anything about other cars must
//! come through communication.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Action, StepResult};
use crate::commgraph::Point;
use crate::error::{Error, Result};

pub const BRAKE: usize = 0;
pub const GAS: usize = 1;

const TIME_PENALTY: f64 = -0.01;
const COLLISION_PENALTY: f64 = -20.0;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    #[default]
    Medium,
    Hard,
}

/// Grid geometry and traffic settings of one difficulty.
#[derive(Clone, Debug, PartialEq)]
pub struct JunctionLayout {
    pub difficulty: Difficulty,
    pub dim: usize,
    /// Cells `(row, col)` of each route in driving order.
    pub routes: Vec<Vec<(usize, usize)>>,
    pub max_agents: usize,
    pub p_arrive: f64,
    /// Lane endpoints on the border (two per route).
    pub entries: usize,
    pub junctions: usize,
}

impl JunctionLayout {
    pub fn new(difficulty: Difficulty) -> Self {
        let (dim, roads, max_agents): (usize, &[usize], usize) = match difficulty {
            Difficulty::Medium => (6, &[2], 10),
            Difficulty::Hard => (9, &[2, 5], 20),
        };
        let mut routes = Vec::new();
        for &r in roads {
            // each road is a pair of adjacent opposite-direction lanes
            routes.push((0..dim).rev().map(|c| (r, c)).collect());
            routes.push((0..dim).map(|c| (r + 1, c)).collect());
            routes.push((0..dim).map(|row| (row, r)).collect());
            routes.push((0..dim).rev().map(|row| (row, r + 1)).collect());
        }
        let n_routes = routes.len();
        Self {
            difficulty,
            dim,
            routes,
            max_agents,
            p_arrive: 0.2,
            entries: 2 * n_routes,
            junctions: roads.len() * roads.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Car {
    id: u64,
    route: usize,
    progress: usize,
    /// Steps since the car became active.
    tau: usize,
    prev_action: usize,
}

#[derive(Clone, Debug)]
pub struct TrafficJunction {
    layout: JunctionLayout,
    episode_length: usize,
    slots: Vec<Option<Car>>,
    next_id: u64,
    t: usize,
    rng: ChaCha8Rng,
}

impl TrafficJunction {
    pub fn new(difficulty: Difficulty, episode_length: usize) -> Self {
        let layout = JunctionLayout::new(difficulty);
        let slots = vec![None; layout.max_agents];
        let mut env = Self {
            layout,
            episode_length,
            slots,
            next_id: 0,
            t: 0,
            rng: ChaCha8Rng::seed_from_u64(0),
        };
        env.reset(0);
        env
    }

    pub fn obs_dim_for(difficulty: Difficulty) -> usize {
        5 + JunctionLayout::new(difficulty).routes.len()
    }

    pub fn layout(&self) -> &JunctionLayout {
        &self.layout
    }

    pub fn episode_length(&self) -> usize {
        self.episode_length
    }

    /// Overrides the per-route arrival probability (0 disables random
    /// arrivals, for scripted scenarios).
    pub fn set_arrival_probability(&mut self, p: f64) {
        self.layout.p_arrive = p;
    }

    /// Removes every car.
    pub fn clear(&mut self) {
        self.slots.iter_mut().for_each(|s| *s = None);
    }

    /// Places a new car at the start of `route` in the lowest free slot.
    pub fn spawn(&mut self, route: usize) -> Result<usize> {
        if route >= self.layout.routes.len() {
            return Err(Error::Config(format!("no route {route}")));
        }
        let slot = self
            .slots
            .iter()
            .position(Option::is_none)
            .ok_or_else(|| Error::Config("all car slots are occupied".into()))?;
        self.slots[slot] = Some(Car { id: self.next_id, route, progress: 0, tau: 0, prev_action: BRAKE });
        self.next_id += 1;
        Ok(slot)
    }

    fn arrivals(&mut self) {
        for route in 0..self.layout.routes.len() {
            let draw: f64 = self.rng.gen();
            if draw < self.layout.p_arrive && self.active_count() < self.layout.max_agents {
                let _ = self.spawn(route);
            }
        }
    }

    pub fn active_count(&self) -> usize {
        self.slots.iter().filter(|s| s.is_some()).count()
    }

    pub fn active(&self) -> Vec<bool> {
        self.slots.iter().map(Option::is_some).collect()
    }

    /// Identity of the car in each slot; a slot reused by a new car gets a
    /// new id.
    pub fn occupants(&self) -> Vec<Option<u64>> {
        self.slots.iter().map(|s| s.as_ref().map(|c| c.id)).collect()
    }

    /// Cell `(row, col)` of an active car.
    pub fn cell(&self, slot: usize) -> Option<(usize, usize)> {
        self.slots[slot].as_ref().map(|c| self.layout.routes[c.route][c.progress])
    }

    /// Car positions as `[col, row]` in cell units; inactive slots sit at
    /// the origin and are masked out of topologies.
    pub fn positions(&self) -> Vec<Point> {
        (0..self.slots.len())
            .map(|i| self.cell(i).map_or([0.0, 0.0], |(r, c)| [c as f64, r as f64]))
            .collect()
    }

    pub fn reset(&mut self, seed: u64) -> Vec<Vec<f64>> {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self.t = 0;
        self.next_id = 0;
        self.clear();
        self.arrivals();
        (0..self.slots.len()).map(|i| self.observe(i)).collect()
    }

    /// `[previous action, route one-hot, row, col, progress, time]`, scaled
    /// to `[0, 1]`; all zeros for an empty slot.
    pub fn observe(&self, slot: usize) -> Vec<f64> {
        let n_routes = self.layout.routes.len();
        let mut o = vec![0.0; 5 + n_routes];
        if let Some(car) = &self.slots[slot] {
            let route = &self.layout.routes[car.route];
            let (r, c) = route[car.progress];
            let span = (self.layout.dim - 1) as f64;
            o[0] = car.prev_action as f64;
            o[1 + car.route] = 1.0;
            o[1 + n_routes] = r as f64 / span;
            o[2 + n_routes] = c as f64 / span;
            o[3 + n_routes] = car.progress as f64 / (route.len() - 1) as f64;
            o[4 + n_routes] = car.tau as f64 / self.episode_length as f64;
        }
        o
    }

    pub fn step(&mut self, actions: &[Action]) -> Result<StepResult> {
        if actions.len() != self.slots.len() {
            return Err(Error::InvalidAction(format!(
                "expected {} actions, got {}",
                self.slots.len(),
                actions.len()
            )));
        }
        let mut chosen = Vec::with_capacity(actions.len());
        for (slot, a) in self.slots.iter().zip(actions) {
            match a {
                Action::Discrete(k) if slot.is_none() || *k == BRAKE || *k == GAS => chosen.push(*k),
                other => {
                    return Err(Error::InvalidAction(format!("expected gas (1) or brake (0), got {other:?}")))
                }
            }
        }

        for (slot, &a) in self.slots.iter_mut().zip(&chosen) {
            let Some(car) = slot else { continue };
            car.prev_action = a;
            if a == GAS {
                car.progress += 1;
                if car.progress == self.layout.routes[car.route].len() {
                    *slot = None;
                }
            }
        }

        let mut reward = 0.0;
        for car in self.slots.iter_mut().flatten() {
            car.tau += 1;
            reward += TIME_PENALTY * car.tau as f64;
        }
        let cells: Vec<Option<(usize, usize)>> = (0..self.slots.len()).map(|i| self.cell(i)).collect();
        let mut collisions = 0;
        for (i, ci) in cells.iter().enumerate() {
            let Some(ci) = ci else { continue };
            if cells.iter().enumerate().any(|(j, cj)| j != i && cj.as_ref() == Some(ci)) {
                collisions += 1;
                reward += COLLISION_PENALTY;
            }
        }

        self.arrivals();
        self.t += 1;
        Ok(StepResult {
            obs: (0..self.slots.len()).map(|i| self.observe(i)).collect(),
            reward,
            done: self.t >= self.episode_length,
            collisions,
        })
    }
}
