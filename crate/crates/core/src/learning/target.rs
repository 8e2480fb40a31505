use crate::diffmath::ParamStore;
use crate::error::Result;

/// Delayed copies of the actor and critic used for bootstrapped targets.
#[derive(Clone, Debug)]
pub struct TargetNets {
    pub actor: ParamStore,
    pub critic: ParamStore,
    /// Update cycles applied so far.
    pub updates: u64,
}

/// `target ← τ·online + (1−τ)·target`, elementwise.
pub fn soft_update(target: &mut ParamStore, online: &ParamStore, tau: f64) -> Result<()> {
    target.soft_update_from(online, tau)
}

impl TargetNets {
    pub fn new(actor: &ParamStore, critic: &ParamStore) -> Self {
        Self {
            actor: actor.clone(),
            critic: critic.clone(),
            updates: 0,
        }
    }

    /// One cycle of the target schedule: a soft update, plus a hard copy
    /// every `hard_period` cycles.
    pub fn update(&mut self, actor: &ParamStore, critic: &ParamStore, tau: f64, hard_period: u64) -> Result<()> {
        self.updates += 1;
        if hard_period > 0 && self.updates.is_multiple_of(hard_period) {
            self.actor.copy_values_from(actor)?;
            self.critic.copy_values_from(critic)
        } else {
            soft_update(&mut self.actor, actor, tau)?;
            soft_update(&mut self.critic, critic, tau)
        }
    }
}
