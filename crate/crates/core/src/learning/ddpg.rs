use crate::diffmath::{Matrix, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::neural::{self, ActionKind, Bound, NetDims};
use crate::protocol;

use super::{Batch, Hyper, Networks, Setting};

/// `y = r + γ·(1 − done)·Q′(τ′, π′(τ′))`, one value per sample and agent
/// (sample-major). The next-step actions come from the target actor, gated
/// by the current controller.
pub fn td_targets(nets: &Networks, batch: &Batch, setting: &Setting, gamma: f64) -> Result<Vec<f64>> {
    let mut t = Tape::new();
    let obs = t.constant(batch.next_obs.clone())?;
    let hist = t.constant(batch.next_hist.clone())?;
    let f = protocol::forward(
        &mut t,
        Bound::frozen(&nets.targets.actor),
        &nets.controller,
        &nets.dims,
        setting.mode,
        setting.threshold,
        &batch.next_topos,
        obs,
        hist,
    )?;
    let q = neural::critic_value(&mut t, Bound::frozen(&nets.targets.critic), &nets.dims, hist, obs, f.actions)?;
    let q = t.value(q);
    let n = batch.n_agents;
    let mut y = Vec::with_capacity(batch.size() * n);
    for b in 0..batch.size() {
        let cont = if batch.dones[b] { 0.0 } else { 1.0 };
        for i in 0..n {
            y.push(batch.rewards[b] + gamma * cont * q.get(b, i));
        }
    }
    Ok(y)
}

pub(crate) fn critic_loss(tape: &mut Tape, critic: Bound, dims: &NetDims, batch: &Batch, targets: &[f64]) -> Result<Var> {
    let hist = tape.constant(batch.hist.clone())?;
    let obs = tape.constant(batch.obs.clone())?;
    let act = tape.constant(batch.actions.clone())?;
    let q = neural::critic_value(tape, critic, dims, hist, obs, act)?;
    let y = tape.constant(Matrix::from_vec(batch.size(), batch.n_agents, targets.to_vec()))?;
    let d = tape.sub(q, y)?;
    let sq = tape.square(d)?;
    tape.mean(sq)
}

fn apply(store: &mut ParamStore, tape: &Tape, lr: f64, clip: f64) -> Result<()> {
    store.zero_grads();
    store.accumulate_grads(tape);
    store.adam_step(lr, clip)
}

/// One clipped Adam step on the critic's mean squared TD error. Returns the
/// loss before the step.
pub fn critic_update(nets: &mut Networks, batch: &Batch, setting: &Setting, hyper: &Hyper) -> Result<f64> {
    let y = td_targets(nets, batch, setting, hyper.gamma)?;
    let mut t = Tape::new();
    let loss = critic_loss(&mut t, Bound::trainable(&nets.critic), &nets.dims, batch, &y)?;
    let value = t.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss("critic update"));
    }
    t.backward(loss)?;
    apply(&mut nets.critic, &t, hyper.critic_lr, hyper.grad_clip)?;
    Ok(value)
}

/// Actor loss: minus the mean critic value of the actor's own joint
/// action (critic frozen, gates from the current controller), plus
/// `action_reg` times the mean squared pre-`tanh` output for continuous
/// actions. Returns `(objective, loss)`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn actor_loss(
    tape: &mut Tape,
    actor: Bound,
    controller: &ParamStore,
    critic: &ParamStore,
    dims: &NetDims,
    batch: &Batch,
    setting: &Setting,
    action_reg: f64,
) -> Result<(Var, Var)> {
    let obs = tape.constant(batch.obs.clone())?;
    let hist = tape.constant(batch.hist.clone())?;
    let f = protocol::forward(
        tape,
        actor,
        controller,
        dims,
        setting.mode,
        setting.threshold,
        &batch.topos,
        obs,
        hist,
    )?;
    let q = neural::critic_value(tape, Bound::frozen(critic), dims, hist, obs, f.actions)?;
    let obj = tape.mean(q)?;
    let mut loss = tape.affine(obj, -1.0, 0.0)?;
    if action_reg > 0.0 && dims.action == ActionKind::Continuous {
        let sq = tape.square(f.preactivation)?;
        let m = tape.mean(sq)?;
        let reg = tape.affine(m, action_reg, 0.0)?;
        loss = tape.add(loss, reg)?;
    }
    Ok((obj, loss))
}

/// One clipped Adam step on the actor loss. Returns the critic objective
/// before the step.
pub fn actor_update_ddpg(nets: &mut Networks, batch: &Batch, setting: &Setting, hyper: &Hyper) -> Result<f64> {
    let mut t = Tape::new();
    let (obj, loss) = actor_loss(
        &mut t,
        Bound::trainable(&nets.actor),
        &nets.controller,
        &nets.critic,
        &nets.dims,
        batch,
        setting,
        hyper.action_reg,
    )?;
    let value = t.value(obj).item();
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss("actor update"));
    }
    t.backward(loss)?;
    apply(&mut nets.actor, &t, hyper.actor_lr, hyper.grad_clip)?;
    Ok(value)
}
