use std::rc::Rc;

use crate::diffmath::{Matrix, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::neural::{self, Bound, NetDims};
use crate::protocol::{self, ProtocolMode};

use super::{Batch, Hyper, Networks};

/// Self-supervised targets for the gating controller on one batch.
#[derive(Clone, Debug)]
pub struct LabelPass {
    /// `‖act(c0, c1, 0) − act(c0, c1, c2)‖₂ > T` per agent row.
    pub labels: Vec<bool>,
    pub distances: Vec<f64>,
    pub c0: Matrix,
    pub c1: Matrix,
    /// Rows belonging to active agents; only these are trained on.
    pub active: Vec<bool>,
}

/// Replays the batch through the actor with every gate forced open and
/// compares the one-round and two-round actions. Independent of the
/// controller's parameters.
pub fn controller_labels(actor: &ParamStore, dims: &NetDims, batch: &Batch, threshold: f64) -> Result<LabelPass> {
    let mut t = Tape::new();
    let p = Bound::frozen(actor);
    let obs = t.constant(batch.obs.clone())?;
    let hist = t.constant(batch.hist.clone())?;
    let first = protocol::first_round(&mut t, p, dims, &batch.topos, obs, hist)?;
    let rows = batch.obs.rows();
    let open = vec![true; rows];
    let (c2, _) = protocol::second_round(&mut t, p, dims, ProtocolMode::Ac2cNoController, &batch.topos, first.c1, &open)?;
    let zero = t.constant(Matrix::zeros(rows, dims.hidden))?;
    let a_one = neural::act(&mut t, p, dims, first.c0, first.c1, zero)?;
    let a_two = neural::act(&mut t, p, dims, first.c0, first.c1, c2)?;
    let (a1, a2) = (t.value(a_one), t.value(a_two));
    let distances: Vec<f64> = (0..rows)
        .map(|r| {
            a1.row(r)
                .iter()
                .zip(a2.row(r))
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let labels = distances.iter().map(|&d| d > threshold).collect();
    let active = batch.topos.iter().flat_map(|topo| topo.active().iter().copied()).collect();
    Ok(LabelPass {
        labels,
        distances,
        c0: t.value(first.c0).clone(),
        c1: t.value(first.c1).clone(),
        active,
    })
}

/// Mean binary cross-entropy of the controller over active rows, computed
/// from logits as `−log σ(x)` / `−log(1 − σ(x))`.
pub(crate) fn controller_loss(tape: &mut Tape, controller: Bound, dims: &NetDims, pass: &LabelPass) -> Result<Var> {
    let c0 = tape.constant(pass.c0.clone())?;
    let c1 = tape.constant(pass.c1.clone())?;
    let logit = neural::controller_logit(tape, controller, dims, c0, c1)?;
    let rows = pass.labels.len();
    let zeros = tape.constant(Matrix::zeros(rows, 1))?;
    let pair = tape.concat(&[zeros, logit])?;
    let logp = tape.log_softmax_rows(pair)?;
    let picked = tape.pick_cols(logp, Rc::new(pass.labels.iter().map(|&y| usize::from(y)).collect()))?;
    let count = pass.active.iter().filter(|&&a| a).count();
    if count == 0 {
        return Err(Error::Config("controller batch has no active agents".into()));
    }
    let weights = tape.constant(Matrix::from_vec(
        rows,
        1,
        pass.active.iter().map(|&a| if a { 1.0 } else { 0.0 }).collect(),
    ))?;
    let weighted = tape.mul(picked, weights)?;
    let total = tape.sum(weighted)?;
    tape.affine(total, -1.0 / count as f64, 0.0)
}

/// One clipped Adam step of the controller on fresh labels. The actor and
/// critic are not modified. Returns the loss before the step.
pub fn controller_update(nets: &mut Networks, batch: &Batch, threshold: f64, hyper: &Hyper) -> Result<f64> {
    let pass = controller_labels(&nets.actor, &nets.dims, batch, threshold)?;
    let mut t = Tape::new();
    let loss = controller_loss(&mut t, Bound::trainable(&nets.controller), &nets.dims, &pass)?;
    let value = t.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss("controller update"));
    }
    t.backward(loss)?;
    nets.controller.zero_grads();
    nets.controller.accumulate_grads(&t);
    nets.controller.adam_step(hyper.controller_lr, hyper.grad_clip)?;
    Ok(value)
}
