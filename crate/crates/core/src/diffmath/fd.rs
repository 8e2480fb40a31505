//! Central finite-difference oracle for unit tests.

use crate::diffmath::{Matrix, ParamStore};

/// Compares the analytic gradient of every parameter in `store` against
/// central differences of `loss`. Returns the largest relative error,
/// `|a − n| / max(1e-3, |a|, |n|)`.
pub(crate) fn max_param_error(
    store: &mut ParamStore,
    eps: f64,
    loss: &mut dyn FnMut(&ParamStore, bool) -> (f64, Option<ParamStore>),
) -> f64 {
    let (_, analytic) = loss(store, true);
    let analytic = analytic.expect("gradient requested");
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let mut worst: f64 = 0.0;
    for name in names {
        let len = store.value(&name).unwrap().len();
        for i in 0..len {
            let orig = store.value(&name).unwrap().data()[i];
            store.value_mut(&name).unwrap().data_mut()[i] = orig + eps;
            let up = loss(store, false).0;
            store.value_mut(&name).unwrap().data_mut()[i] = orig - eps;
            let down = loss(store, false).0;
            store.value_mut(&name).unwrap().data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.grad(&name).unwrap().data()[i];
            worst = worst.max(rel_err(a, numeric));
        }
    }
    worst
}

pub(crate) fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1e-3f64.max(a.abs()).max(b.abs())
}

#[allow(dead_code)]
pub(crate) fn matrix_close(a: &Matrix, b: &Matrix, tol: f64) -> bool {
    a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| (x - y).abs() <= tol)
}
