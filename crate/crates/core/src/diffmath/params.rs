//! Named parameter storage, Adam updates and the checkpoint file format.
//!
//! Checkpoint format (UTF-8 text, one record per line, `\n` line endings):
//!
//! ```text
//! twohop-params 1
//! adam_step <t>
//! param <name> <rows> <cols>
//! value <v0> <v1> ...          # rows*cols values, row-major
//! adam_m <...>                 # same length, first moment
//! adam_v <...>                 # same length, second moment
//! ...                          # one param/value/adam_m/adam_v group per parameter
//! end
//! ```
//!
//! Parameters appear sorted by name. Numbers use Rust's shortest
//! round-trip decimal formatting for `f64`, so save → load is exact and the
//! text is independent of host byte order.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use super::matrix::Matrix;
use super::tape::Tape;
use crate::error::{Error, Result};

const MAGIC: &str = "twohop-params";
const FORMAT_VERSION: u32 = 1;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

static NEXT_STORE_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_STORE_ID.fetch_add(1, Ordering::Relaxed)
}

#[derive(Clone, Debug, PartialEq)]
struct Slot {
    value: Matrix,
    grad: Matrix,
    m: Matrix,
    v: Matrix,
}

impl Slot {
    fn new(value: Matrix) -> Self {
        let (r, c) = value.shape();
        Self {
            value,
            grad: Matrix::zeros(r, c),
            m: Matrix::zeros(r, c),
            v: Matrix::zeros(r, c),
        }
    }
}

/// A set of named trainable matrices plus Adam moment state.
///
/// Iteration is in name order. Each store carries a process-unique id so a
/// [`Tape`] can tell parameters of two stores with identical names apart
/// (an online network and its target copy, for instance).
#[derive(Debug)]
pub struct ParamStore {
    id: u64,
    slots: BTreeMap<String, Slot>,
    step: u64,
}

impl Clone for ParamStore {
    fn clone(&self) -> Self {
        Self {
            id: fresh_id(),
            slots: self.slots.clone(),
            step: self.step,
        }
    }
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl PartialEq for ParamStore {
    /// Compares contents, ignoring identity.
    fn eq(&self, other: &Self) -> bool {
        self.step == other.step && self.slots == other.slots
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            id: fresh_id(),
            slots: BTreeMap::new(),
            step: 0,
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    /// Registers `name`. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) -> Result<()> {
        let name = name.into();
        if self.slots.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        self.slots.insert(name, Slot::new(value));
        Ok(())
    }

    /// Registers a `rows × cols` parameter drawn uniformly from
    /// `±1/√fan_in`, with `fan_in = rows`.
    pub fn insert_uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        fan_in: usize,
        rng: &mut R,
    ) -> Result<()> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
        self.insert(name, Matrix::from_vec(rows, cols, data))
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.slots.keys().map(String::as_str)
    }

    pub fn value(&self, name: &str) -> Option<&Matrix> {
        self.slots.get(name).map(|s| &s.value)
    }

    pub fn value_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.slots.get_mut(name).map(|s| &mut s.value)
    }

    pub fn grad(&self, name: &str) -> Option<&Matrix> {
        self.slots.get(name).map(|s| &s.grad)
    }

    pub fn grad_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        self.slots.get_mut(name).map(|s| &mut s.grad)
    }

    /// Number of Adam steps taken so far.
    pub fn adam_steps(&self) -> u64 {
        self.step
    }

    pub fn zero_grads(&mut self) {
        for s in self.slots.values_mut() {
            s.grad.fill(0.0);
        }
    }

    /// Adds the gradients of every parameter of this store that was bound as
    /// trainable on `tape`.
    pub fn accumulate_grads(&mut self, tape: &Tape) {
        for (name, var) in tape.bound_params(self.id) {
            if let (Some(slot), Some(g)) = (self.slots.get_mut(name), tape.grad(var)) {
                slot.grad.add_assign(g);
            }
        }
    }

    /// A copy of this store whose gradients are exactly those recorded for
    /// it on `tape`.
    pub fn with_tape_grads(&self, tape: &Tape) -> ParamStore {
        let mut out = self.clone();
        out.zero_grads();
        for (name, var) in tape.bound_params(self.id) {
            if let (Some(slot), Some(g)) = (out.slots.get_mut(name), tape.grad(var)) {
                slot.grad.add_assign(g);
            }
        }
        out
    }

    /// Euclidean norm over every gradient entry of the store.
    pub fn grad_norm(&self) -> f64 {
        self.slots
            .values()
            .map(|s| s.grad.squared_norm())
            .sum::<f64>()
            .sqrt()
    }

    /// One Adam step with global-norm gradient clipping.
    ///
    /// The gradient used for the update is `g · min(1, clip_norm / ‖g‖)`;
    /// stored gradients are left as they are.
    pub fn adam_step(&mut self, lr: f64, clip_norm: f64) -> Result<()> {
        for (name, s) in &self.slots {
            if !s.grad.is_finite() {
                return Err(Error::NonFiniteGradient(name.clone()));
            }
        }
        let norm = self.grad_norm();
        let factor = if clip_norm > 0.0 && norm > clip_norm {
            clip_norm / norm
        } else {
            1.0
        };
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        for s in self.slots.values_mut() {
            let Slot { value, grad, m, v } = s;
            for i in 0..value.len() {
                let g = grad.data()[i] * factor;
                let mi = BETA1 * m.data()[i] + (1.0 - BETA1) * g;
                let vi = BETA2 * v.data()[i] + (1.0 - BETA2) * g * g;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                value.data_mut()[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }

    /// `self ← τ·online + (1−τ)·self` for every parameter.
    pub fn soft_update_from(&mut self, online: &ParamStore, tau: f64) -> Result<()> {
        self.check_same_layout(online)?;
        for (name, s) in self.slots.iter_mut() {
            let src = &online.slots[name].value;
            for (t, o) in s.value.data_mut().iter_mut().zip(src.data()) {
                *t = tau * o + (1.0 - tau) * *t;
            }
        }
        Ok(())
    }

    /// Copies values (not optimizer state) from `online`.
    pub fn copy_values_from(&mut self, online: &ParamStore) -> Result<()> {
        self.check_same_layout(online)?;
        for (name, s) in self.slots.iter_mut() {
            s.value = online.slots[name].value.clone();
        }
        Ok(())
    }

    fn check_same_layout(&self, other: &ParamStore) -> Result<()> {
        if self.slots.len() != other.slots.len() {
            return Err(Error::Dimension(format!(
                "parameter count {} vs {}",
                self.slots.len(),
                other.slots.len()
            )));
        }
        for (name, s) in &self.slots {
            let Some(o) = other.slots.get(name) else {
                return Err(Error::UnknownParam(name.clone()));
            };
            if o.value.shape() != s.value.shape() {
                return Err(Error::Shape {
                    op: "parameter layout",
                    lhs: s.value.shape(),
                    rhs: o.value.shape(),
                });
            }
        }
        Ok(())
    }

    /// Squared distance between the values of two stores with equal layout.
    pub fn squared_distance(&self, other: &ParamStore) -> Result<f64> {
        self.check_same_layout(other)?;
        Ok(self
            .slots
            .iter()
            .map(|(name, s)| {
                s.value
                    .data()
                    .iter()
                    .zip(other.slots[name].value.data())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
            })
            .sum())
    }

    /// Serializes values and Adam state in the documented text format.
    pub fn to_checkpoint_string(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{MAGIC} {FORMAT_VERSION}");
        let _ = writeln!(out, "adam_step {}", self.step);
        for (name, s) in &self.slots {
            let (r, c) = s.value.shape();
            let _ = writeln!(out, "param {name} {r} {c}");
            write_values(&mut out, "value", &s.value);
            write_values(&mut out, "adam_m", &s.m);
            write_values(&mut out, "adam_v", &s.v);
        }
        out.push_str("end\n");
        out
    }

    pub fn from_checkpoint_str(text: &str) -> Result<Self> {
        let bad = |msg: String| Error::Checkpoint(msg);
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty checkpoint".into()))?;
        let mut hp = header.split_whitespace();
        if hp.next() != Some(MAGIC) {
            return Err(bad(format!("bad header `{header}`")));
        }
        let version: u32 = hp
            .next()
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad("missing format version".into()))?;
        if version != FORMAT_VERSION {
            return Err(bad(format!("unsupported format version {version}")));
        }
        let step_line = lines.next().unwrap_or_default();
        let step: u64 = step_line
            .strip_prefix("adam_step ")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| bad(format!("bad adam_step line `{step_line}`")))?;

        let mut store = ParamStore::new();
        store.step = step;
        loop {
            let line = lines.next().ok_or_else(|| bad("missing `end`".into()))?;
            if line == "end" {
                break;
            }
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 4 || parts[0] != "param" {
                return Err(bad(format!("expected param line, got `{line}`")));
            }
            let name = parts[1].to_string();
            let rows: usize = parts[2].parse().map_err(|_| bad(format!("bad rows in `{line}`")))?;
            let cols: usize = parts[3].parse().map_err(|_| bad(format!("bad cols in `{line}`")))?;
            let value = read_values(lines.next(), "value", rows, cols)?;
            let m = read_values(lines.next(), "adam_m", rows, cols)?;
            let v = read_values(lines.next(), "adam_v", rows, cols)?;
            store.insert(name.clone(), value)?;
            let slot = store.slots.get_mut(&name).expect("just inserted");
            slot.m = m;
            slot.v = v;
        }
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_checkpoint_string()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref()).map_err(|e| Error::io(&path, e))?;
        Self::from_checkpoint_str(&text)
    }

    /// True when `other` has the same names and shapes.
    pub fn same_layout(&self, other: &ParamStore) -> bool {
        self.check_same_layout(other).is_ok()
    }
}

fn write_values(out: &mut String, tag: &str, m: &Matrix) {
    out.push_str(tag);
    for v in m.data() {
        let _ = write!(out, " {v:?}");
    }
    out.push('\n');
}

fn read_values(line: Option<&str>, tag: &str, rows: usize, cols: usize) -> Result<Matrix> {
    let line = line.ok_or_else(|| Error::Checkpoint(format!("missing `{tag}` line")))?;
    let mut parts = line.split_whitespace();
    if parts.next() != Some(tag) {
        return Err(Error::Checkpoint(format!("expected `{tag}` line")));
    }
    let data: Vec<f64> = parts
        .map(|p| p.parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Checkpoint(format!("bad number in `{tag}`: {e}")))?;
    if data.len() != rows * cols {
        return Err(Error::Checkpoint(format!(
            "`{tag}` has {} values, expected {}",
            data.len(),
            rows * cols
        )));
    }
    Ok(Matrix::from_vec(rows, cols, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let mut s = ParamStore::new();
        s.insert("w", Matrix::row_vector(&[0.5, -1.25])).unwrap();
        let before = s.value("w").unwrap().clone();
        s.adam_step(1e-4, 0.1).unwrap();
        assert_eq!(s.value("w").unwrap(), &before);
    }

    /// Two Adam steps on a scalar with constant gradient 1.0, stepped by hand.
    #[test]
    fn adam_matches_hand_stepped_reference() {
        let (lr, clip) = (1e-3, 10.0);
        let mut s = ParamStore::new();
        s.insert("x", Matrix::scalar(0.7)).unwrap();

        let (mut x, mut m, mut v) = (0.7f64, 0.0f64, 0.0f64);
        for t in 1..=2 {
            s.grad_mut("x").unwrap().fill(1.0);
            s.adam_step(lr, clip).unwrap();
            let g = 1.0;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            x -= lr * mh / (vh.sqrt() + 1e-8);
            assert!((s.value("x").unwrap().item() - x).abs() < 1e-10);
        }
    }

    #[test]
    fn clipping_rescales_to_clip_norm() {
        let mut s = ParamStore::new();
        s.insert("a", Matrix::row_vector(&[0.0, 0.0])).unwrap();
        s.grad_mut("a").unwrap().data_mut().copy_from_slice(&[3.0, 4.0]);
        s.adam_step(1e-3, 0.1).unwrap();
        // first Adam step moves each coordinate by lr·sign(g) regardless of
        // scale, so inspect the first moment instead
        let slot = &s.slots["a"];
        assert!((slot.m.get(0, 0) - 0.1 * 0.06).abs() < 1e-15);
        assert!((slot.m.get(0, 1) - 0.1 * 0.08).abs() < 1e-15);
        // gradients are not touched
        assert_eq!(s.grad("a").unwrap().data(), &[3.0, 4.0]);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut s = ParamStore::new();
        s.insert("layer.w", Matrix::scalar(0.0)).unwrap();
        s.grad_mut("layer.w").unwrap().fill(f64::INFINITY);
        let err = s.adam_step(1e-4, 0.1).unwrap_err();
        assert!(err.to_string().contains("layer.w"));
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.insert("w", Matrix::scalar(1.0)).unwrap();
        assert!(s.insert("w", Matrix::scalar(2.0)).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut s = ParamStore::new();
        s.insert_uniform("b.w", 3, 4, 3, &mut rng).unwrap();
        s.insert_uniform("a.bias", 1, 4, 3, &mut rng).unwrap();
        s.grad_mut("b.w").unwrap().fill(0.3);
        s.adam_step(1e-2, 1.0).unwrap();
        s.zero_grads();
        let text = s.to_checkpoint_string();
        let back = ParamStore::from_checkpoint_str(&text).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.to_checkpoint_string(), text);
        // sorted by name
        let first_param = text.lines().find(|l| l.starts_with("param")).unwrap();
        assert!(first_param.starts_with("param a.bias"));
    }

    #[test]
    fn corrupt_checkpoint_is_rejected() {
        assert!(ParamStore::from_checkpoint_str("nope").is_err());
        assert!(ParamStore::from_checkpoint_str("twohop-params 9\nadam_step 0\nend\n").is_err());
        let short = "twohop-params 1\nadam_step 0\nparam w 1 2\nvalue 1\nadam_m 0 0\nadam_v 0 0\nend\n";
        assert!(ParamStore::from_checkpoint_str(short).is_err());
    }

    #[test]
    fn soft_update_extremes() {
        let mut online = ParamStore::new();
        online.insert("w", Matrix::row_vector(&[1.0, 2.0])).unwrap();
        let mut target = ParamStore::new();
        target.insert("w", Matrix::row_vector(&[-1.0, 5.0])).unwrap();
        let orig = target.clone();
        target.soft_update_from(&online, 0.0).unwrap();
        assert_eq!(target.value("w"), orig.value("w"));
        target.soft_update_from(&online, 1.0).unwrap();
        assert_eq!(target.value("w"), online.value("w"));
    }
}
