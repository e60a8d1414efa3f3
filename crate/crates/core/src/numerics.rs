//! Parameter storage, the gradient contract, Adam, and finite-difference
//! gradient validation.
//!
//! Every learnable quantity in the crate lives in a flat [`ParamVector`]
//! whose [`Layout`] maps named slices (`"embed"`, `"w1"`, ...) onto index
//! ranges. Losses implement [`Objective`] and supply hand-derived gradients;
//! [`finite_diff_check`] is the independent route that keeps them honest.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Deterministic RNG used throughout the crate.
pub type Rng = ChaCha8Rng;

/// Builds an RNG from a 64-bit seed.
pub fn rng_from_seed(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with a path of integers into an independent child seed.
///
/// Used to derive per-(iteration, backbone, pair, ...) streams so that no RNG
/// state has to be threaded through or checkpointed.
pub fn derive_seed(base: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(base), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

/// Stable 64-bit hash of a string (FNV-1a).
pub fn hash_str(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// `log(sum(exp(xs)))` with max subtraction. Empty input gives `-inf`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    if max == f64::INFINITY {
        return f64::INFINITY;
    }
    max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// `log(1 + exp(x))` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `log σ(z)` evaluated as `-softplus(-z)`.
pub fn log_sigmoid(z: f64) -> f64 {
    -softplus(-z)
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax, written into `out`. Returns the log
/// normaliser `log Σ exp(logits)`.
pub fn softmax_into(logits: &[f64], out: &mut [f64]) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
    max + total.ln()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; logits.len()];
    softmax_into(logits, &mut out);
    out
}

/// Pairwise (tree) summation. The result depends only on the input order.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    match xs.len() {
        0 => 0.0,
        1 => xs[0],
        n if n <= 8 => xs.iter().sum(),
        n => {
            let (a, b) = xs.split_at(n / 2);
            pairwise_sum(a) + pairwise_sum(b)
        }
    }
}

/// Inner product with four interleaved accumulators.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Sum of equal-length vectors by fixed-order tree reduction.
pub fn tree_sum_vectors(mut parts: Vec<Vec<f64>>, len: usize) -> Vec<f64> {
    if parts.is_empty() {
        return vec![0.0; len];
    }
    while parts.len() > 1 {
        let mut next = Vec::with_capacity(parts.len().div_ceil(2));
        let mut it = parts.into_iter();
        while let Some(mut a) = it.next() {
            if let Some(b) = it.next() {
                for (x, y) in a.iter_mut().zip(&b) {
                    *x += y;
                }
            }
            next.push(a);
        }
        parts = next;
    }
    parts.pop().unwrap()
}

/// Named, contiguous slice of a parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slice {
    pub name: String,
    pub start: usize,
    pub len: usize,
}

impl Slice {
    pub fn range(&self) -> Range<usize> {
        self.start..self.start + self.len
    }
}

/// Disjoint cover of `0..len` by named slices.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Layout {
    slices: Vec<Slice>,
}

impl Layout {
    /// Builds a layout by laying slices end to end in the given order.
    pub fn from_sizes<S: Into<String>>(sizes: impl IntoIterator<Item = (S, usize)>) -> Self {
        let mut start = 0;
        let slices = sizes
            .into_iter()
            .map(|(name, len)| {
                let s = Slice {
                    name: name.into(),
                    start,
                    len,
                };
                start += len;
                s
            })
            .collect();
        Layout { slices }
    }

    pub fn len(&self) -> usize {
        self.slices.last().map_or(0, |s| s.start + s.len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn slices(&self) -> &[Slice] {
        &self.slices
    }

    pub fn get(&self, name: &str) -> Option<&Slice> {
        self.slices.iter().find(|s| s.name == name)
    }

    /// Name of the slice containing flat index `idx`.
    pub fn slice_of(&self, idx: usize) -> Option<&str> {
        self.slices
            .iter()
            .find(|s| s.range().contains(&idx))
            .map(|s| s.name.as_str())
    }

    /// Checks that the slices are contiguous, disjoint, and cover `0..len`.
    pub fn validate(&self) -> Result<()> {
        let mut expect = 0;
        for s in &self.slices {
            if s.start != expect {
                return Err(Error::contract(format!(
                    "layout slice '{}' starts at {} but {} was expected",
                    s.name, s.start, expect
                )));
            }
            expect += s.len;
        }
        Ok(())
    }
}

/// Flat parameter storage with a named layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub values: Vec<f64>,
    pub layout: Layout,
}

impl ParamVector {
    pub fn zeros(layout: Layout) -> Self {
        ParamVector {
            values: vec![0.0; layout.len()],
            layout,
        }
    }

    pub fn new(values: Vec<f64>, layout: Layout) -> Result<Self> {
        layout.validate()?;
        if values.len() != layout.len() {
            return Err(Error::contract(format!(
                "parameter vector has {} values but layout covers {}",
                values.len(),
                layout.len()
            )));
        }
        let p = ParamVector { values, layout };
        p.check_finite("parameters")?;
        Ok(p)
    }

    /// Unstructured vector with a single slice named `name`.
    pub fn flat(name: &str, values: Vec<f64>) -> Self {
        let layout = Layout::from_sizes([(name, values.len())]);
        ParamVector { values, layout }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn slice(&self, name: &str) -> &[f64] {
        let s = self
            .layout
            .get(name)
            .unwrap_or_else(|| panic!("no parameter slice named '{name}'"));
        &self.values[s.range()]
    }

    pub fn slice_mut(&mut self, name: &str) -> &mut [f64] {
        let r = self
            .layout
            .get(name)
            .unwrap_or_else(|| panic!("no parameter slice named '{name}'"))
            .range();
        &mut self.values[r]
    }

    /// A copy of this vector with the same layout and different values.
    pub fn with_values(&self, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), self.values.len());
        ParamVector {
            values,
            layout: self.layout.clone(),
        }
    }

    /// Returns a numerical-failure error naming the first slice holding a
    /// non-finite entry.
    pub fn check_finite(&self, what: &str) -> Result<()> {
        match self.values.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::numerical(
                what,
                format!(
                    "non-finite value {} at index {i} in slice '{}'",
                    self.values[i],
                    self.layout.slice_of(i).unwrap_or("?")
                ),
            )),
        }
    }
}

/// A scalar function of a parameter vector with a hand-derived gradient.
pub trait Objective {
    /// Loss value and its gradient (same length as `params`).
    fn value_and_grad(&self, params: &ParamVector) -> Result<(f64, Vec<f64>)>;

    /// Loss value only. Defaults to discarding the gradient.
    fn value(&self, params: &ParamVector) -> Result<f64> {
        self.value_and_grad(params).map(|(v, _)| v)
    }
}

impl<F> Objective for F
where
    F: Fn(&ParamVector) -> Result<(f64, Vec<f64>)>,
{
    fn value_and_grad(&self, params: &ParamVector) -> Result<(f64, Vec<f64>)> {
        self(params)
    }
}

/// Evaluates the objective's gradient at `at`, rejecting non-finite output.
pub fn gradient(objective: &dyn Objective, at: &ParamVector) -> Result<ParamVector> {
    let (loss, grad) = objective.value_and_grad(at)?;
    if !loss.is_finite() {
        return Err(Error::numerical(
            "gradient",
            format!("non-finite loss {loss}"),
        ));
    }
    if grad.len() != at.len() {
        return Err(Error::contract(format!(
            "gradient has length {} but parameters have {}",
            grad.len(),
            at.len()
        )));
    }
    let g = at.with_values(grad);
    g.check_finite("gradient")?;
    Ok(g)
}

/// Outcome of comparing an analytic gradient with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub worst_slice: String,
    pub analytic: f64,
    pub numeric: f64,
    pub passed: bool,
}

/// Floor on the relative-error denominator.
pub const REL_ERR_FLOOR: f64 = 1e-8;

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

/// Compares `gradient(objective)` against central differences with step `h`.
///
/// Passes iff the maximum elementwise relative error is below `tol`. Any
/// evaluation error, including a non-finite loss, counts as a failure.
pub fn finite_diff_check(
    objective: &dyn Objective,
    at: &ParamVector,
    h: f64,
    tol: f64,
) -> FdReport {
    assert!(h > 0.0, "finite-difference step must be positive");
    let failed = |slice: &str| FdReport {
        max_rel_error: f64::INFINITY,
        worst_index: 0,
        worst_slice: slice.to_string(),
        analytic: f64::NAN,
        numeric: f64::NAN,
        passed: false,
    };
    let analytic = match gradient(objective, at) {
        Ok(g) => g,
        Err(_) => return failed("<gradient evaluation failed>"),
    };
    let mut probe = at.clone();
    let mut report = FdReport {
        max_rel_error: 0.0,
        worst_index: 0,
        worst_slice: at.layout.slice_of(0).unwrap_or("").to_string(),
        analytic: 0.0,
        numeric: 0.0,
        passed: true,
    };
    for i in 0..at.len() {
        let x = at.values[i];
        probe.values[i] = x + h;
        let up = objective.value(&probe);
        probe.values[i] = x - h;
        let down = objective.value(&probe);
        probe.values[i] = x;
        let (up, down) = match (up, down) {
            (Ok(u), Ok(d)) => (u, d),
            _ => return failed(at.layout.slice_of(i).unwrap_or("?")),
        };
        let numeric = (up - down) / (2.0 * h);
        let mut err = relative_error(analytic.values[i], numeric);
        if err.is_nan() {
            err = f64::INFINITY;
        }
        if err > report.max_rel_error || i == 0 {
            report.max_rel_error = err;
            report.worst_index = i;
            report.analytic = analytic.values[i];
            report.numeric = numeric;
        }
    }
    report.worst_slice = at
        .layout
        .slice_of(report.worst_index)
        .unwrap_or("")
        .to_string();
    report.passed = report.max_rel_error < tol;
    report
}

/// Adam optimizer state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    /// Fresh state for `dim` parameters.
    pub fn new(dim: usize, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::contract(format!("Adam lr must be > 0, got {lr}")));
        }
        if !(beta1 > 0.0 && beta1 < 1.0) || !(beta2 > 0.0 && beta2 < 1.0) {
            return Err(Error::contract(format!(
                "Adam betas must lie in (0,1), got ({beta1}, {beta2})"
            )));
        }
        if !(eps > 0.0) {
            return Err(Error::contract(format!("Adam eps must be > 0, got {eps}")));
        }
        Ok(AdamState {
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            step: 0,
            lr,
            beta1,
            beta2,
            eps,
        })
    }

    /// One bias-corrected Adam update of `params` in place.
    ///
    /// An all-zero gradient still advances the moments and the step counter
    /// but leaves the parameters untouched.
    pub fn step(&mut self, params: &mut ParamVector, grad: &[f64]) -> Result<()> {
        if grad.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::contract(format!(
                "Adam dimension mismatch: params {}, grad {}, state {}",
                params.len(),
                grad.len(),
                self.m.len()
            )));
        }
        if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::numerical(
                "adam_step",
                format!(
                    "non-finite gradient at index {i} in slice '{}'",
                    params.layout.slice_of(i).unwrap_or("?")
                ),
            ));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let apply = grad.iter().any(|&g| g != 0.0);
        for (i, &g) in grad.iter().enumerate() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            if apply {
                let m_hat = self.m[i] / c1;
                let v_hat = self.v[i] / c2;
                params.values[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
