//! Scalar and vector kernels shared by clients, server and generator.
//!
//! Everything here runs in `f64`. Probabilities are clamped to [`LOG_EPS`]
//! before any logarithm so that hard zeros in soft labels stay finite.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower clamp applied to probabilities before taking logs.
pub const LOG_EPS: f64 = 1e-12;

/// Tolerance on `|sum - 1|` for a vector to count as a point on the simplex.
pub const SIMPLEX_TOL: f64 = 1e-9;

/// Default central-difference step.
pub const FD_STEP: f64 = 1e-5;

/// A soft label: non-negative entries summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ProbVec(Vec<f64>);

impl ProbVec {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidInput("empty probability vector".into()));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::InvalidInput(format!(
                "probability entry {v} is negative or non-finite"
            )));
        }
        let dev = simplex_deviation(&values);
        if dev > SIMPLEX_TOL {
            return Err(Error::InvalidInput(format!(
                "probabilities sum to 1 {dev:+e}, outside the simplex tolerance"
            )));
        }
        Ok(ProbVec(values))
    }

    /// Point mass on `class`.
    pub fn one_hot(len: usize, class: usize) -> Self {
        assert!(class < len, "one-hot index {class} out of range for length {len}");
        let mut v = vec![0.0; len];
        v[class] = 1.0;
        ProbVec(v)
    }

    pub fn uniform(len: usize) -> Self {
        assert!(len > 0);
        ProbVec(vec![1.0 / len as f64; len])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// Absolute deviation of the entry sum from one.
    pub fn deviation(&self) -> f64 {
        simplex_deviation(&self.0)
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }
}

impl TryFrom<Vec<f64>> for ProbVec {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        ProbVec::new(values)
    }
}

impl From<ProbVec> for Vec<f64> {
    fn from(p: ProbVec) -> Self {
        p.0
    }
}

impl std::ops::Index<usize> for ProbVec {
    type Output = f64;

    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// Raw, unnormalized classifier outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits(Vec<f64>);

impl Logits {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidInput("empty logit vector".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite logit".into()));
        }
        Ok(Logits(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Softmax temperature, strictly positive.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Temperature(f64);

impl Temperature {
    pub fn new(tau: f64) -> Result<Self> {
        if tau.is_finite() && tau > 0.0 {
            Ok(Temperature(tau))
        } else {
            Err(Error::Domain(format!("temperature must be positive, got {tau}")))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for Temperature {
    type Error = Error;

    fn try_from(tau: f64) -> Result<Self> {
        Temperature::new(tau)
    }
}

impl From<Temperature> for f64 {
    fn from(t: Temperature) -> f64 {
        t.0
    }
}

pub fn simplex_deviation(values: &[f64]) -> f64 {
    (values.iter().sum::<f64>() - 1.0).abs()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// In-place tempered softmax over `row`. The caller guarantees finite entries and
/// `tau > 0`.
pub(crate) fn softmax_in_place(row: &mut [f64], tau: f64) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = ((*v - max) / tau).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub fn softmax_tau(z: &Logits, tau: Temperature) -> ProbVec {
    let mut out = z.0.clone();
    softmax_in_place(&mut out, tau.get());
    ProbVec(out)
}

/// Tempered softmax over a raw slice, validating finiteness.
pub fn softmax_slice(z: &[f64], tau: Temperature) -> Result<ProbVec> {
    Ok(softmax_tau(&Logits::new(z.to_vec())?, tau))
}

fn same_len(a: usize, b: usize, what: &str) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::Shape(format!("{what}: lengths {a} and {b} differ")))
    }
}

/// `-sum_i target_i * ln(max(p_i, eps))`.
pub fn cross_entropy(p: &ProbVec, target: &ProbVec) -> Result<f64> {
    same_len(p.len(), target.len(), "cross_entropy")?;
    Ok(p.0
        .iter()
        .zip(&target.0)
        .map(|(p, t)| -t * p.max(LOG_EPS).ln())
        .sum())
}

/// `KL(reference || q)` with `0 ln 0 = 0` and `q` clamped at eps.
pub fn kl_div(reference: &ProbVec, q: &ProbVec) -> Result<f64> {
    same_len(reference.len(), q.len(), "kl_div")?;
    Ok(kl_raw(&reference.0, &q.0))
}

pub(crate) fn kl_raw(reference: &[f64], q: &[f64]) -> f64 {
    reference
        .iter()
        .zip(q)
        .filter(|(r, _)| **r > 0.0)
        .map(|(r, q)| r * (r.ln() - q.max(LOG_EPS).ln()))
        .sum()
}

/// Shannon entropy in nats.
pub fn entropy(p: &ProbVec) -> f64 {
    p.0.iter().filter(|v| **v > 0.0).map(|v| -v * v.ln()).sum()
}

pub fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

pub fn norm(u: &[f64]) -> f64 {
    dot(u, u).sqrt()
}

pub fn cosine(u: &[f64], v: &[f64]) -> Result<f64> {
    same_len(u.len(), v.len(), "cosine")?;
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::Domain("cosine of a zero-norm vector".into()));
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// `params -= lr * grads`.
pub fn sgd_step(params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
    same_len(params.len(), grads.len(), "sgd_step")?;
    if lr.is_nan() || lr < 0.0 {
        return Err(Error::Domain(format!("learning rate must be non-negative, got {lr}")));
    }
    for (p, g) in params.iter_mut().zip(grads) {
        *p -= lr * g;
    }
    Ok(())
}

/// Central-difference gradient of `f` at `x`.
pub fn finite_diff_grad<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if h.is_nan() || h <= 0.0 {
        return Err(Error::Domain(format!("finite-difference step must be positive, got {h}")));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = f(&probe);
        probe[i] = orig - h;
        let minus = f(&probe);
        probe[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Evaluation { index: i });
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

/// Largest elementwise relative error, `|a-b| / max(|a|, |b|, floor)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
