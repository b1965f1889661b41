//! Codebook distributions and the KL / Jensen–Shannon kernels used to rank
//! and weight pool entries.
//!
//! All divergences are in nats. `0 · ln 0` is taken as 0, and KL against a
//! target with no mass where the source has mass is `+∞`. Jensen–Shannon is
//! always finite and lies in `[0, ln 2]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on `Σ p = 1` accepted by [`CodebookDistribution::new`].
pub const SUM_TOLERANCE: f64 = 1e-6;

/// Size (and optional token labels) of a visual-token codebook.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodebookSpec {
    size: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    labels: Option<Vec<String>>,
}

impl CodebookSpec {
    pub fn new(size: usize) -> Result<Self> {
        if size < 2 {
            return Err(Error::config(format!("codebook size must be >= 2, got {size}")));
        }
        Ok(Self { size, labels: None })
    }

    pub fn with_labels(labels: Vec<String>) -> Result<Self> {
        let mut spec = Self::new(labels.len())?;
        spec.labels = Some(labels);
        Ok(spec)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn label(&self, token: usize) -> Option<&str> {
        self.labels.as_ref()?.get(token).map(String::as_str)
    }
}

/// A probability vector over codebook tokens: the per-patch assignment score.
///
/// Entries are stored in `f64`; construction validates and renormalizes, the
/// kernels never do.
#[derive(Debug, Clone, PartialEq)]
pub struct CodebookDistribution {
    probs: Vec<f64>,
}

impl CodebookDistribution {
    /// Validate a probability vector. Entries must be finite and nonnegative
    /// and sum to 1 within [`SUM_TOLERANCE`]; the stored copy is renormalized.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        let sum = check_entries(&probs)?;
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::InvalidDistribution(format!(
                "entries sum to {sum}, expected 1 within {SUM_TOLERANCE}"
            )));
        }
        Ok(Self::renormalized(probs, sum))
    }

    /// Normalize arbitrary nonnegative weights (e.g. imported score rows).
    pub fn from_weights(weights: Vec<f64>) -> Result<Self> {
        let sum = check_entries(&weights)?;
        if sum <= 0.0 {
            return Err(Error::InvalidDistribution("weights sum to zero".into()));
        }
        Ok(Self::renormalized(weights, sum))
    }

    pub fn one_hot(size: usize, token: usize) -> Result<Self> {
        if size < 2 {
            return Err(Error::config(format!("codebook size must be >= 2, got {size}")));
        }
        if token >= size {
            return Err(Error::dim("one-hot token", size, token));
        }
        let mut probs = vec![0.0; size];
        probs[token] = 1.0;
        Ok(Self { probs })
    }

    pub fn uniform(size: usize) -> Result<Self> {
        if size < 2 {
            return Err(Error::config(format!("codebook size must be >= 2, got {size}")));
        }
        Ok(Self {
            probs: vec![1.0 / size as f64; size],
        })
    }

    /// Wrap a vector already known to lie on the simplex up to rounding.
    /// Renormalizes only when the sum drifts from 1 by more than `drift`.
    pub(crate) fn from_simplex(probs: Vec<f64>, drift: f64) -> Self {
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > drift {
            Self::renormalized(probs, sum)
        } else {
            Self { probs }
        }
    }

    fn renormalized(mut probs: Vec<f64>, sum: f64) -> Self {
        if sum != 1.0 {
            probs.iter_mut().for_each(|p| *p /= sum);
        }
        Self { probs }
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.probs
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.probs
    }

    pub fn get(&self, token: usize) -> f64 {
        self.probs[token]
    }

    /// Index of the largest entry; ties go to the lowest token id.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate().skip(1) {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    pub fn check_codebook(&self, spec: &CodebookSpec) -> Result<()> {
        if self.len() != spec.size() {
            return Err(Error::dim("codebook size", spec.size(), self.len()));
        }
        Ok(())
    }
}

fn check_entries(probs: &[f64]) -> Result<f64> {
    if probs.len() < 2 {
        return Err(Error::InvalidDistribution(format!(
            "need at least 2 entries, got {}",
            probs.len()
        )));
    }
    let mut sum = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        if !p.is_finite() || p < 0.0 {
            return Err(Error::InvalidDistribution(format!("entry {i} is {p}")));
        }
        sum += p;
    }
    Ok(sum)
}

/// Which divergence ranks score-keyed neighbors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DivergenceKind {
    #[default]
    Js,
    Kl,
}

fn same_len(a: &CodebookDistribution, b: &CodebookDistribution) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::dim("divergence operands", a.len(), b.len()));
    }
    Ok(())
}

/// `KL(a ‖ b) = Σ a_i ln(a_i / b_i)` in nats.
pub fn kl_divergence(a: &CodebookDistribution, b: &CodebookDistribution) -> Result<f64> {
    same_len(a, b)?;
    Ok(kl_raw(a.as_slice(), b.as_slice()))
}

/// Symmetric Jensen–Shannon divergence `½(KL(a‖z) + KL(b‖z))`, `z = (a+b)/2`.
pub fn js_divergence(a: &CodebookDistribution, b: &CodebookDistribution) -> Result<f64> {
    same_len(a, b)?;
    Ok(js_raw(a.as_slice(), b.as_slice()))
}

/// Divergence of every pool element from `query`, in pool order.
///
/// For KL the pool element is the first argument: `KL(pool_i ‖ query)`.
pub fn pairwise_divergence(
    query: &CodebookDistribution,
    pool: &[CodebookDistribution],
    kind: DivergenceKind,
) -> Result<Vec<f64>> {
    pool.iter()
        .map(|p| match kind {
            DivergenceKind::Js => js_divergence(query, p),
            DivergenceKind::Kl => kl_divergence(p, query),
        })
        .collect()
}

pub(crate) fn kl_raw(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0f64;
    for (&ai, &bi) in a.iter().zip(b) {
        if ai == 0.0 {
            continue;
        }
        if bi == 0.0 {
            return f64::INFINITY;
        }
        acc += ai * (ai / bi).ln();
    }
    acc.max(0.0)
}

// ln(x/z) near x ≈ z is evaluated as ln1p((x−z)/z) so near-identical inputs
// keep their second-order difference instead of cancelling to zero. Far from
// 1 the plain log is used: when x ≪ z the ln1p argument can round to −1.
fn ln_ratio(x: f64, gap: f64, z: f64) -> f64 {
    let r = gap / z;
    if r.abs() < 0.5 {
        r.ln_1p()
    } else {
        (x / z).ln()
    }
}

pub(crate) fn js_raw(a: &[f64], b: &[f64]) -> f64 {
    let mut ka = 0.0f64;
    let mut kb = 0.0f64;
    for (&ai, &bi) in a.iter().zip(b) {
        let z = 0.5 * (ai + bi);
        if z == 0.0 {
            continue;
        }
        let half_gap = 0.5 * (ai - bi);
        if ai > 0.0 {
            ka += ai * ln_ratio(ai, half_gap, z);
        }
        if bi > 0.0 {
            kb += bi * ln_ratio(bi, -half_gap, z);
        }
    }
    (0.5 * (ka + kb)).max(0.0)
}
