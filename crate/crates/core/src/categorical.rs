use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};

/// Tolerance on `|sum - 1|` accepted by [`Categorical::new`].
pub const SUM_TOLERANCE: f64 = 1e-9;

/// A probability vector over `N` tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Categorical {
    probs: Vec<f64>,
}

impl Categorical {
    /// Validates an already-normalized probability vector.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        check_entries(&probs)?;
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return domain(format!("probabilities sum to {sum}, not 1"));
        }
        Ok(Self { probs })
    }

    /// Rescales non-negative weights to sum to one.
    pub fn normalized(weights: Vec<f64>) -> Result<Self> {
        check_entries(&weights)?;
        let sum: f64 = weights.iter().sum();
        if sum <= 0.0 {
            return domain("cannot normalize an all-zero weight vector");
        }
        Ok(Self { probs: weights.into_iter().map(|w| w / sum).collect() })
    }

    pub fn one_hot(n: usize, index: usize) -> Result<Self> {
        if index >= n {
            return domain(format!("one-hot index {index} outside 0..{n}"));
        }
        let mut probs = vec![0.0; n];
        probs[index] = 1.0;
        Ok(Self { probs })
    }

    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return domain("uniform distribution over zero outcomes");
        }
        Ok(Self { probs: vec![1.0 / n as f64; n] })
    }

    /// Wraps a vector the caller guarantees is a valid distribution.
    pub(crate) fn from_raw(probs: Vec<f64>) -> Self {
        debug_assert!(probs.iter().all(|p| p.is_finite() && *p >= 0.0));
        Self { probs }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn into_probs(self) -> Vec<f64> {
        self.probs
    }

    /// Renormalizes in place; idempotent up to rounding.
    pub fn renormalize(&mut self) {
        let sum: f64 = self.probs.iter().sum();
        for p in &mut self.probs {
            *p /= sum;
        }
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }

    /// Inverse-CDF draw from a uniform variate `u` in `[0, 1)`.
    pub fn sample_with(&self, u: f64) -> usize {
        sample_index(&self.probs, u)
    }
}

impl AsRef<[f64]> for Categorical {
    fn as_ref(&self) -> &[f64] {
        &self.probs
    }
}

fn check_entries(v: &[f64]) -> Result<()> {
    if v.is_empty() {
        return domain("empty probability vector");
    }
    if let Some(bad) = v.iter().find(|p| !p.is_finite() || **p < 0.0) {
        return domain(format!("invalid probability entry {bad}"));
    }
    Ok(())
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Inverse-CDF sampling. Zero-mass entries are never returned.
pub(crate) fn sample_index(probs: &[f64], u: f64) -> usize {
    let total: f64 = probs.iter().sum();
    let target = u * total;
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last_positive = i;
            if target < acc {
                return i;
            }
        }
    }
    last_positive
}

/// Total-variation distance `0.5 * sum |p - q|`.
pub fn total_variation(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// `KL(p || q)` in nats; terms with `p = 0` contribute nothing.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(a, _)| **a > 0.0)
        .map(|(a, b)| a * (a.ln() - b.ln()))
        .sum()
}
