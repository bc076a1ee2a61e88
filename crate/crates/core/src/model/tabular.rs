//! Exact Bayes predictors for a finite training set.
//!
//! Given sequences `x_1..x_M` (with optional labels), the denoiser predicts
//! position `l` from the other positions only:
//! `p(x^l | z_t^{-l}) = sum_m w_m onehot(x_m^l)` with
//! `w_m ∝ prod_{k != l} q(z_t^k | x_m^k)`.
//!
//! Under uniform noise this, not the full posterior mean `E[x^l | z_t]`, is
//! the minimizer of the continuous-time objective: plugging it into the
//! reverse rates reproduces the exact ratios `p_t(z') / p_t(z)` for
//! single-position changes. Under absorbing noise the two coincide at masked
//! positions, the only ones the model is consulted on. These models serve as
//! perfectly trained references in tests.

use serde::{Deserialize, Serialize};

use super::{Classifier, Condition, Denoiser};
use crate::autodiff::{log_sum_exp, Matrix};
use crate::data::Dataset;
use crate::error::{domain, Error, Result};
use crate::forward::PriorSpec;
use crate::schedule::NoiseSchedule;
use crate::vocab::Token;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularDenoiser {
    pub prior: PriorSpec,
    pub schedule: NoiseSchedule,
    pub seq_len: usize,
    pub classes: usize,
    pub sequences: Vec<Vec<Token>>,
    pub labels: Option<Vec<usize>>,
}

impl TabularDenoiser {
    pub fn new(
        sequences: Vec<Vec<Token>>,
        labels: Option<Vec<usize>>,
        classes: usize,
        prior: PriorSpec,
        schedule: NoiseSchedule,
    ) -> Result<Self> {
        let seq_len = check_table(&sequences, labels.as_deref(), classes, &prior)?;
        Ok(Self { prior, schedule, seq_len, classes, sequences, labels })
    }

    pub fn from_dataset(data: &Dataset, prior: PriorSpec, schedule: NoiseSchedule) -> Result<Self> {
        Self::new(
            data.sequences.iter().map(|s| s.tokens().to_vec()).collect(),
            data.labels.clone(),
            data.num_classes,
            prior,
            schedule,
        )
    }
}

fn check_table(sequences: &[Vec<Token>], labels: Option<&[usize]>, classes: usize, prior: &PriorSpec) -> Result<usize> {
    let Some(first) = sequences.first() else {
        return domain("tabular model needs at least one sequence");
    };
    let seq_len = first.len();
    if seq_len == 0 || sequences.iter().any(|s| s.len() != seq_len) {
        return domain("tabular model sequences must share a positive length");
    }
    if sequences.iter().flatten().any(|&v| v >= prior.n() || Some(v) == prior.mask()) {
        return domain("tabular sequences must hold data tokens only");
    }
    if let Some(labels) = labels {
        if labels.len() != sequences.len() || labels.iter().any(|&y| y >= classes) {
            return domain("labels must align with sequences and lie below the class count");
        }
    } else if classes > 0 {
        return domain("class count given without labels");
    }
    Ok(seq_len)
}

/// `ln q(z | x)` for every table entry and position: `M x L` values.
fn log_likelihoods(sequences: &[Vec<Token>], z: &[Token], alpha: f64, prior: &PriorSpec) -> Vec<Vec<f64>> {
    sequences
        .iter()
        .map(|x| {
            x.iter()
                .zip(z)
                .map(|(&xv, &zv)| {
                    let p = alpha * f64::from(u8::from(xv == zv)) + (1.0 - alpha) * prior.pi(zv);
                    p.ln()
                })
                .collect()
        })
        .collect()
}

impl Denoiser for TabularDenoiser {
    fn vocab_size(&self) -> usize {
        self.prior.n()
    }
    fn seq_len(&self) -> usize {
        self.seq_len
    }
    fn num_classes(&self) -> usize {
        self.classes
    }
    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn predict(&self, z: &[Token], t: f64, cond: Condition) -> Result<Matrix> {
        self.check_input(z, t, cond)?;
        let n = self.prior.n();
        let alpha = self.schedule.alpha(t)?;
        let ll = log_likelihoods(&self.sequences, z, alpha, &self.prior);
        let keep = |m: usize| match (cond, &self.labels) {
            (Condition::Class(k), Some(labels)) => labels[m] == k,
            _ => true,
        };
        let mut out = Matrix::zeros(self.seq_len, n);
        for l in 0..self.seq_len {
            // Leave position l out: its own latent carries no weight.
            let logw: Vec<f64> = ll
                .iter()
                .enumerate()
                .map(|(m, row)| {
                    if !keep(m) {
                        return f64::NEG_INFINITY;
                    }
                    row.iter().enumerate().filter(|&(k, _)| k != l).map(|(_, v)| v).sum()
                })
                .collect();
            let total = log_sum_exp(&logw);
            if total == f64::NEG_INFINITY {
                // No table entry explains the other positions: uniform over data tokens.
                let data: Vec<Token> = (0..n).filter(|&v| Some(v) != self.prior.mask()).collect();
                for &v in &data {
                    out.set(l, v, 1.0 / data.len() as f64);
                }
                continue;
            }
            for (x, &lw) in self.sequences.iter().zip(&logw) {
                let w = (lw - total).exp();
                if w > 0.0 {
                    out.data[l * n + x[l]] += w;
                }
            }
        }
        Ok(out)
    }
}

/// Exact `p(y | z_t)` for a labeled finite training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularClassifier {
    pub prior: PriorSpec,
    pub schedule: NoiseSchedule,
    pub seq_len: usize,
    pub classes: usize,
    pub sequences: Vec<Vec<Token>>,
    pub labels: Vec<usize>,
}

impl TabularClassifier {
    pub fn new(
        sequences: Vec<Vec<Token>>,
        labels: Vec<usize>,
        classes: usize,
        prior: PriorSpec,
        schedule: NoiseSchedule,
    ) -> Result<Self> {
        if classes == 0 {
            return domain("classifier needs at least one class");
        }
        let seq_len = check_table(&sequences, Some(&labels), classes, &prior)?;
        Ok(Self { prior, schedule, seq_len, classes, sequences, labels })
    }

    pub fn from_dataset(data: &Dataset, prior: PriorSpec, schedule: NoiseSchedule) -> Result<Self> {
        let Some(labels) = data.labels.clone() else {
            return Err(Error::Dataset("classifier needs a labeled dataset".into()));
        };
        Self::new(
            data.sequences.iter().map(|s| s.tokens().to_vec()).collect(),
            labels,
            data.num_classes,
            prior,
            schedule,
        )
    }

    fn check(&self, z: &[Token], t: f64) -> Result<f64> {
        super::mlp::check_tokens(z, self.seq_len, self.prior.n())?;
        self.schedule.alpha(t)
    }

    /// Per-class `ln sum_{m in class} prod_l q(z^l | x_m^l)`.
    fn class_log_mass(&self, ll: &[Vec<f64>]) -> Vec<f64> {
        (0..self.classes)
            .map(|k| {
                let terms: Vec<f64> = ll
                    .iter()
                    .zip(&self.labels)
                    .filter(|(_, &y)| y == k)
                    .map(|(row, _)| row.iter().sum())
                    .collect();
                log_sum_exp(&terms)
            })
            .collect()
    }
}

impl Classifier for TabularClassifier {
    fn num_classes(&self) -> usize {
        self.classes
    }
    fn seq_len(&self) -> usize {
        self.seq_len
    }
    fn vocab_size(&self) -> usize {
        self.prior.n()
    }

    fn log_probs(&self, z: &[Token], t: f64) -> Result<Vec<f64>> {
        let alpha = self.check(z, t)?;
        let ll = log_likelihoods(&self.sequences, z, alpha, &self.prior);
        let mass = self.class_log_mass(&ll);
        let total = log_sum_exp(&mass);
        if total == f64::NEG_INFINITY {
            return Err(Error::Numeric("no training sequence explains the latent".into()));
        }
        Ok(mass.iter().map(|m| m - total).collect())
    }

    /// The relaxed input `Z` enters through `prod_l <Z_l, q(. | x_m^l)>`, which
    /// is multilinear in `Z`, so the gradient at a one-hot point is exact.
    fn log_prob_with_input_grad(&self, z: &[Token], t: f64, y: usize) -> Result<(f64, Matrix)> {
        if y >= self.classes {
            return domain(format!("class {y} >= {}", self.classes));
        }
        let alpha = self.check(z, t)?;
        let n = self.prior.n();
        let ll = log_likelihoods(&self.sequences, z, alpha, &self.prior);
        let mass = self.class_log_mass(&ll);
        let total = log_sum_exp(&mass);
        if !mass[y].is_finite() {
            return Err(Error::Numeric(format!("class {y} has zero probability at this latent")));
        }
        let q = |x: Token, v: Token| alpha * f64::from(u8::from(x == v)) + (1.0 - alpha) * self.prior.pi(v);
        let mut grad = Matrix::zeros(self.seq_len, n);
        for (m, (x, row)) in self.sequences.iter().zip(&ll).enumerate() {
            let in_y = self.labels[m] == y;
            for l in 0..self.seq_len {
                let excluded: f64 = row.iter().enumerate().filter(|&(j, _)| j != l).map(|(_, v)| v).sum();
                if excluded == f64::NEG_INFINITY {
                    continue;
                }
                let w_all = (excluded - total).exp();
                let w_y = if in_y { (excluded - mass[y]).exp() } else { 0.0 };
                for v in 0..n {
                    grad.data[l * n + v] += (w_y - w_all) * q(x[l], v);
                }
            }
        }
        Ok((mass[y] - total, grad))
    }
}
