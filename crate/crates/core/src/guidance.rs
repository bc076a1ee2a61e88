//! Guidance transforms of per-position reverse distributions.
//!
//! Every transform acts on the rows `p(z_s^l | z_t)` of one reverse step:
//!
//! * classifier-free: `p_cond^gamma * p_uncond^(1 - gamma)`, renormalized;
//! * classifier-based: `p(v) * p_phi(y | z_t with position l set to v)^gamma`,
//!   renormalized over the `N` candidates `v`;
//! * first-order classifier-based: the same, with the classifier log-probability
//!   of each single-position edit replaced by its linearization around `z_t`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::log_sum_exp;
use crate::categorical::Categorical;
use crate::error::{domain, shape, Error, Result};
use crate::model::Classifier;
use crate::vocab::Token;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuidanceMode {
    None,
    Cfg,
    CbgExact,
    CbgTaylor,
}

impl GuidanceMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "cfg" => Ok(Self::Cfg),
            "cbg" | "cbg_exact" | "cbg-exact" => Ok(Self::CbgExact),
            "cbg_taylor" | "cbg-taylor" => Ok(Self::CbgTaylor),
            _ => domain(format!("unknown guidance mode {s:?}")),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Cfg => "cfg",
            Self::CbgExact => "cbg_exact",
            Self::CbgTaylor => "cbg_taylor",
        }
    }

    pub fn needs_classifier(&self) -> bool {
        matches!(self, Self::CbgExact | Self::CbgTaylor)
    }
}

/// Time at which classifier guidance scores candidate sequences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierTime {
    /// The destination time `s` of the step (candidates are `z_s` hypotheses).
    #[default]
    Destination,
    /// The source time `t`.
    Source,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub mode: GuidanceMode,
    pub gamma: f64,
    pub target_class: Option<usize>,
    #[serde(default)]
    pub classifier_time: ClassifierTime,
}

impl GuidanceConfig {
    pub fn none() -> Self {
        Self { mode: GuidanceMode::None, gamma: 1.0, target_class: None, classifier_time: ClassifierTime::Destination }
    }

    pub fn new(mode: GuidanceMode, gamma: f64, target_class: Option<usize>) -> Self {
        Self { mode, gamma, target_class, classifier_time: ClassifierTime::Destination }
    }

    /// Checks `gamma` and the presence and range of the target class.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return domain(format!("gamma must be finite and non-negative, got {}", self.gamma));
        }
        match (self.mode, self.target_class) {
            (GuidanceMode::None, _) => Ok(()),
            (_, None) => domain(format!("{} guidance needs a target class", self.mode.name())),
            (_, Some(y)) if y >= num_classes => domain(format!("target class {y} >= {num_classes}")),
            _ => Ok(()),
        }
    }
}

/// Normalizes log-weights; `-inf` entries get zero mass.
fn normalize_logits(logits: &[f64]) -> Result<Categorical> {
    let lse = log_sum_exp(logits);
    if !lse.is_finite() {
        return Err(Error::Numeric("tempered row has no mass to normalize".into()));
    }
    Ok(Categorical::from_raw(logits.iter().map(|v| (v - lse).exp()).collect()))
}

/// `a * ln p` with `0 * ln 0 = 0`.
fn scaled_log(a: f64, p: f64) -> f64 {
    if a == 0.0 {
        0.0
    } else if p == 0.0 {
        f64::NEG_INFINITY
    } else {
        a * p.ln()
    }
}

/// Classifier-free combination of conditional and unconditional rows.
///
/// A zero probability with a non-zero exponent removes the entry, so the
/// result is supported on the intersection of the supports of the factors
/// that carry weight.
pub fn cfg_combine(cond: &[Categorical], uncond: &[Categorical], gamma: f64) -> Result<Vec<Categorical>> {
    if cond.len() != uncond.len() || cond.iter().zip(uncond).any(|(a, b)| a.len() != b.len()) {
        return shape("conditional and unconditional rows disagree in shape");
    }
    if !gamma.is_finite() {
        return domain("gamma must be finite");
    }
    if gamma == 1.0 {
        return Ok(cond.to_vec());
    }
    if gamma == 0.0 {
        return Ok(uncond.to_vec());
    }
    cond.iter()
        .zip(uncond)
        .map(|(c, u)| {
            let logits: Vec<f64> = c
                .probs()
                .iter()
                .zip(u.probs())
                .map(|(&pc, &pu)| scaled_log(gamma, pc) + scaled_log(1.0 - gamma, pu))
                .collect();
            normalize_logits(&logits)
        })
        .collect()
}

fn check_rows<C: Classifier + ?Sized>(classifier: &C, z_t: &[Token], rows: &[Categorical], y: usize, gamma: f64) -> Result<()> {
    if z_t.len() != classifier.seq_len() || rows.len() != z_t.len() {
        return shape("sequence, rows and classifier disagree in length");
    }
    if rows.iter().any(|r| r.len() != classifier.vocab_size()) {
        return shape("row width disagrees with the classifier vocabulary");
    }
    if y >= classifier.num_classes() {
        return domain(format!("target class {y} >= {}", classifier.num_classes()));
    }
    if !(gamma.is_finite() && gamma >= 0.0) {
        return domain(format!("gamma must be finite and non-negative, got {gamma}"));
    }
    Ok(())
}

fn temper(rows: &[Categorical], scores: &[Vec<f64>], gamma: f64) -> Result<Vec<Categorical>> {
    if gamma == 0.0 {
        return Ok(rows.to_vec());
    }
    rows.iter()
        .zip(scores)
        .map(|(row, s)| {
            let logits: Vec<f64> = row.probs().iter().zip(s).map(|(&p, &lp)| scaled_log(1.0, p) + gamma * lp).collect();
            normalize_logits(&logits)
        })
        .collect()
}

/// Exact classifier-based guidance: `L * N` classifier evaluations, one per
/// single-position edit of `z_t`.
pub fn cbg_exact<C: Classifier + ?Sized>(
    classifier: &C,
    z_t: &[Token],
    time: f64,
    rows: &[Categorical],
    y: usize,
    gamma: f64,
) -> Result<Vec<Categorical>> {
    check_rows(classifier, z_t, rows, y, gamma)?;
    let n = classifier.vocab_size();
    let len = z_t.len();
    let flat: Vec<Result<f64>> = (0..len * n)
        .into_par_iter()
        .map(|k| {
            let (l, v) = (k / n, k % n);
            let mut cand = z_t.to_vec();
            cand[l] = v;
            Ok(classifier.log_probs(&cand, time)?[y])
        })
        .collect();
    let mut scores = vec![vec![0.0; n]; len];
    for (k, r) in flat.into_iter().enumerate() {
        scores[k / n][k % n] = r?;
    }
    temper(rows, &scores, gamma)
}

/// First-order classifier-based guidance: one classifier evaluation with its
/// input gradient. The score of editing position `l` to `v` is
/// `log p(y | z_t) + grad[l][v] - grad[l][z_t^l]`.
pub fn cbg_taylor<C: Classifier + ?Sized>(
    classifier: &C,
    z_t: &[Token],
    time: f64,
    rows: &[Categorical],
    y: usize,
    gamma: f64,
) -> Result<Vec<Categorical>> {
    check_rows(classifier, z_t, rows, y, gamma)?;
    let (lp, grad) = classifier.log_prob_with_input_grad(z_t, time, y)?;
    let scores: Vec<Vec<f64>> = z_t
        .iter()
        .enumerate()
        .map(|(l, &cur)| {
            let g = grad.row(l);
            g.iter().map(|&gv| lp + gv - g[cur]).collect()
        })
        .collect();
    temper(rows, &scores, gamma)
}
