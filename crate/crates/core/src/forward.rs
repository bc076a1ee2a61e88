//! The interpolating corruption process `q(z_t | x) = Cat(alpha_t x + (1 - alpha_t) pi)`
//! and its exact posteriors `q(z_s | z_t, x)`.
//!
//! The general-prior posterior is implemented once; uniform and absorbing
//! priors have closed-form fast paths that are tested against it.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::categorical::{sample_index, Categorical};
use crate::error::{domain, shape, Error, Result};
use crate::schedule::NoiseSchedule;
use crate::vocab::Token;

/// The limiting distribution `pi` of the forward process.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PriorSpec {
    Uniform { n: usize },
    Absorbing { n: usize, mask: Token },
    General { pi: Categorical },
}

impl PriorSpec {
    pub fn uniform(n: usize) -> Result<Self> {
        if n < 2 {
            return domain("uniform prior needs N >= 2");
        }
        Ok(Self::Uniform { n })
    }

    pub fn absorbing(n: usize, mask: Token) -> Result<Self> {
        if n < 2 || mask >= n {
            return domain(format!("absorbing prior needs mask < N, got mask={mask}, N={n}"));
        }
        Ok(Self::Absorbing { n, mask })
    }

    pub fn general(pi: Categorical) -> Self {
        Self::General { pi }
    }

    pub fn n(&self) -> usize {
        match self {
            Self::Uniform { n } | Self::Absorbing { n, .. } => *n,
            Self::General { pi } => pi.len(),
        }
    }

    /// `pi_j`.
    pub fn pi(&self, j: Token) -> f64 {
        match self {
            Self::Uniform { n } => 1.0 / *n as f64,
            Self::Absorbing { mask, .. } => {
                if j == *mask {
                    1.0
                } else {
                    0.0
                }
            }
            Self::General { pi } => pi.probs()[j],
        }
    }

    pub fn pi_vector(&self) -> Vec<f64> {
        (0..self.n()).map(|j| self.pi(j)).collect()
    }

    pub fn mask(&self) -> Option<Token> {
        match self {
            Self::Absorbing { mask, .. } => Some(*mask),
            _ => None,
        }
    }
}

/// Signal levels `(alpha_s, alpha_t)` of one reverse step from `t` to `s <= t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step {
    pub alpha_s: f64,
    pub alpha_t: f64,
}

impl Step {
    pub fn new(alpha_s: f64, alpha_t: f64) -> Result<Self> {
        if !(alpha_s > 0.0 && alpha_s <= 1.0 && alpha_t >= 0.0 && alpha_t <= alpha_s) {
            return domain(format!(
                "need 0 <= alpha_t <= alpha_s <= 1 and alpha_s > 0, got alpha_s={alpha_s}, alpha_t={alpha_t}"
            ));
        }
        Ok(Self { alpha_s, alpha_t })
    }

    pub fn from_times(schedule: &NoiseSchedule, t: f64, s: f64) -> Result<Self> {
        if s > t {
            return domain(format!("reverse step needs s <= t, got s={s}, t={t}"));
        }
        Self::new(schedule.alpha(s)?, schedule.alpha(t)?)
    }

    /// `alpha_{t|s} = alpha_t / alpha_s`.
    pub fn ratio(&self) -> f64 {
        self.alpha_t / self.alpha_s
    }
}

/// `q(z_t | x)` for a clean token `x`.
pub fn marginal(x: Token, alpha_t: f64, prior: &PriorSpec) -> Result<Categorical> {
    let n = prior.n();
    if x >= n {
        return domain(format!("token {x} outside 0..{n}"));
    }
    check_alpha(alpha_t)?;
    let probs = (0..n)
        .map(|j| alpha_t * f64::from(u8::from(j == x)) + (1.0 - alpha_t) * prior.pi(j))
        .collect();
    Ok(Categorical::from_raw(probs))
}

/// Draws `z_t ~ q(z_t | x)`.
pub fn sample_latent<R: Rng + ?Sized>(x: Token, alpha_t: f64, prior: &PriorSpec, rng: &mut R) -> Result<Token> {
    let m = marginal(x, alpha_t, prior)?;
    Ok(sample_index(m.probs(), rng.gen::<f64>()))
}

/// Exact posterior `q(z_s | z_t, x)` for a clean token `x`, dispatched to the
/// prior-specific closed form. Probability-zero pairs `(z_t, x)` are errors.
pub fn posterior(z_t: Token, x: Token, step: Step, prior: &PriorSpec) -> Result<Categorical> {
    let n = prior.n();
    if x >= n || z_t >= n {
        return domain(format!("tokens ({z_t}, {x}) outside 0..{n}"));
    }
    let probs = match prior {
        PriorSpec::Uniform { .. } => posterior_uniform_probs(z_t, &one_hot(n, x), step)?,
        PriorSpec::Absorbing { mask, .. } => {
            if z_t != *mask && z_t != x {
                return Err(zero_latent(z_t));
            }
            posterior_absorbing_probs(z_t, &one_hot(n, x), step, *mask)?
        }
        PriorSpec::General { .. } => posterior_general(z_t, &one_hot(n, x), step, prior)?,
    };
    Ok(Categorical::from_raw(probs))
}

/// Uniform-prior closed form, with `x` one-hot.
pub fn posterior_uniform(z_t: Token, x: Token, step: Step, n: usize) -> Result<Categorical> {
    if x >= n || z_t >= n {
        return domain(format!("tokens ({z_t}, {x}) outside 0..{n}"));
    }
    posterior_uniform_probs(z_t, &one_hot(n, x), step).map(Categorical::from_raw)
}

/// The denoising distribution `p_theta(z_s | z_t) = q(z_s | z_t, x = x_theta)`,
/// where `x_theta` is a predicted distribution over clean tokens.
///
/// For absorbing priors an unmasked `z_t` is carried over unchanged
/// regardless of `x_theta`.
pub fn model_posterior(z_t: Token, x_theta: &[f64], step: Step, prior: &PriorSpec) -> Result<Vec<f64>> {
    let n = prior.n();
    if x_theta.len() != n {
        return shape(format!("x_theta has {} entries, prior has {n}", x_theta.len()));
    }
    if z_t >= n {
        return domain(format!("token {z_t} outside 0..{n}"));
    }
    match prior {
        PriorSpec::Uniform { .. } => posterior_uniform_probs(z_t, x_theta, step),
        PriorSpec::Absorbing { mask, .. } => posterior_absorbing_probs(z_t, x_theta, step, *mask),
        PriorSpec::General { .. } => posterior_general(z_t, x_theta, step, prior),
    }
}

/// Direct evaluation of the interpolating posterior for any prior and any
/// mean vector `x` (one-hot or predicted):
///
/// `[a_{t|s} z_t + (1 - a_{t|s}) 1 pi^T z_t] * [a_s x + (1 - a_s) pi] / (a_t <z_t, x> + (1 - a_t) <z_t, pi>)`.
pub fn posterior_general(z_t: Token, x: &[f64], step: Step, prior: &PriorSpec) -> Result<Vec<f64>> {
    let n = prior.n();
    let ratio = step.ratio();
    let pi_z = prior.pi(z_t);
    let den = step.alpha_t * x[z_t] + (1.0 - step.alpha_t) * pi_z;
    if den <= 0.0 {
        return Err(zero_latent(z_t));
    }
    Ok((0..n)
        .map(|j| {
            let keep = if j == z_t { ratio } else { 0.0 };
            let from_t = keep + (1.0 - ratio) * pi_z;
            let from_x = step.alpha_s * x[j] + (1.0 - step.alpha_s) * prior.pi(j);
            from_t * from_x / den
        })
        .collect())
}

/// Uniform-prior closed form:
/// `[N a_t z_t*x + (a_{t|s} - a_t) z_t + (a_s - a_t) x + (a_s - a_t)(1 - a_s)/(N a_s) 1] / (N a_t <z_t, x> + 1 - a_t)`.
pub(crate) fn posterior_uniform_probs(z_t: Token, x: &[f64], step: Step) -> Result<Vec<f64>> {
    let n = x.len();
    let nf = n as f64;
    let (a_s, a_t) = (step.alpha_s, step.alpha_t);
    let den = nf * a_t * x[z_t] + 1.0 - a_t;
    if den <= 0.0 {
        return Err(zero_latent(z_t));
    }
    let floor = (a_s - a_t) * (1.0 - a_s) / (nf * a_s);
    Ok((0..n)
        .map(|j| {
            let mut num = (a_s - a_t) * x[j] + floor;
            if j == z_t {
                num += nf * a_t * x[j] + (step.ratio() - a_t);
            }
            num / den
        })
        .collect())
}

/// Absorbing-prior closed form. Unmasked latents are fixed points; a masked
/// latent unmasks to `x` with probability `(a_s - a_t) / (1 - a_t)` when `x`
/// carries no mask mass.
pub(crate) fn posterior_absorbing_probs(z_t: Token, x: &[f64], step: Step, mask: Token) -> Result<Vec<f64>> {
    let n = x.len();
    if z_t != mask {
        return Ok(one_hot(n, z_t));
    }
    let (a_s, a_t) = (step.alpha_s, step.alpha_t);
    let den = a_t * x[mask] + 1.0 - a_t;
    if den <= 0.0 {
        return Err(zero_latent(z_t));
    }
    Ok((0..n)
        .map(|j| if j == mask { (a_s * x[mask] + 1.0 - a_s) / den } else { (a_s - a_t) * x[j] / den })
        .collect())
}

pub(crate) fn one_hot(n: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[i] = 1.0;
    v
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return domain(format!("alpha {alpha} outside [0, 1]"));
    }
    Ok(())
}

fn zero_latent(z_t: Token) -> Error {
    Error::Domain(format!("latent {z_t} has zero probability under the forward process"))
}
