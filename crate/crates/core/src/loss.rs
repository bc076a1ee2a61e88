//! Training and evaluation objectives: the discrete-time NELBO, the
//! continuous-time uniform-noise loss, the continuous-time absorbing-state
//! loss, and the score-entropy form of the uniform-noise bound.
//!
//! All per-token quantities come with gradients with respect to the predicted
//! clean-token row `x_theta`, which the training loop feeds back through the
//! network as the adjoint of its softmax output.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Matrix;
use crate::error::{domain, shape, Error, Result};
use crate::forward::{model_posterior, posterior, sample_latent, PriorSpec, Step};
use crate::model::{Condition, Denoiser};
use crate::schedule::NoiseSchedule;
use crate::vocab::Token;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Objective {
    /// `T`-step discrete NELBO.
    NelboDiscrete { steps: usize },
    UdlmContinuous,
    MdlmContinuous,
    SeddForm,
}

impl Objective {
    pub fn name(&self) -> String {
        match self {
            Self::NelboDiscrete { steps } => format!("nelbo_discrete({steps})"),
            Self::UdlmContinuous => "udlm_continuous".into(),
            Self::MdlmContinuous => "mdlm_continuous".into(),
            Self::SeddForm => "sedd_form".into(),
        }
    }

    /// Checks that the objective is defined for `prior`.
    pub fn check_prior(&self, prior: &PriorSpec) -> Result<()> {
        match (self, prior) {
            (Self::NelboDiscrete { steps: 0 }, _) => domain("discrete NELBO needs T >= 1"),
            (Self::UdlmContinuous | Self::SeddForm, PriorSpec::Uniform { .. }) => Ok(()),
            (Self::UdlmContinuous | Self::SeddForm, _) => domain(format!("{} needs a uniform prior", self.name())),
            (Self::MdlmContinuous, PriorSpec::Absorbing { .. }) => Ok(()),
            (Self::MdlmContinuous, _) => domain("mdlm_continuous needs an absorbing prior"),
            (Self::NelboDiscrete { .. }, _) => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub objective: Objective,
    pub mc_samples_per_example: usize,
    /// Enumerate latents instead of sampling them.
    pub exact_expectation: bool,
}

impl LossSpec {
    pub fn new(objective: Objective) -> Self {
        Self { objective, mc_samples_per_example: 1, exact_expectation: false }
    }
}

/// Monte Carlo mean with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_err: f64,
    pub samples: usize,
}

impl McEstimate {
    pub fn from_samples(values: &[f64]) -> Self {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = if n > 1 { values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64 } else { 0.0 };
        Self { mean, std_err: (var / n as f64).sqrt(), samples: n }
    }

    pub fn variance(&self) -> f64 {
        self.std_err * self.std_err * self.samples as f64
    }
}

/// `KL[q(z_s | z_t, x) || q(z_s | z_t, x_theta)]` for one token.
pub fn diffusion_kl(x: Token, z_t: Token, step: Step, x_theta: &[f64], prior: &PriorSpec) -> Result<f64> {
    let q = posterior(z_t, x, step, prior)?;
    let p = model_posterior(z_t, x_theta, step, prior)?;
    let mut kl = 0.0;
    for (&qk, &pk) in q.probs().iter().zip(&p) {
        if qk == 0.0 {
            kl += pk;
            continue;
        }
        if pk == 0.0 {
            return Ok(f64::INFINITY);
        }
        // q (r - 1 - ln r) with r = p / q: every term is non-negative.
        let d = (pk - qk) / qk;
        kl += qk * (d - d.ln_1p());
    }
    Ok(kl)
}

/// [`diffusion_kl`] and its gradient with respect to `x_theta`.
pub fn diffusion_kl_grad(
    x: Token,
    z_t: Token,
    step: Step,
    x_theta: &[f64],
    prior: &PriorSpec,
) -> Result<(f64, Vec<f64>)> {
    let value = diffusion_kl(x, z_t, step, x_theta, prior)?;
    let n = prior.n();
    let mut grad = vec![0.0; n];
    if let PriorSpec::Absorbing { mask, .. } = prior {
        if z_t != *mask {
            return Ok((value, grad));
        }
    }
    let q = posterior(z_t, x, step, prior)?;
    let den = step.alpha_t * x_theta[z_t] + (1.0 - step.alpha_t) * prior.pi(z_t);
    for (k, g) in grad.iter_mut().enumerate() {
        let qk = q.probs()[k];
        if qk > 0.0 {
            let mixed = step.alpha_s * x_theta[k] + (1.0 - step.alpha_s) * prior.pi(k);
            *g -= qk * step.alpha_s / mixed;
        }
    }
    grad[z_t] += step.alpha_t / den;
    Ok((value, grad))
}

fn check_uniform_token(x: Token, z_t: Token, x_theta: &[f64]) -> Result<usize> {
    let n = x_theta.len();
    if n < 2 {
        return domain("vocabulary needs at least two tokens");
    }
    if x >= n || z_t >= n {
        return domain(format!("tokens ({x}, {z_t}) outside 0..{n}"));
    }
    Ok(n)
}

fn check_clamped(t: f64, schedule: &NoiseSchedule) -> Result<()> {
    if !schedule.contains(t) {
        return domain(format!("time {t} outside clamped range [{}, {}]", schedule.t_min, schedule.t_max));
    }
    Ok(())
}

/// Per-token continuous-time uniform-noise integrand:
/// `(a'/(N a)) [N/xb_i - N/xbt_i - sum_{j != i} (xb_j/xb_i) ln(xbt_i xb_j / (xbt_j xb_i))]`
/// with `xb = N a x + (1 - a) 1`, `xbt = N a x_theta + (1 - a) 1` and `i = z_t`.
pub fn udlm_integrand(x: Token, z_t: Token, t: f64, x_theta: &[f64], schedule: &NoiseSchedule) -> Result<f64> {
    Ok(udlm_integrand_grad(x, z_t, t, x_theta, schedule)?.0)
}

pub fn udlm_integrand_grad(
    x: Token,
    z_t: Token,
    t: f64,
    x_theta: &[f64],
    schedule: &NoiseSchedule,
) -> Result<(f64, Vec<f64>)> {
    let n = check_uniform_token(x, z_t, x_theta)?;
    check_clamped(t, schedule)?;
    let nf = n as f64;
    let a = schedule.alpha_unchecked(t);
    let c = schedule.alpha_prime_unchecked(t) / (nf * a);
    let na = nf * a;
    let xb = |j: usize| na * f64::from(u8::from(j == x)) + 1.0 - a;
    let xbt = |j: usize| na * x_theta[j] + 1.0 - a;
    let i = z_t;
    let (xb_i, xbt_i) = (xb(i), xbt(i));
    let (ln_xb_i, ln_xbt_i) = (xb_i.ln(), xbt_i.ln());
    let mut bracket = nf / xb_i - nf / xbt_i;
    let mut grad = vec![0.0; n];
    let mut ratio_sum = 0.0;
    for j in (0..n).filter(|&j| j != i) {
        let r = xb(j) / xb_i;
        let xbt_j = xbt(j);
        bracket -= r * (ln_xbt_i + xb(j).ln() - xbt_j.ln() - ln_xb_i);
        ratio_sum += r;
        grad[j] = c * r * na / xbt_j;
    }
    grad[i] = c * na * (nf / (xbt_i * xbt_i) - ratio_sum / xbt_i);
    Ok((c * bracket, grad))
}

/// Score-entropy form of the same integrand:
/// `sum_{z' != z} R(z, z') [s(z') - a(z') ln s(z') + a(z')(ln a(z') - 1)]`
/// with forward rate `R(z, z') = -a'/(N a)`, marginal ratio
/// `a(z') = q_t(z' | x) / q_t(z | x)` and model score `s(z') = xbt_{z'} / xbt_z`.
pub fn sedd_form_nelbo(x: Token, z_t: Token, t: f64, x_theta: &[f64], schedule: &NoiseSchedule) -> Result<f64> {
    let n = check_uniform_token(x, z_t, x_theta)?;
    check_clamped(t, schedule)?;
    let nf = n as f64;
    let a = schedule.alpha_unchecked(t);
    let rate = -schedule.alpha_prime_unchecked(t) / (nf * a);
    let marginal = |j: usize| a * f64::from(u8::from(j == x)) + (1.0 - a) / nf;
    let mean = |j: usize| a * x_theta[j] + (1.0 - a) / nf;
    let mut total = 0.0;
    for zp in (0..n).filter(|&j| j != z_t) {
        let ratio = marginal(zp) / marginal(z_t);
        let score = mean(zp) / mean(z_t);
        if ratio <= 0.0 || score <= 0.0 {
            return domain(format!("zero ratio at z'={zp}"));
        }
        total += rate * (score - ratio * score.ln() + ratio * (ratio.ln() - 1.0));
    }
    Ok(total)
}

/// One stochastic training point: time `t`, optional previous grid time `s`
/// (discrete objectives) and the importance weight of the draw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainingPoint {
    pub t: f64,
    pub s: Option<f64>,
    pub weight: f64,
}

pub fn draw_point<R: Rng + ?Sized>(objective: Objective, schedule: &NoiseSchedule, rng: &mut R) -> TrainingPoint {
    match objective {
        Objective::NelboDiscrete { steps } => {
            let i = rng.gen_range(1..=steps);
            let tf = steps as f64;
            TrainingPoint { t: i as f64 / tf, s: Some((i - 1) as f64 / tf), weight: tf }
        }
        _ => TrainingPoint { t: schedule.sample_time(rng), s: None, weight: schedule.t_max - schedule.t_min },
    }
}

/// Loss of one latent sequence at one training point and its gradient with
/// respect to the `L x N` matrix of predicted rows.
pub fn point_loss_grad(
    objective: Objective,
    x: &[Token],
    z: &[Token],
    point: TrainingPoint,
    x_theta: &Matrix,
    prior: &PriorSpec,
    schedule: &NoiseSchedule,
) -> Result<(f64, Matrix)> {
    if x.len() != z.len() || x_theta.shape() != (x.len(), prior.n()) {
        return shape("loss inputs disagree in shape");
    }
    let n = prior.n();
    let mut total = 0.0;
    let mut adj = Matrix::zeros(x.len(), n);
    for (l, (&xv, &zv)) in x.iter().zip(z).enumerate() {
        let row = x_theta.row(l);
        let (v, g) = match objective {
            Objective::NelboDiscrete { .. } => {
                let s = point.s.ok_or_else(|| Error::Domain("discrete point without s".into()))?;
                diffusion_kl_grad(xv, zv, Step::from_times(schedule, point.t, s)?, row, prior)?
            }
            Objective::UdlmContinuous => udlm_integrand_grad(xv, zv, point.t, row, schedule)?,
            Objective::SeddForm => {
                let (_, g) = udlm_integrand_grad(xv, zv, point.t, row, schedule)?;
                (sedd_form_nelbo(xv, zv, point.t, row, schedule)?, g)
            }
            Objective::MdlmContinuous => mdlm_term_grad(xv, zv, point.t, row, prior, schedule)?,
        };
        if !v.is_finite() || g.iter().any(|d| !d.is_finite()) {
            return Err(Error::Numeric(format!("non-finite loss term at t={}, z={z:?}, position {l}", point.t)));
        }
        total += v;
        adj.row_mut(l).iter_mut().zip(&g).for_each(|(a, d)| *a = point.weight * d);
    }
    Ok((point.weight * total, adj))
}

/// `(a'/(1 - a)) ln x_theta[x]` at masked positions, zero elsewhere.
fn mdlm_term_grad(
    x: Token,
    z_t: Token,
    t: f64,
    row: &[f64],
    prior: &PriorSpec,
    schedule: &NoiseSchedule,
) -> Result<(f64, Vec<f64>)> {
    let Some(mask) = prior.mask() else {
        return domain("mdlm loss needs an absorbing prior");
    };
    check_clamped(t, schedule)?;
    let mut grad = vec![0.0; row.len()];
    if z_t != mask {
        return Ok((0.0, grad));
    }
    let w = schedule.alpha_prime_unchecked(t) / (1.0 - schedule.alpha_unchecked(t));
    grad[x] = w / row[x];
    Ok((w * row[x].ln(), grad))
}

/// Continuous-time absorbing-state integrand for a full sequence.
pub fn mdlm_integrand(x: &[Token], z: &[Token], t: f64, x_theta: &Matrix, prior: &PriorSpec, schedule: &NoiseSchedule) -> Result<f64> {
    let mut total = 0.0;
    for (l, (&xv, &zv)) in x.iter().zip(z).enumerate() {
        total += mdlm_term_grad(xv, zv, t, x_theta.row(l), prior, schedule)?.0;
    }
    Ok(total)
}

fn draw_latents<R: Rng + ?Sized>(x: &[Token], alpha: f64, prior: &PriorSpec, rng: &mut R) -> Result<Vec<Token>> {
    x.iter().map(|&v| sample_latent(v, alpha, prior, rng)).collect()
}

fn check_sequence<D: Denoiser + ?Sized>(x: &[Token], model: &D, prior: &PriorSpec) -> Result<()> {
    if x.len() != model.seq_len() || prior.n() != model.vocab_size() {
        return shape(format!(
            "sequence length {} / prior size {} vs model ({}, {})",
            x.len(),
            prior.n(),
            model.seq_len(),
            model.vocab_size()
        ));
    }
    if x.iter().any(|&v| v >= prior.n() || Some(v) == prior.mask()) {
        return domain("clean sequence holds a token outside the data alphabet");
    }
    Ok(())
}

/// Monte Carlo estimate of a sequence-level objective: `samples` independent
/// `(t, z_t)` draws, each weighted so that the mean is unbiased.
pub fn mc_loss<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    objective: Objective,
    x: &[Token],
    model: &D,
    cond: Condition,
    prior: &PriorSpec,
    rng: &mut R,
    samples: usize,
) -> Result<McEstimate> {
    objective.check_prior(prior)?;
    check_sequence(x, model, prior)?;
    if samples == 0 {
        return domain("need at least one Monte Carlo sample");
    }
    let schedule = *model.schedule();
    let mut values = Vec::with_capacity(samples);
    for _ in 0..samples {
        let point = draw_point(objective, &schedule, rng);
        let z = draw_latents(x, schedule.alpha(point.t)?, prior, rng)?;
        let rows = model.predict(&z, point.t, cond)?;
        let v = sequence_value(objective, x, &z, point, &rows, prior, &schedule)?;
        if !v.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss at t={}, z={z:?}", point.t)));
        }
        values.push(v);
    }
    let mut est = McEstimate::from_samples(&values);
    if let Objective::NelboDiscrete { .. } = objective {
        est.mean += prior_kl(x, prior, &schedule)?;
    }
    Ok(est)
}

fn sequence_value(
    objective: Objective,
    x: &[Token],
    z: &[Token],
    point: TrainingPoint,
    rows: &Matrix,
    prior: &PriorSpec,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    let mut total = 0.0;
    for (l, (&xv, &zv)) in x.iter().zip(z).enumerate() {
        let row = rows.row(l);
        total += match objective {
            Objective::NelboDiscrete { .. } => {
                let s = point.s.unwrap_or(0.0);
                diffusion_kl(xv, zv, Step::from_times(schedule, point.t, s)?, row, prior)?
            }
            Objective::UdlmContinuous => udlm_integrand(xv, zv, point.t, row, schedule)?,
            Objective::SeddForm => sedd_form_nelbo(xv, zv, point.t, row, schedule)?,
            Objective::MdlmContinuous => mdlm_term_grad(xv, zv, point.t, row, prior, schedule)?.0,
        };
    }
    Ok(point.weight * total)
}

/// Continuous-time uniform-noise loss of one sequence.
pub fn udlm_loss<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    x: &[Token],
    model: &D,
    cond: Condition,
    rng: &mut R,
    samples: usize,
) -> Result<McEstimate> {
    let prior = PriorSpec::uniform(model.vocab_size())?;
    mc_loss(Objective::UdlmContinuous, x, model, cond, &prior, rng, samples)
}

/// Continuous-time absorbing-state loss of one sequence.
pub fn mdlm_loss<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    x: &[Token],
    model: &D,
    cond: Condition,
    prior: &PriorSpec,
    rng: &mut R,
    samples: usize,
) -> Result<McEstimate> {
    mc_loss(Objective::MdlmContinuous, x, model, cond, prior, rng, samples)
}

/// `KL[q(z_1 | x) || pi]` summed over positions; zero when `alpha(1) = 0`.
pub fn prior_kl(x: &[Token], prior: &PriorSpec, schedule: &NoiseSchedule) -> Result<f64> {
    let a1 = schedule.alpha(1.0)?;
    let mut total = 0.0;
    for &v in x {
        for j in 0..prior.n() {
            let q = a1 * f64::from(u8::from(j == v)) + (1.0 - a1) * prior.pi(j);
            if q > 0.0 {
                total += q * (q / prior.pi(j)).ln();
            }
        }
    }
    Ok(total)
}

/// Exact `T`-step NELBO of one sequence, in nats.
///
/// The grid is `t_i = i / T`. Step `i` contributes
/// `E_{q(z_{t_i} | x)} sum_l KL[q(z_s | z_t, x) || p_theta(z_s | z_t)]` with
/// `s = t_{i-1}`. At `i = 1` the target time is `s = 0`, where the posterior
/// is a point mass on `x`, so that term is the reconstruction loss
/// `-log p_theta(x | z_{1/T})`. Latent sequences are enumerated exhaustively.
pub fn nelbo_discrete_exact<D: Denoiser + ?Sized>(
    x: &[Token],
    model: &D,
    cond: Condition,
    steps: usize,
    prior: &PriorSpec,
) -> Result<f64> {
    Objective::NelboDiscrete { steps }.check_prior(prior)?;
    check_sequence(x, model, prior)?;
    let n = prior.n();
    let len = x.len();
    if (n as f64).powi(len as i32) > 1e6 {
        return domain(format!("exact expectation over {n}^{len} latents is too large"));
    }
    let schedule = *model.schedule();
    let tf = steps as f64;
    let terms: Vec<Result<f64>> = (1..=steps)
        .into_par_iter()
        .map(|i| {
            let (t, s) = (i as f64 / tf, (i - 1) as f64 / tf);
            let step = Step::from_times(&schedule, t, s)?;
            let marg: Vec<Vec<f64>> = x
                .iter()
                .map(|&v| (0..n).map(|j| step.alpha_t * f64::from(u8::from(j == v)) + (1.0 - step.alpha_t) * prior.pi(j)).collect())
                .collect();
            let mut z = vec![0; len];
            let mut acc = 0.0;
            loop {
                let w: f64 = z.iter().enumerate().map(|(l, &zv)| marg[l][zv]).product();
                if w > 0.0 {
                    let rows = model.predict(&z, t, cond)?;
                    let mut kl = 0.0;
                    for l in 0..len {
                        kl += diffusion_kl(x[l], z[l], step, rows.row(l), prior)?;
                    }
                    acc += w * kl;
                }
                if !advance(&mut z, n) {
                    break;
                }
            }
            Ok(acc)
        })
        .collect();
    let mut total = prior_kl(x, prior, &schedule)?;
    for t in terms {
        total += t?;
    }
    if !total.is_finite() {
        return Err(Error::Numeric("non-finite discrete NELBO".into()));
    }
    Ok(total)
}

/// Odometer increment over `0..n` in every coordinate; false after the last.
pub(crate) fn advance(z: &mut [Token], n: usize) -> bool {
    for v in z.iter_mut().rev() {
        *v += 1;
        if *v < n {
            return true;
        }
        *v = 0;
    }
    false
}

/// Monte Carlo `T`-step NELBO: uniformly drawn step index and latents.
pub fn nelbo_discrete_mc<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    x: &[Token],
    model: &D,
    cond: Condition,
    steps: usize,
    prior: &PriorSpec,
    rng: &mut R,
    samples: usize,
) -> Result<McEstimate> {
    mc_loss(Objective::NelboDiscrete { steps }, x, model, cond, prior, rng, samples)
}

/// Bits per character from a sequence NELBO in nats.
pub fn bpc(nelbo_nats: f64, len: usize) -> f64 {
    nelbo_nats / (len as f64 * std::f64::consts::LN_2)
}

pub fn ppl(nelbo_nats: f64, len: usize) -> f64 {
    (nelbo_nats / len as f64).exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DenoiserParams, DenoiserShapes, TabularDenoiser};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sched() -> NoiseSchedule {
        NoiseSchedule::default()
    }

    fn random_row(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
        let s: f64 = w.iter().sum();
        w.into_iter().map(|v| v / s).collect()
    }

    #[test]
    fn kl_is_zero_at_truth_and_non_negative() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for prior in [PriorSpec::uniform(4).unwrap(), PriorSpec::absorbing(4, 3).unwrap()] {
            for _ in 0..200 {
                let x = rng.gen_range(0..3);
                let a_s = rng.gen_range(0.1..1.0);
                let a_t = a_s * rng.gen_range(0.0..1.0);
                let step = Step::new(a_s, a_t).unwrap();
                let z = if prior.mask().is_some() && rng.gen_bool(0.5) { 3 } else if prior.mask().is_some() { x } else { rng.gen_range(0..4) };
                let mut truth = vec![0.0; 4];
                truth[x] = 1.0;
                assert!(diffusion_kl(x, z, step, &truth, &prior).unwrap().abs() < 1e-12);
                let mut row = random_row(&mut rng, 4);
                if let Some(m) = prior.mask() {
                    row[m] = 0.0;
                    let s: f64 = row.iter().sum();
                    row.iter_mut().for_each(|v| *v /= s);
                }
                assert!(diffusion_kl(x, z, step, &row, &prior).unwrap() >= -1e-12);
            }
        }
    }

    #[test]
    fn kl_two_state_worked_value() {
        let step = Step::new(0.8, 0.4).unwrap();
        let q = [27.0 / 28.0, 1.0 / 28.0];
        // Uniform posterior with x replaced by [0.5, 0.5]: numerator terms
        // [a_t|s z + (1-a_t|s)/2] * [a_s x + (1-a_s)/2], denominator 2 a_t x_z + 1 - a_t.
        let r = 0.5f64;
        let mixed = 0.8 * 0.5 + 0.2 * 0.5;
        let p0 = (r + 0.5 * 0.5) * mixed / (0.4 * 0.5 + 0.6 * 0.5);
        let p1 = (0.5 * 0.5) * mixed / (0.4 * 0.5 + 0.6 * 0.5);
        let expected = q[0] * (q[0] / p0).ln() + q[1] * (q[1] / p1).ln();
        let got = diffusion_kl(0, 0, step, &[0.5, 0.5], &PriorSpec::uniform(2).unwrap()).unwrap();
        assert!((got - expected).abs() < 1e-14, "{got} vs {expected}");
    }

    #[test]
    fn kl_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for prior in [PriorSpec::uniform(4).unwrap(), PriorSpec::absorbing(4, 3).unwrap()] {
            for _ in 0..50 {
                let x = rng.gen_range(0..3);
                let a_s = rng.gen_range(0.2..1.0);
                let step = Step::new(a_s, a_s * rng.gen_range(0.1..0.9)).unwrap();
                let z = if prior.mask().is_some() { 3 } else { rng.gen_range(0..4) };
                let row = random_row(&mut rng, 4);
                let (_, g) = diffusion_kl_grad(x, z, step, &row, &prior).unwrap();
                for k in 0..4 {
                    let h = 1e-6;
                    let mut p = row.clone();
                    p[k] += h;
                    let mut m = row.clone();
                    m[k] -= h;
                    let naive = |r: &[f64]| {
                        let q = posterior(z, x, step, &prior).unwrap();
                        let pm = model_posterior(z, r, step, &prior).unwrap();
                        q.probs().iter().zip(&pm).filter(|(a, _)| **a > 0.0).map(|(a, b)| a * (a / b).ln()).sum::<f64>()
                    };
                    let fd = (naive(&p) - naive(&m)) / (2.0 * h);
                    assert!((fd - g[k]).abs() < 1e-5 * fd.abs().max(1.0), "k={k}: fd={fd} g={}", g[k]);
                }
            }
        }
    }

    /// Bregman form of the integrand, written independently of the
    /// implementation: `R sum_j [s_j - r_j - r_j ln(s_j / r_j)]`.
    fn bregman(x: usize, z: usize, t: f64, row: &[f64]) -> f64 {
        let n = row.len() as f64;
        let a = 1.0 - t;
        let xb: Vec<f64> = (0..row.len()).map(|j| n * a * f64::from(u8::from(j == x)) + 1.0 - a).collect();
        let xt: Vec<f64> = row.iter().map(|v| n * a * v + 1.0 - a).collect();
        let rate = 1.0 / (n * a);
        (0..row.len())
            .filter(|&j| j != z)
            .map(|j| {
                let r = xb[j] / xb[z];
                let s = xt[j] / xt[z];
                rate * (s - r - r * (s / r).ln())
            })
            .sum()
    }

    #[test]
    fn integrand_two_state_regression_constant() {
        let v = udlm_integrand(0, 0, 0.5, &[0.75, 0.25], &sched()).unwrap();
        let oracle = bregman(0, 0, 0.5, &[0.75, 0.25]);
        assert!((v - oracle).abs() < 1e-14);
        // r = 0.5 / 1.5, s = 0.75 / 1.25, rate = 1: s - r - r ln(s / r).
        let hand = 0.6 - 1.0 / 3.0 - (1.8f64).ln() / 3.0;
        assert!((v - hand).abs() < 1e-12, "{v}");
        let s = sedd_form_nelbo(0, 0, 0.5, &[0.75, 0.25], &sched()).unwrap();
        assert!((s - v).abs() < 1e-12);
    }

    #[test]
    fn integrand_zero_at_truth_and_matches_kl_limit() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let n = rng.gen_range(2..6);
            let x = rng.gen_range(0..n);
            let z = rng.gen_range(0..n);
            let t = rng.gen_range(0.05..0.95);
            let mut truth = vec![0.0; n];
            truth[x] = 1.0;
            assert!(udlm_integrand(x, z, t, &truth, &sched()).unwrap().abs() < 1e-12);
            let row = random_row(&mut rng, n);
            let v = udlm_integrand(x, z, t, &row, &sched()).unwrap();
            assert!(v >= -1e-10);
            assert!((v - bregman(x, z, t, &row)).abs() < 1e-10 * v.abs().max(1.0));
            let s = t - 1e-6;
            let kl = diffusion_kl(x, z, Step::from_times(&sched(), t, s).unwrap(), &row, &PriorSpec::uniform(n).unwrap())
                .unwrap();
            let limit = kl / (t - s);
            assert!((limit - v).abs() <= 1e-4 * v.abs().max(1e-8), "limit {limit} vs {v}");
        }
    }

    #[test]
    fn integrand_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let n = rng.gen_range(2..6);
            let (x, z) = (rng.gen_range(0..n), rng.gen_range(0..n));
            let t = rng.gen_range(0.05..0.95);
            let row = random_row(&mut rng, n);
            let (_, g) = udlm_integrand_grad(x, z, t, &row, &sched()).unwrap();
            for k in 0..n {
                let h = 1e-6;
                let mut p = row.clone();
                p[k] += h;
                let mut m = row.clone();
                m[k] -= h;
                let fd = (udlm_integrand(x, z, t, &p, &sched()).unwrap() - udlm_integrand(x, z, t, &m, &sched()).unwrap())
                    / (2.0 * h);
                assert!((fd - g[k]).abs() < 1e-5 * fd.abs().max(1.0), "fd={fd} g={}", g[k]);
            }
        }
    }

    #[test]
    fn sedd_form_matches_integrand() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..2000 {
            let n = rng.gen_range(2..7);
            let (x, z) = (rng.gen_range(0..n), rng.gen_range(0..n));
            let t = rng.gen_range(1e-3..0.999);
            let row = random_row(&mut rng, n);
            let a = udlm_integrand(x, z, t, &row, &sched()).unwrap();
            let b = sedd_form_nelbo(x, z, t, &row, &sched()).unwrap();
            assert!((a - b).abs() < 1e-9 * a.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn integrand_rejects_unclamped_time() {
        assert!(udlm_integrand(0, 0, 0.0, &[0.5, 0.5], &sched()).is_err());
        assert!(udlm_integrand(0, 0, 1.0, &[0.5, 0.5], &sched()).is_err());
    }

    #[test]
    fn mdlm_unmasked_positions_contribute_nothing() {
        let prior = PriorSpec::absorbing(3, 2).unwrap();
        let rows = Matrix::from_vec(2, 3, vec![0.3, 0.7, 0.0, 0.6, 0.4, 0.0]);
        let v = mdlm_integrand(&[0, 1], &[0, 1], 0.4, &rows, &prior, &sched()).unwrap();
        assert_eq!(v, 0.0);
        let v = mdlm_integrand(&[0, 1], &[2, 1], 0.4, &rows, &prior, &sched()).unwrap();
        // a'/(1 - a) = -1/t at t = 0.4.
        assert!((v - (-1.0 / 0.4) * 0.3f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn perfect_model_losses_vanish() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = vec![2, 0, 1];
        let uni = PriorSpec::uniform(3).unwrap();
        let d = TabularDenoiser::new(vec![x.clone()], None, 0, uni.clone(), sched()).unwrap();
        let est = udlm_loss(&x, &d, Condition::Dropped, &mut rng, 200).unwrap();
        assert!(est.mean.abs() <= 1e-6);
        assert!(nelbo_discrete_exact(&x, &d, Condition::Dropped, 16, &uni).unwrap() <= 1e-6);
        let abs = PriorSpec::absorbing(4, 3).unwrap();
        let d = TabularDenoiser::new(vec![x.clone()], None, 0, abs.clone(), sched()).unwrap();
        let est = mdlm_loss(&x, &d, Condition::Dropped, &abs, &mut rng, 200).unwrap();
        assert!(est.mean.abs() <= 1e-6);
        assert!(nelbo_discrete_exact(&x, &d, Condition::Dropped, 16, &abs).unwrap() <= 1e-6);
    }

    #[test]
    fn mc_nelbo_agrees_with_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let prior = PriorSpec::uniform(3).unwrap();
        let shapes = DenoiserShapes { vocab: 3, seq_len: 2, embed: 4, hidden: 5, classes: 0, mask: None };
        let model = DenoiserParams::random(shapes, sched(), &mut rng).unwrap();
        let x = [1, 2];
        let exact = nelbo_discrete_exact(&x, &model, Condition::Dropped, 8, &prior).unwrap();
        let mc = nelbo_discrete_mc(&x, &model, Condition::Dropped, 8, &prior, &mut rng, 100_000).unwrap();
        assert!((mc.mean - exact).abs() < 3.0 * mc.std_err, "{} ± {} vs {exact}", mc.mean, mc.std_err);
    }

    #[test]
    fn rate_conversions() {
        assert!((bpc(8.0 * std::f64::consts::LN_2, 8) - 1.0).abs() < 1e-15);
        assert!((ppl(5.0 * 7f64.ln(), 5) - 7.0).abs() < 1e-12);
        let nelbo = 3.7;
        assert!((bpc(nelbo, 4) * std::f64::consts::LN_2 * 4.0 - nelbo).abs() < 1e-12);
    }
}
