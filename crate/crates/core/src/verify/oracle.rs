//! Reference computations that avoid the arithmetic of the modules they
//! check: posteriors come from Bayes' rule on forward marginals, tempering
//! is done in probability space, and the continuous objective is integrated
//! numerically.

use crate::categorical::Categorical;
use crate::error::{domain, shape, Error, Result};
use crate::forward::PriorSpec;
use crate::model::{Classifier, Condition, Denoiser};
use crate::schedule::NoiseSchedule;
use crate::vocab::Token;

const ENUMERATION_LIMIT: usize = 1_000_000;

/// All `N^L` sequences in lexicographic order.
pub fn enumerate_sequences(n: usize, len: usize) -> Result<Vec<Vec<Token>>> {
    let count = (n as u128).checked_pow(len as u32).unwrap_or(u128::MAX);
    if n == 0 || count > ENUMERATION_LIMIT as u128 {
        return domain(format!("cannot enumerate {n}^{len} sequences"));
    }
    let count = count as usize;
    Ok((0..count)
        .map(|mut k| {
            let mut s = vec![0; len];
            for v in s.iter_mut().rev() {
                *v = k % n;
                k /= n;
            }
            s
        })
        .collect())
}

/// `Cat(a x + (1 - a) pi)` for a mean vector `x`.
fn mix(x: &[f64], a: f64, pi: &[f64]) -> Vec<f64> {
    x.iter().zip(pi).map(|(xv, p)| a * xv + (1.0 - a) * p).collect()
}

fn point(n: usize, i: usize) -> Vec<f64> {
    (0..n).map(|j| if j == i { 1.0 } else { 0.0 }).collect()
}

/// `q(z_s | z_t, x)` as `q(z_t | z_s) q(z_s | x)` normalized over `z_s`,
/// with both factors read off forward marginals. `x` may be a mean vector.
fn bayes_rows(z_t: Token, x: &[f64], t: f64, s: f64, prior: &PriorSpec, schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    let n = prior.n();
    let pi = prior.pi_vector();
    let (a_t, a_s) = (schedule.alpha(t)?, schedule.alpha(s)?);
    let from_x = mix(x, a_s, &pi);
    let mut w: Vec<f64> = (0..n)
        .map(|zs| {
            let to_t = mix(&point(n, zs), a_t / a_s, &pi)[z_t];
            to_t * from_x[zs]
        })
        .collect();
    let total: f64 = w.iter().sum();
    if total <= 0.0 {
        return Err(Error::Domain(format!("latent {z_t} has zero probability")));
    }
    w.iter_mut().for_each(|v| *v /= total);
    Ok(w)
}

/// Reference for `q(z_s | z_t, x = mean)` with a mean vector in place of the
/// clean token, as used by the denoising distribution.
pub fn bayes_mean_posterior_oracle(
    z_t: Token,
    mean: &[f64],
    t: f64,
    s: f64,
    prior: &PriorSpec,
    schedule: &NoiseSchedule,
) -> Result<Vec<f64>> {
    if mean.len() != prior.n() || z_t >= prior.n() {
        return shape("mean vector, latent and prior disagree");
    }
    bayes_rows(z_t, mean, t, s, prior, schedule)
}

/// Reference for the clean-token posterior.
pub fn bayes_posterior_oracle(
    z_t: Token,
    x: Token,
    t: f64,
    s: f64,
    prior: &PriorSpec,
    schedule: &NoiseSchedule,
) -> Result<Categorical> {
    let n = prior.n();
    if x >= n || z_t >= n {
        return domain(format!("tokens ({z_t}, {x}) outside 0..{n}"));
    }
    if !(s < t) {
        return domain(format!("need s < t, got s={s}, t={t}"));
    }
    Categorical::new(bayes_rows(z_t, &point(n, x), t, s, prior, schedule)?)
}

/// Exact `-log p(x)` under the `T`-step ancestral model, summing over every
/// latent path. The path distribution is propagated step by step over all
/// `N^L` states.
pub fn exact_reverse_nll<D: Denoiser + ?Sized>(
    model: &D,
    x: &[Token],
    steps: usize,
    prior: &PriorSpec,
    cond: Condition,
) -> Result<f64> {
    let n = prior.n();
    if x.len() != model.seq_len() || model.vocab_size() != n {
        return shape("sequence, prior and model disagree");
    }
    if steps == 0 {
        return domain("need at least one step");
    }
    let states = enumerate_sequences(n, x.len())?;
    if states.len() > 4096 {
        return domain("too many latent states for exact path summation");
    }
    let schedule = *model.schedule();
    let pi = prior.pi_vector();
    let mut dist: Vec<f64> = states.iter().map(|z| z.iter().map(|&v| pi[v]).product()).collect();
    let index = |z: &[Token]| z.iter().fold(0usize, |k, &v| k * n + v);
    let tf = steps as f64;
    for i in (1..=steps).rev() {
        let (t, s) = (i as f64 / tf, (i - 1) as f64 / tf);
        let mut next = vec![0.0; states.len()];
        for (zi, z) in states.iter().enumerate() {
            if dist[zi] == 0.0 {
                continue;
            }
            let xt = model.predict(z, t, cond)?;
            let rows: Vec<Vec<f64>> = z
                .iter()
                .enumerate()
                .map(|(l, &v)| bayes_rows(v, xt.row(l), t, s, prior, &schedule))
                .collect::<Result<_>>()?;
            if i == 1 {
                let p: f64 = x.iter().enumerate().map(|(l, &v)| rows[l][v]).product();
                next[index(x)] += dist[zi] * p;
                continue;
            }
            for (wi, w) in states.iter().enumerate() {
                let p: f64 = w.iter().enumerate().map(|(l, &v)| rows[l][v]).product();
                next[wi] += dist[zi] * p;
            }
        }
        dist = next;
    }
    let p = dist[index(x)];
    if !(p > 0.0) {
        return Err(Error::Numeric("sequence has zero probability under the model".into()));
    }
    Ok(-p.ln())
}

/// Classifier-tempered reverse rows by literal normalization:
/// `w(v) = p(v) * p(y | z_t with position l set to v)^gamma / sum`.
pub fn tempered_token_oracle<C: Classifier + ?Sized>(
    classifier: &C,
    z_t: &[Token],
    time: f64,
    rows: &[Categorical],
    y: usize,
    gamma: f64,
) -> Result<Vec<Categorical>> {
    let n = classifier.vocab_size();
    if rows.len() != z_t.len() {
        return shape("rows and sequence disagree in length");
    }
    let mut out = Vec::with_capacity(rows.len());
    for (l, row) in rows.iter().enumerate() {
        let mut like = Vec::with_capacity(n);
        for v in 0..n {
            let mut cand = z_t.to_vec();
            cand[l] = v;
            like.push(classifier.log_probs(&cand, time)?[y].exp());
        }
        // Dividing by the largest likelihood keeps large gamma finite.
        let top = like.iter().cloned().fold(0.0, f64::max);
        let w: Vec<f64> = row.probs().iter().zip(&like).map(|(p, c)| p * (c / top).powf(gamma)).collect();
        let total: f64 = w.iter().sum();
        if !(total > 0.0) {
            return Err(Error::Numeric("tempered row has no mass".into()));
        }
        out.push(Categorical::new(w.iter().map(|v| v / total).collect())?);
    }
    Ok(out)
}

/// Uniform-noise integrand in its Bregman form,
/// `rate * sum_{j != z} r_j (u_j - 1 - ln u_j)` with `r_j = xb_j / xb_z`,
/// `u_j = (xbt_j / xbt_z) / r_j`, evaluated through `ln_1p` for accuracy when
/// `u_j` is close to one.
pub fn udlm_integrand_oracle(x: Token, z: Token, t: f64, row: &[f64], schedule: &NoiseSchedule) -> Result<f64> {
    let n = row.len();
    let nf = n as f64;
    let a = schedule.alpha(t)?;
    let rate = -schedule.alpha_prime(t)? / (nf * a);
    let xb = |j: usize| nf * a * if j == x { 1.0 } else { 0.0 } + 1.0 - a;
    let xt = |j: usize| nf * a * row[j] + 1.0 - a;
    let mut total = 0.0;
    for j in (0..n).filter(|&j| j != z) {
        let r = xb(j) / xb(z);
        let d = (xt(j) * xb(z)) / (xt(z) * xb(j)) - 1.0;
        total += r * (d - d.ln_1p());
    }
    Ok(rate * total)
}

/// Tanh-sinh quadrature of `f` over `(0, 1)`. Node spacing is halved until
/// two successive estimates agree to `tol`.
pub fn tanh_sinh(mut f: impl FnMut(f64) -> Result<f64>, tol: f64) -> Result<f64> {
    use std::f64::consts::FRAC_PI_2;
    const EXTENT: f64 = 4.5;
    let mut node = |x: f64| -> Result<f64> {
        let u = FRAC_PI_2 * x.sinh();
        // t and 1 - t in forms that keep full relative precision.
        let t = 1.0 / (1.0 + (-2.0 * u).exp());
        let one_minus = 1.0 / (1.0 + (2.0 * u).exp());
        if t < 1e-14 || one_minus < 1e-14 {
            return Ok(0.0);
        }
        let w = 0.5 * FRAC_PI_2 * x.cosh() / u.cosh().powi(2);
        Ok(w * f(t)?)
    };
    let mut h = 1.0;
    let mut sum = node(0.0)?;
    let mut k = 1;
    while k as f64 * h <= EXTENT {
        sum += node(k as f64 * h)? + node(-(k as f64) * h)?;
        k += 1;
    }
    let mut estimate = h * sum;
    for _ in 0..10 {
        h /= 2.0;
        let mut k = 1;
        while k as f64 * h <= EXTENT {
            sum += node(k as f64 * h)? + node(-(k as f64) * h)?;
            k += 2;
        }
        let next = h * sum;
        if (next - estimate).abs() < tol {
            return Ok(next);
        }
        estimate = next;
    }
    Err(Error::Numeric(format!("quadrature did not reach tolerance {tol}")))
}

/// `T -> infinity` uniform-noise objective of one sequence:
/// `int_0^1 E_{q(z_t | x)} sum_l integrand dt`, with the expectation taken
/// exactly over all `N^L` latents.
pub fn continuous_nelbo_oracle<D: Denoiser + ?Sized>(model: &D, x: &[Token], cond: Condition) -> Result<f64> {
    let n = model.vocab_size();
    let schedule = *model.schedule();
    let states = enumerate_sequences(n, x.len())?;
    let pi = vec![1.0 / n as f64; n];
    tanh_sinh(
        |t| {
            let a = schedule.alpha(t)?;
            let marg: Vec<Vec<f64>> = x.iter().map(|&v| mix(&point(n, v), a, &pi)).collect();
            let mut acc = 0.0;
            for z in &states {
                let w: f64 = z.iter().enumerate().map(|(l, &v)| marg[l][v]).product();
                if w == 0.0 {
                    continue;
                }
                let rows = model.predict(z, t, cond)?;
                let mut inner = 0.0;
                for (l, (&xv, &zv)) in x.iter().zip(z).enumerate() {
                    inner += udlm_integrand_oracle(xv, zv, t, rows.row(l), &schedule)?;
                }
                acc += w * inner;
            }
            Ok(acc)
        },
        1e-12,
    )
}
