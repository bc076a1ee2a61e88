//! Continuous-time Markov chain view of the uniform-noise process: rate
//! matrices, their time reversal, Euler sampling, and guided rates.
//!
//! Used to cross-check the variational sampler, not to generate.

use rand::Rng;

use crate::categorical::sample_index;
use crate::error::{domain, shape, Error, Result};
use crate::schedule::NoiseSchedule;
use crate::vocab::Token;

const ROW_SUM_TOLERANCE: f64 = 1e-12;

/// Square matrix whose entry `(a, b)` is the rate of jumping from `a` to `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct RateMatrix {
    n: usize,
    entries: Vec<f64>,
}

impl RateMatrix {
    /// Checks non-negative off-diagonal entries and zero row sums.
    pub fn new(n: usize, entries: Vec<f64>) -> Result<Self> {
        if n == 0 || entries.len() != n * n {
            return shape(format!("rate matrix needs {n}x{n} entries, got {}", entries.len()));
        }
        let r = Self { n, entries };
        r.validate()?;
        Ok(r)
    }

    /// Builds a matrix from off-diagonal rates and fills the diagonal so rows
    /// sum to zero.
    pub fn from_off_diagonal(n: usize, mut rate: impl FnMut(Token, Token) -> f64) -> Result<Self> {
        let mut entries = vec![0.0; n * n];
        for a in 0..n {
            let mut out = 0.0;
            for b in 0..n {
                if a != b {
                    let v = rate(a, b);
                    entries[a * n + b] = v;
                    out += v;
                }
            }
            entries[a * n + a] = -out;
        }
        Self::new(n, entries)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n;
        for a in 0..n {
            let row = &self.entries[a * n..(a + 1) * n];
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("non-finite rate in row {a}")));
            }
            if let Some(b) = (0..n).find(|&b| b != a && row[b] < 0.0) {
                return domain(format!("negative off-diagonal rate at ({a}, {b})"));
            }
            let sum: f64 = row.iter().sum();
            let scale = row.iter().fold(1.0f64, |m, v| m.max(v.abs()));
            if sum.abs() > ROW_SUM_TOLERANCE * scale {
                return domain(format!("row {a} sums to {sum}"));
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, a: Token, b: Token) -> f64 {
        self.entries[a * self.n + b]
    }

    pub fn row(&self, a: Token) -> &[f64] {
        &self.entries[a * self.n..(a + 1) * self.n]
    }

    /// Largest exit rate `max_a |R(a, a)|`.
    pub fn max_exit_rate(&self) -> f64 {
        (0..self.n).map(|a| -self.get(a, a)).fold(0.0, f64::max)
    }
}

/// Forward rate of uniform noise: `-alpha'/(N alpha) (1 1^T - N I)`.
pub fn uniform_rate(schedule: &NoiseSchedule, t: f64, n: usize) -> Result<RateMatrix> {
    if n < 2 {
        return domain("uniform rates need at least two states");
    }
    let alpha = schedule.alpha(t)?;
    let d = schedule.alpha_prime(t)?;
    let c = -d / (n as f64 * alpha);
    RateMatrix::from_off_diagonal(n, |_, _| c)
}

/// Time reversal: rate from `a` to `b` is `R(b, a) q(b) / q(a)`, where
/// `marginal_ratio(b, a)` returns `q(b) / q(a)`.
pub fn reverse_rate(forward: &RateMatrix, marginal_ratio: impl Fn(Token, Token) -> f64) -> Result<RateMatrix> {
    RateMatrix::from_off_diagonal(forward.n, |a, b| forward.get(b, a) * marginal_ratio(b, a))
}

/// One-step Euler transition `delta(z, .) + dt R(z, .)`.
pub fn euler_distribution(z: Token, rate: &RateMatrix, dt: f64) -> Result<Vec<f64>> {
    if z >= rate.n {
        return domain(format!("state {z} outside 0..{}", rate.n));
    }
    if !(dt >= 0.0 && dt.is_finite()) {
        return domain(format!("step size must be finite and non-negative, got {dt}"));
    }
    if dt * rate.max_exit_rate() > 1.0 {
        return domain(format!("step size {dt} exceeds 1 / max exit rate {}", 1.0 / rate.max_exit_rate()));
    }
    let mut p: Vec<f64> = rate.row(z).iter().map(|r| dt * r).collect();
    p[z] += 1.0;
    if p.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return domain("Euler step produced a value outside [0, 1]");
    }
    Ok(p)
}

/// Samples one Euler step from `z`.
pub fn euler_step<R: Rng + ?Sized>(z: Token, rate: &RateMatrix, dt: f64, rng: &mut R) -> Result<Token> {
    let p = euler_distribution(z, rate, dt)?;
    Ok(sample_index(&p, rng.gen::<f64>()))
}

/// Classifier-free guided rates `cond^gamma * uncond^(1 - gamma)` off the
/// diagonal. A zero factor with a non-zero exponent gives a zero rate.
pub fn guided_rate_cfg(cond: &RateMatrix, uncond: &RateMatrix, gamma: f64) -> Result<RateMatrix> {
    if cond.n != uncond.n {
        return shape("rate matrices disagree in size");
    }
    if !gamma.is_finite() {
        return domain("gamma must be finite");
    }
    if gamma == 1.0 {
        return Ok(cond.clone());
    }
    if gamma == 0.0 {
        return Ok(uncond.clone());
    }
    let pow = |v: f64, e: f64| if e == 0.0 { 1.0 } else if v == 0.0 { 0.0 } else { v.powf(e) };
    RateMatrix::from_off_diagonal(cond.n, |a, b| pow(cond.get(a, b), gamma) * pow(uncond.get(a, b), 1.0 - gamma))
}

/// Classifier-guided rates: off-diagonal `(a, b)` scaled by
/// `classifier_ratio(a, b)^gamma`, with `classifier_ratio(a, b) = p(y | b) / p(y | a)`.
pub fn guided_rate_cbg(rate: &RateMatrix, classifier_ratio: impl Fn(Token, Token) -> f64, gamma: f64) -> Result<RateMatrix> {
    if !(gamma.is_finite() && gamma >= 0.0) {
        return domain("gamma must be finite and non-negative");
    }
    if gamma == 0.0 {
        return Ok(rate.clone());
    }
    RateMatrix::from_off_diagonal(rate.n, |a, b| rate.get(a, b) * classifier_ratio(a, b).powf(gamma))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::categorical::total_variation;
    use crate::forward::{marginal, posterior_uniform, PriorSpec, Step};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn uniform_rate_worked_value_and_rows() {
        let s = NoiseSchedule::default();
        let r = uniform_rate(&s, 0.5, 2).unwrap();
        assert_eq!(r.row(0), &[-1.0, 1.0]);
        assert_eq!(r.row(1), &[1.0, -1.0]);
        for n in 2..=6 {
            for t in [0.05, 0.3, 0.5, 0.8, 0.95] {
                let r = uniform_rate(&s, t, n).unwrap();
                for a in 0..n {
                    assert!(r.row(a).iter().sum::<f64>().abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn uniform_rate_matches_forward_difference_quotient() {
        // q(z_{t+h} | z_t) for the uniform process equals the marginal with
        // retained signal alpha_{t+h} / alpha_t.
        let s = NoiseSchedule::default();
        let (t, h, n) = (0.4, 1e-6, 4);
        let r = uniform_rate(&s, t, n).unwrap();
        let prior = PriorSpec::uniform(n).unwrap();
        let ratio = s.alpha(t + h).unwrap() / s.alpha(t).unwrap();
        for a in 0..n {
            let q = marginal(a, ratio, &prior).unwrap();
            for b in 0..n {
                let delta = if a == b { 1.0 } else { 0.0 };
                assert!(((q.probs()[b] - delta) / h - r.get(a, b)).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn reversal() {
        let s = NoiseSchedule::default();
        let r = uniform_rate(&s, 0.5, 3).unwrap();
        assert_eq!(reverse_rate(&r, |_, _| 1.0).unwrap(), r);
        let two = RateMatrix::new(2, vec![-1.0, 1.0, 1.0, -1.0]).unwrap();
        let q = [0.75, 0.25];
        let rev = reverse_rate(&two, |b, a| q[b] / q[a]).unwrap();
        assert!((rev.get(0, 1) - 1.0 / 3.0).abs() < 1e-15);
        assert!((rev.get(1, 0) - 3.0).abs() < 1e-15);
        assert!((rev.get(0, 0) + 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn validation() {
        assert!(RateMatrix::new(2, vec![-1.0, 1.0, 1.0, -0.5]).is_err());
        assert!(RateMatrix::new(2, vec![1.0, -1.0, 1.0, -1.0]).is_err());
        assert!(RateMatrix::new(2, vec![0.0; 3]).is_err());
    }

    #[test]
    fn euler_steps() {
        let r = RateMatrix::new(3, vec![-2.0, 1.0, 1.0, 0.5, -1.0, 0.5, 0.0, 0.0, 0.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for z in 0..3 {
            assert_eq!(euler_step(z, &r, 0.0, &mut rng).unwrap(), z);
        }
        assert!(euler_distribution(0, &r, 0.6).is_err());
        for dt in [0.0, 0.1, 0.25, 0.5] {
            for z in 0..3 {
                let p = euler_distribution(z, &r, dt).unwrap();
                assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
                assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn euler_step_tracks_the_clean_token_posterior() {
        // Reverse rate for a known clean token x, against q(z_s | z_t, x).
        let s = NoiseSchedule::default();
        let (t, n, x) = (0.6, 3, 1);
        let prior = PriorSpec::uniform(n).unwrap();
        let q = marginal(x, s.alpha(t).unwrap(), &prior).unwrap();
        let fwd = uniform_rate(&s, t, n).unwrap();
        let rev = reverse_rate(&fwd, |b, a| q.probs()[b] / q.probs()[a]).unwrap();
        let mut pts = Vec::new();
        for dt in [0.02, 0.01, 0.005, 0.0025] {
            let step = Step::from_times(&s, t, t - dt).unwrap();
            let mut worst = 0.0f64;
            for z in 0..n {
                let e = euler_distribution(z, &rev, dt).unwrap();
                let p = posterior_uniform(z, x, step, n).unwrap();
                worst = worst.max(total_variation(&e, p.probs()));
            }
            pts.push((dt, worst));
        }
        // One-step error vanishes at least linearly in dt.
        for w in pts.windows(2) {
            let ratio = w[0].1 / w[1].1;
            assert!(ratio > 1.9, "{pts:?}");
        }
    }

    #[test]
    fn guided_rate_identities() {
        let s = NoiseSchedule::default();
        let a = uniform_rate(&s, 0.5, 3).unwrap();
        let b = reverse_rate(&a, |x, y| [0.2, 0.3, 0.5][x] / [0.2, 0.3, 0.5][y]).unwrap();
        assert_eq!(guided_rate_cfg(&b, &a, 1.0).unwrap(), b);
        assert_eq!(guided_rate_cfg(&b, &a, 0.0).unwrap(), a);
        assert_eq!(guided_rate_cbg(&b, |_, _| 2.0, 0.0).unwrap(), b);
        let same = guided_rate_cbg(&b, |_, _| 1.0, 3.0).unwrap();
        for x in 0..3 {
            for y in 0..3 {
                assert!((same.get(x, y) - b.get(x, y)).abs() < 1e-15);
            }
        }
        let g = guided_rate_cfg(&b, &a, 2.0).unwrap();
        assert!((g.get(0, 1) - b.get(0, 1).powi(2) / a.get(0, 1)).abs() < 1e-12);
    }
}
