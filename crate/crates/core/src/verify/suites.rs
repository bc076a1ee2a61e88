use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use super::oracle::{
    bayes_mean_posterior_oracle, bayes_posterior_oracle, continuous_nelbo_oracle, exact_reverse_nll,
    tempered_token_oracle, udlm_integrand_oracle,
};
use crate::autodiff::Matrix;
use crate::categorical::{total_variation, Categorical};
use crate::ctmc::{euler_distribution, guided_rate_cbg, guided_rate_cfg, reverse_rate, uniform_rate, RateMatrix};
use crate::error::{domain, Result};
use crate::forward::{model_posterior, posterior, posterior_general, posterior_uniform, sample_latent, PriorSpec, Step};
use crate::guidance::{cbg_exact, cbg_taylor, cfg_combine, GuidanceConfig, GuidanceMode};
use crate::loss::{
    diffusion_kl, diffusion_kl_grad, draw_point, mdlm_loss, nelbo_discrete_exact, point_loss_grad, sedd_form_nelbo,
    udlm_integrand, udlm_integrand_grad, udlm_loss, Objective,
};
use crate::model::{
    Classifier, ClassifierParams, ClassifierShapes, Condition, CountingClassifier, Denoiser, DenoiserParams,
    DenoiserShapes, TabularDenoiser,
};
use crate::sampler::reverse_distribution;
use crate::schedule::NoiseSchedule;
use crate::vocab::Token;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Posteriors,
    Limits,
    Bound,
    Equivalence,
    Guidance,
    Ctmc,
    Gradients,
    All,
}

impl Suite {
    pub const EACH: [Suite; 7] =
        [Self::Posteriors, Self::Limits, Self::Bound, Self::Equivalence, Self::Guidance, Self::Ctmc, Self::Gradients];

    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "posteriors" => Self::Posteriors,
            "limits" => Self::Limits,
            "bound" => Self::Bound,
            "equivalence" => Self::Equivalence,
            "guidance" => Self::Guidance,
            "ctmc" => Self::Ctmc,
            "gradients" => Self::Gradients,
            "all" => Self::All,
            _ => return domain(format!("unknown suite {s:?}")),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Posteriors => "posteriors",
            Self::Limits => "limits",
            Self::Bound => "bound",
            Self::Equivalence => "equivalence",
            Self::Guidance => "guidance",
            Self::Ctmc => "ctmc",
            Self::Gradients => "gradients",
            Self::All => "all",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub suite: String,
    pub name: String,
    /// Worst observed deviation; infinite when the check errored.
    pub deviation: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub seconds: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub suite: String,
    pub seed: u64,
    pub passed: bool,
    pub seconds: f64,
    pub checks: Vec<Check>,
}

impl SuiteReport {
    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.passed)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            let status = if c.passed { "PASS" } else { "FAIL" };
            out.push_str(&format!(
                "{status} {}/{} deviation={:.3e} tolerance={:.1e} ({:.2}s)",
                c.suite, c.name, c.deviation, c.tolerance, c.seconds
            ));
            if let Some(e) = &c.error {
                out.push_str(&format!(" error: {e}"));
            }
            out.push('\n');
        }
        let failed = self.failures().count();
        out.push_str(&format!(
            "{}: {} checks, {} failed, {:.2}s\n",
            self.suite,
            self.checks.len(),
            failed,
            self.seconds
        ));
        out
    }
}

type Case = (String, Box<dyn Fn() -> Result<(f64, f64)> + Send + Sync>);

fn case(name: &str, f: impl Fn() -> Result<(f64, f64)> + Send + Sync + 'static) -> Case {
    (name.to_string(), Box::new(f))
}

fn run_cases(suite: &str, cases: Vec<Case>) -> Vec<Check> {
    cases
        .into_par_iter()
        .map(|(name, f)| {
            let start = Instant::now();
            let result = f();
            let seconds = start.elapsed().as_secs_f64();
            match result {
                Ok((deviation, tolerance)) => Check {
                    suite: suite.to_string(),
                    name,
                    deviation,
                    tolerance,
                    passed: deviation.is_finite() && deviation <= tolerance,
                    seconds,
                    error: None,
                },
                Err(e) => Check {
                    suite: suite.to_string(),
                    name,
                    deviation: f64::INFINITY,
                    tolerance: 0.0,
                    passed: false,
                    seconds,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect()
}

/// Runs one suite, or all of them in a fixed order.
pub fn run_suite(suite: Suite, seed: u64) -> SuiteReport {
    let start = Instant::now();
    let checks = match suite {
        Suite::All => Suite::EACH.iter().flat_map(|s| suite_checks(*s, seed)).collect(),
        s => suite_checks(s, seed),
    };
    SuiteReport {
        suite: suite.name().to_string(),
        seed,
        passed: checks.iter().all(|c| c.passed),
        seconds: start.elapsed().as_secs_f64(),
        checks,
    }
}

fn suite_checks(suite: Suite, seed: u64) -> Vec<Check> {
    match suite {
        Suite::Posteriors => run_cases("posteriors", posterior_cases(seed)),
        Suite::Limits => limits_suite_with(seed, udlm_integrand),
        Suite::Bound => run_cases("bound", bound_cases(seed)),
        Suite::Equivalence => run_cases("equivalence", equivalence_cases(seed)),
        Suite::Guidance => run_cases("guidance", guidance_cases(seed)),
        Suite::Ctmc => run_cases("ctmc", ctmc_cases(seed)),
        Suite::Gradients => run_cases("gradients", gradient_cases(seed)),
        Suite::All => unreachable!(),
    }
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn random_simplex<R: Rng>(n: usize, rng: &mut R) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| rng.gen_range(0.05..1.0)).collect();
    let total: f64 = w.iter().sum();
    w.iter().map(|v| v / total).collect()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Relative error with a floor on the scale, for finite-difference checks.
fn rel_err(fd: f64, an: f64) -> f64 {
    (fd - an).abs() / fd.abs().max(an.abs()).max(1e-4)
}

// ---------------------------------------------------------------- posteriors

fn test_priors(seed: u64) -> Vec<PriorSpec> {
    let mut rng = rng_for(seed, 1);
    let mut out = Vec::new();
    for n in 2..=5 {
        out.push(PriorSpec::uniform(n).unwrap());
        out.push(PriorSpec::absorbing(n, n - 1).unwrap());
        out.push(PriorSpec::general(Categorical::new(random_simplex(n, &mut rng)).unwrap()));
    }
    out
}

/// 20 x 20 time grid: `t` in `{0.05, ..., 1}` and `s = t j / 20`.
fn time_grid() -> Vec<(f64, f64)> {
    let mut g = Vec::new();
    for i in 1..=20 {
        let t = i as f64 / 20.0;
        for j in 0..20 {
            g.push((t, t * j as f64 / 20.0));
        }
    }
    g
}

fn posterior_cases(seed: u64) -> Vec<Case> {
    let sched = NoiseSchedule::default();
    let mut cases = vec![case("posterior_vs_bayes", move || {
        let mut worst = 0.0f64;
        for prior in test_priors(seed) {
            let n = prior.n();
            for (t, s) in time_grid() {
                let step = Step::from_times(&sched, t, s)?;
                for x in (0..n).filter(|&x| Some(x) != prior.mask()) {
                    for z in 0..n {
                        let Ok(want) = bayes_posterior_oracle(z, x, t, s, &prior, &sched) else { continue };
                        let got = posterior(z, x, step, &prior)?;
                        worst = worst.max(max_abs_diff(got.probs(), want.probs()));
                        let general = posterior_general(z, &crate::forward::one_hot(n, x), step, &prior)?;
                        worst = worst.max(max_abs_diff(&general, want.probs()));
                        if matches!(prior, PriorSpec::Uniform { .. }) {
                            let u = posterior_uniform(z, x, step, n)?;
                            worst = worst.max(max_abs_diff(u.probs(), want.probs()));
                        }
                    }
                }
            }
        }
        Ok((worst, 1e-12))
    })];
    cases.push(case("model_posterior_vs_bayes", move || {
        let mut rng = rng_for(seed, 2);
        let mut worst = 0.0f64;
        for prior in test_priors(seed) {
            let n = prior.n();
            for (t, s) in time_grid().into_iter().step_by(7) {
                let step = Step::from_times(&sched, t, s)?;
                let mut mean = random_simplex(n, &mut rng);
                if let Some(m) = prior.mask() {
                    mean[m] = 0.0;
                    let total: f64 = mean.iter().sum();
                    mean.iter_mut().for_each(|v| *v /= total);
                }
                for z in 0..n {
                    if prior.mask().is_some_and(|m| m != z) {
                        // Unmasked latents are fixed points; the oracle
                        // agrees only for the carried-over token.
                        continue;
                    }
                    let want = bayes_mean_posterior_oracle(z, &mean, t, s, &prior, &sched)?;
                    let got = model_posterior(z, &mean, step, &prior)?;
                    worst = worst.max(max_abs_diff(&got, &want));
                }
            }
        }
        Ok((worst, 1e-12))
    }));
    cases
}

// -------------------------------------------------------------------- limits

/// Signature of a per-token continuous-time integrand under test.
pub type IntegrandFn = fn(Token, Token, f64, &[f64], &NoiseSchedule) -> Result<f64>;

/// The limits suite against an arbitrary integrand implementation, so that a
/// deliberately broken integrand can be shown to fail it.
pub fn limits_suite_with(seed: u64, integrand: IntegrandFn) -> Vec<Check> {
    let sched = NoiseSchedule::default();
    let cases = vec![
        case("zero_at_truth", move || {
            let mut worst = 0.0f64;
            for n in 2..=5 {
                let uniform = PriorSpec::uniform(n)?;
                for x in 0..n {
                    let row = crate::forward::one_hot(n, x);
                    for z in 0..n {
                        for t in [0.01, 0.3, 0.7, 0.99] {
                            worst = worst.max(integrand(x, z, t, &row, &sched)?.abs());
                            let step = Step::from_times(&sched, t, t / 2.0)?;
                            worst = worst.max(diffusion_kl(x, z, step, &row, &uniform)?.abs());
                        }
                    }
                }
            }
            let mut rng = rng_for(seed, 3);
            let x = vec![0, 2, 1];
            let uniform = PriorSpec::uniform(3)?;
            let perfect = TabularDenoiser::new(vec![x.clone()], None, 0, uniform, sched)?;
            worst = worst.max(udlm_loss(&x, &perfect, Condition::Dropped, &mut rng, 64)?.mean.abs());
            let absorbing = PriorSpec::absorbing(4, 3)?;
            let perfect = TabularDenoiser::new(vec![x.clone()], None, 0, absorbing.clone(), sched)?;
            worst = worst.max(mdlm_loss(&x, &perfect, Condition::Dropped, &absorbing, &mut rng, 64)?.mean.abs());
            Ok((worst, 1e-6))
        }),
        case("integrand_matches_kl_limit", move || {
            // T * KL over a step of width h tends to the integrand; Richardson
            // extrapolation removes the O(h) term.
            let mut rng = rng_for(seed, 4);
            let mut worst = 0.0f64;
            for _ in 0..200 {
                let n = rng.gen_range(2..=5);
                let prior = PriorSpec::uniform(n)?;
                let row = random_simplex(n, &mut rng);
                let (x, z) = (rng.gen_range(0..n), rng.gen_range(0..n));
                let t = rng.gen_range(0.05..0.95);
                let h = 1e-4;
                let k1 = diffusion_kl(x, z, Step::from_times(&sched, t, t - h)?, &row, &prior)? / h;
                let k2 = diffusion_kl(x, z, Step::from_times(&sched, t, t - 2.0 * h)?, &row, &prior)? / (2.0 * h);
                let limit = 2.0 * k1 - k2;
                let v = integrand(x, z, t, &row, &sched)?;
                worst = worst.max((limit - v).abs() / v.abs().max(1e-3));
            }
            Ok((worst, 1e-4))
        }),
        case("integrand_matches_oracle", move || {
            let mut rng = rng_for(seed, 5);
            let mut worst = 0.0f64;
            for _ in 0..2000 {
                let n = rng.gen_range(2..=6);
                let row = random_simplex(n, &mut rng);
                let (x, z) = (rng.gen_range(0..n), rng.gen_range(0..n));
                let t = rng.gen_range(sched.t_min..sched.t_max);
                let v = integrand(x, z, t, &row, &sched)?;
                let o = udlm_integrand_oracle(x, z, t, &row, &sched)?;
                worst = worst.max((v - o).abs() / o.abs().max(1.0));
            }
            Ok((worst, 1e-9))
        }),
        case("continuous_limit_ratio", move || {
            let mut rng = rng_for(seed, 6);
            let mut worst = 0.0f64;
            for _ in 0..3 {
                let model = random_denoiser(3, 2, 0, None, &mut rng)?;
                let x = vec![rng.gen_range(0..3), rng.gen_range(0..3)];
                let curve = continuous_limit_curve(&model, &x, &[8, 16, 32, 64, 128, 256])?;
                for r in curve.ratios() {
                    worst = worst.max((r - 2.0).abs());
                }
            }
            Ok((worst, 0.4))
        }),
    ];
    run_cases("limits", cases)
}

fn random_denoiser<R: Rng>(n: usize, len: usize, classes: usize, mask: Option<Token>, rng: &mut R) -> Result<DenoiserParams> {
    let shapes = DenoiserShapes { vocab: n, seq_len: len, embed: 4, hidden: 8, classes, mask };
    let mut rng = ChaCha8Rng::seed_from_u64(rng.gen());
    DenoiserParams::random(shapes, NoiseSchedule::default(), &mut rng)
}

/// Discrete NELBOs against the continuous-time value of the same model.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LimitCurve {
    pub integral: f64,
    pub steps: Vec<usize>,
    pub nelbo: Vec<f64>,
}

impl LimitCurve {
    pub fn errors(&self) -> Vec<f64> {
        self.nelbo.iter().map(|v| v - self.integral).collect()
    }

    /// `error(T) / error(2T)` for consecutive entries.
    pub fn ratios(&self) -> Vec<f64> {
        self.errors().windows(2).map(|w| w[0] / w[1]).collect()
    }
}

pub fn continuous_limit_curve<D: Denoiser + ?Sized>(model: &D, x: &[Token], steps: &[usize]) -> Result<LimitCurve> {
    let prior = PriorSpec::uniform(model.vocab_size())?;
    let integral = continuous_nelbo_oracle(model, x, Condition::Dropped)?;
    let nelbo = steps
        .iter()
        .map(|&t| nelbo_discrete_exact(x, model, Condition::Dropped, t, &prior))
        .collect::<Result<Vec<_>>>()?;
    Ok(LimitCurve { integral, steps: steps.to_vec(), nelbo })
}

// --------------------------------------------------------------------- bound

fn bound_cases(seed: u64) -> Vec<Case> {
    let mut cases = Vec::new();
    for (name, mask) in [("reverse_nll_below_nelbo_uniform", None), ("reverse_nll_below_nelbo_absorbing", Some(2))] {
        cases.push(case(name, move || {
            let mut rng = rng_for(seed, 7 + mask.unwrap_or(0) as u64);
            let prior = match mask {
                Some(m) => PriorSpec::absorbing(3, m)?,
                None => PriorSpec::uniform(3)?,
            };
            let mut worst = f64::NEG_INFINITY;
            for _ in 0..20 {
                let model = random_denoiser(3, 1, 0, mask, &mut rng)?;
                let x = vec![rng.gen_range(0..if mask.is_some() { 2 } else { 3 })];
                for steps in [2, 4, 8] {
                    let nll = exact_reverse_nll(&model, &x, steps, &prior, Condition::Dropped)?;
                    let bound = nelbo_discrete_exact(&x, &model, Condition::Dropped, steps, &prior)?;
                    worst = worst.max(nll - bound);
                }
            }
            Ok((worst.max(0.0), 1e-9))
        }));
    }
    cases.push(case("reverse_nll_of_point_mass", || {
        let prior = PriorSpec::uniform(3)?;
        let m = TabularDenoiser::new(vec![vec![1]], None, 0, prior.clone(), NoiseSchedule::default())?;
        let mut worst = 0.0f64;
        for steps in [1, 4, 16] {
            worst = worst.max(exact_reverse_nll(&m, &[1], steps, &prior, Condition::Dropped)?.abs());
        }
        Ok((worst, 1e-9))
    }));
    cases
}

// --------------------------------------------------------------- equivalence

fn equivalence_cases(seed: u64) -> Vec<Case> {
    vec![
        case("sedd_form_equals_integrand", move || {
            let sched = NoiseSchedule::default();
            let mut rng = rng_for(seed, 9);
            let mut worst = 0.0f64;
            for _ in 0..10_000 {
                let n = rng.gen_range(2..=8);
                let row = random_simplex(n, &mut rng);
                let (x, z) = (rng.gen_range(0..n), rng.gen_range(0..n));
                let t = rng.gen_range(sched.t_min..sched.t_max);
                let a = sedd_form_nelbo(x, z, t, &row, &sched)?;
                let b = udlm_integrand(x, z, t, &row, &sched)?;
                worst = worst.max((a - b).abs() / b.abs().max(1.0));
            }
            Ok((worst, 1e-9))
        }),
        case("unguided_equals_cfg_at_gamma_one", move || {
            let mut rng = rng_for(seed, 10);
            let prior = PriorSpec::uniform(4)?;
            let model = random_denoiser(4, 3, 2, None, &mut rng)?;
            let mut worst = 0.0f64;
            for _ in 0..20 {
                let z: Vec<Token> = (0..3).map(|_| rng.gen_range(0..4)).collect();
                let t = rng.gen_range(0.1..1.0);
                let none = GuidanceConfig { target_class: Some(1), ..GuidanceConfig::none() };
                let cfg = GuidanceConfig::new(GuidanceMode::Cfg, 1.0, Some(1));
                let a = reverse_distribution::<_, ClassifierParams>(&z, t, t * 0.5, &model, &prior, &none, None)?;
                let b = reverse_distribution::<_, ClassifierParams>(&z, t, t * 0.5, &model, &prior, &cfg, None)?;
                for (p, q) in a.iter().zip(&b) {
                    worst = worst.max(max_abs_diff(p.probs(), q.probs()));
                }
            }
            Ok((worst, 0.0))
        }),
    ]
}

// ------------------------------------------------------------------ guidance

/// A scoring function whose "log-probabilities" are affine in the one-hot
/// input: `score(y | z) = bias[y] + sum_l weights[y][l][z_l]`. Not normalized
/// over classes; it exists to check first-order guidance, which is exact for
/// such scores.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineClassifier {
    pub weights: Vec<Vec<Vec<f64>>>,
    pub bias: Vec<f64>,
}

impl AffineClassifier {
    pub fn random<R: Rng>(classes: usize, len: usize, n: usize, rng: &mut R) -> Self {
        Self {
            weights: (0..classes)
                .map(|_| (0..len).map(|_| (0..n).map(|_| rng.gen_range(-2.0..0.0)).collect()).collect())
                .collect(),
            bias: (0..classes).map(|_| rng.gen_range(-1.0..0.0)).collect(),
        }
    }
}

impl Classifier for AffineClassifier {
    fn num_classes(&self) -> usize {
        self.bias.len()
    }
    fn seq_len(&self) -> usize {
        self.weights[0].len()
    }
    fn vocab_size(&self) -> usize {
        self.weights[0][0].len()
    }
    fn log_probs(&self, z: &[Token], _t: f64) -> Result<Vec<f64>> {
        if z.len() != self.seq_len() || z.iter().any(|&v| v >= self.vocab_size()) {
            return domain(format!("sequence {z:?} does not fit the scorer"));
        }
        Ok((0..self.num_classes())
            .map(|y| self.bias[y] + z.iter().enumerate().map(|(l, &v)| self.weights[y][l][v]).sum::<f64>())
            .collect())
    }
    fn log_prob_with_input_grad(&self, z: &[Token], t: f64, y: usize) -> Result<(f64, Matrix)> {
        let lp = self.log_probs(z, t)?;
        let n = self.vocab_size();
        let data = self.weights[y].iter().flatten().copied().collect();
        Ok((lp[y], Matrix::from_vec(z.len(), n, data)))
    }
}

/// Worst per-position total variation between first-order and exact
/// classifier guidance for a seeded random MLP classifier (`N = 4`, `L = 3`,
/// `gamma = 1`, uniform reverse rows).
pub fn taylor_gap_mlp() -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let shapes = ClassifierShapes { vocab: 4, seq_len: 3, embed: 4, hidden: 8, classes: 3 };
    let c = ClassifierParams::random(shapes, NoiseSchedule::default(), &mut rng)?;
    let rows: Vec<Categorical> = (0..3).map(|_| Categorical::uniform(4)).collect::<Result<_>>()?;
    let z = [1, 3, 0];
    let exact = cbg_exact(&c, &z, 0.4, &rows, 2, 1.0)?;
    let taylor = cbg_taylor(&c, &z, 0.4, &rows, 2, 1.0)?;
    Ok(exact.iter().zip(&taylor).map(|(a, b)| total_variation(a.probs(), b.probs())).fold(0.0, f64::max))
}

/// Value of [`taylor_gap_mlp`] recorded when it was first computed.
pub const TAYLOR_MLP_TV_GAP: f64 = 1.731_360_327_754_183_4e-2;

fn guidance_cases(seed: u64) -> Vec<Case> {
    const GAMMAS: [f64; 5] = [0.0, 0.5, 1.0, 2.0, 5.0];
    let setup = move |stream: u64| -> Result<(ClassifierParams, Vec<Token>, Vec<Categorical>, ChaCha8Rng)> {
        let mut rng = rng_for(seed, stream);
        let shapes = ClassifierShapes { vocab: 4, seq_len: 3, embed: 4, hidden: 8, classes: 3 };
        let c = ClassifierParams::random(shapes, NoiseSchedule::default(), &mut rng)?;
        let z: Vec<Token> = (0..3).map(|_| rng.gen_range(0..4)).collect();
        let rows = (0..3).map(|_| Categorical::new(random_simplex(4, &mut rng))).collect::<Result<_>>()?;
        Ok((c, z, rows, rng))
    };
    vec![
        case("cbg_exact_vs_oracle", move || {
            let mut worst = 0.0f64;
            for trial in 0..5 {
                let (c, z, rows, _) = setup(20 + trial)?;
                for gamma in GAMMAS {
                    let a = cbg_exact(&c, &z, 0.3, &rows, 1, gamma)?;
                    let b = tempered_token_oracle(&c, &z, 0.3, &rows, 1, gamma)?;
                    for (p, q) in a.iter().zip(&b) {
                        worst = worst.max(max_abs_diff(p.probs(), q.probs()));
                    }
                }
            }
            Ok((worst, 1e-12))
        }),
        case("cbg_call_counts", move || {
            let (c, z, rows, _) = setup(30)?;
            let counting = CountingClassifier::new(c);
            let mut worst = 0usize;
            for gamma in GAMMAS {
                counting.reset();
                cbg_exact(&counting, &z, 0.3, &rows, 0, gamma)?;
                worst = worst.max(counting.forward_calls().abs_diff(12) + counting.backward_calls());
                counting.reset();
                cbg_taylor(&counting, &z, 0.3, &rows, 0, gamma)?;
                worst = worst.max(counting.forward_calls().abs_diff(1) + counting.backward_calls().abs_diff(1));
            }
            Ok((worst as f64, 0.0))
        }),
        case("cbg_taylor_exact_for_affine_scores", move || {
            let mut rng = rng_for(seed, 31);
            let mut worst = 0.0f64;
            for _ in 0..10 {
                let c = AffineClassifier::random(2, 3, 4, &mut rng);
                let z: Vec<Token> = (0..3).map(|_| rng.gen_range(0..4)).collect();
                let rows: Vec<Categorical> =
                    (0..3).map(|_| Categorical::new(random_simplex(4, &mut rng))).collect::<Result<_>>()?;
                for gamma in GAMMAS {
                    let a = cbg_exact(&c, &z, 0.5, &rows, 1, gamma)?;
                    let b = cbg_taylor(&c, &z, 0.5, &rows, 1, gamma)?;
                    for (p, q) in a.iter().zip(&b) {
                        worst = worst.max(max_abs_diff(p.probs(), q.probs()));
                    }
                }
            }
            Ok((worst, 1e-9))
        }),
        case("cbg_taylor_mlp_gap_pinned", || Ok(((taylor_gap_mlp()? - TAYLOR_MLP_TV_GAP).abs(), 1e-9))),
        case("tempered_oracle_large_gamma", move || {
            let (c, z, rows, _) = setup(32)?;
            let b = tempered_token_oracle(&c, &z, 0.3, &rows, 0, 500.0)?;
            let mut worst = 0.0f64;
            for (l, row) in b.iter().enumerate() {
                let scores: Vec<f64> = (0..4)
                    .map(|v| {
                        let mut cand = z.clone();
                        cand[l] = v;
                        c.log_probs(&cand, 0.3).map(|lp| lp[0])
                    })
                    .collect::<Result<_>>()?;
                let best = crate::categorical::argmax(&scores);
                worst = worst.max(1.0 - row.probs()[best]);
            }
            Ok((worst, 1e-6))
        }),
        case("cfg_endpoints_and_worked_value", || {
            let c = vec![Categorical::new(vec![0.8, 0.2])?];
            let u = vec![Categorical::new(vec![0.5, 0.5])?];
            let mut worst = 0.0f64;
            if cfg_combine(&c, &u, 1.0)? != c || cfg_combine(&c, &u, 0.0)? != u {
                worst = 1.0;
            }
            let g = cfg_combine(&c, &u, 2.0)?;
            worst = worst.max(max_abs_diff(g[0].probs(), &[16.0 / 17.0, 1.0 / 17.0]));
            Ok((worst, 1e-12))
        }),
        case("outputs_are_distributions", move || {
            let mut worst = 0.0f64;
            for trial in 0..5 {
                let (c, z, rows, mut rng) = setup(40 + trial)?;
                let other: Vec<Categorical> =
                    (0..3).map(|_| Categorical::new(random_simplex(4, &mut rng))).collect::<Result<_>>()?;
                for gamma in GAMMAS {
                    let outs = [
                        cfg_combine(&rows, &other, gamma)?,
                        cbg_exact(&c, &z, 0.3, &rows, 2, gamma)?,
                        cbg_taylor(&c, &z, 0.3, &rows, 2, gamma)?,
                    ];
                    for row in outs.iter().flatten() {
                        let sum: f64 = row.probs().iter().sum();
                        worst = worst.max((sum - 1.0).abs());
                        if row.probs().iter().any(|p| !(*p >= 0.0)) {
                            worst = f64::INFINITY;
                        }
                    }
                }
            }
            Ok((worst, 1e-12))
        }),
        case("cfg_argmax_monotone", move || {
            // Applies when the token maximizes both p_c and p_c / p_u.
            let mut rng = rng_for(seed, 50);
            let mut violations = 0;
            for _ in 0..2000 {
                let mut a = random_simplex(5, &mut rng);
                let mut b = random_simplex(5, &mut rng);
                let v = rng.gen_range(0..5);
                a[v] += 1.0;
                b[v] += 0.5;
                let (c, u) = (Categorical::normalized(a)?, Categorical::normalized(b)?);
                let ratio: Vec<f64> = c.probs().iter().zip(u.probs()).map(|(p, q)| p / q).collect();
                if c.argmax() != v || u.argmax() != v || crate::categorical::argmax(&ratio) != v {
                    continue;
                }
                for gamma in [1.0, 2.0, 5.0] {
                    if cfg_combine(&[c.clone()], &[u.clone()], gamma)?[0].argmax() != v {
                        violations += 1;
                    }
                }
            }
            Ok((violations as f64, 0.0))
        }),
    ]
}

// ---------------------------------------------------------------------- ctmc

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GuidedKind {
    Cfg,
    Cbg,
}

/// Total variation between two length-one chains run from `t = 0.8` to
/// `t = 0.3` in `steps` equal steps: one using Euler steps of the guided
/// reverse rates, the other using guided reverse distributions. Both start
/// from the uniform distribution over `N = 3` states and are propagated
/// exactly. Returns `(dt, tv)` per entry of `steps`.
pub fn guided_euler_gap(kind: GuidedKind, seed: u64, gamma: f64, steps: &[usize]) -> Result<Vec<(f64, f64)>> {
    const N: usize = 3;
    let (t_start, t_end) = (0.8, 0.3);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sched = NoiseSchedule::default();
    let prior = PriorSpec::uniform(N)?;
    let classes = if kind == GuidedKind::Cfg { 2 } else { 0 };
    let model = random_denoiser(N, 1, classes, None, &mut rng)?;
    let classifier = ClassifierParams::random(
        ClassifierShapes { vocab: N, seq_len: 1, embed: 4, hidden: 8, classes: 2 },
        sched,
        &mut rng,
    )?;
    let y = 1;
    let guidance = match kind {
        GuidedKind::Cfg => GuidanceConfig::new(GuidanceMode::Cfg, gamma, Some(y)),
        GuidedKind::Cbg => GuidanceConfig::new(GuidanceMode::CbgExact, gamma, Some(y)),
    };
    let mean_ratio = |x: Vec<f64>, alpha: f64| move |b: Token, a: Token| {
        let m = |j: Token| alpha * x[j] + (1.0 - alpha) / N as f64;
        m(b) / m(a)
    };
    let euler_row = |a: Token, t: f64, dt: f64| -> Result<Vec<f64>> {
        let alpha = sched.alpha(t)?;
        let fwd = uniform_rate(&sched, t, N)?;
        let rate: RateMatrix = match kind {
            GuidedKind::Cfg => {
                let xc = model.predict(&[a], t, Condition::Class(y))?.row(0).to_vec();
                let xu = model.predict(&[a], t, Condition::Dropped)?.row(0).to_vec();
                let rc = reverse_rate(&fwd, mean_ratio(xc, alpha))?;
                let ru = reverse_rate(&fwd, mean_ratio(xu, alpha))?;
                guided_rate_cfg(&rc, &ru, gamma)?
            }
            GuidedKind::Cbg => {
                let xu = model.predict(&[a], t, Condition::Dropped)?.row(0).to_vec();
                let ru = reverse_rate(&fwd, mean_ratio(xu, alpha))?;
                let lp: Vec<f64> = (0..N).map(|v| classifier.log_probs(&[v], t).map(|l| l[y])).collect::<Result<_>>()?;
                guided_rate_cbg(&ru, |from, to| (lp[to] - lp[from]).exp(), gamma)?
            }
        };
        euler_distribution(a, &rate, dt)
    };
    let mut out = Vec::with_capacity(steps.len());
    for &m in steps {
        let dt = (t_start - t_end) / m as f64;
        let mut p_euler = vec![1.0 / N as f64; N];
        let mut p_post = p_euler.clone();
        for k in 0..m {
            let t = t_start - k as f64 * dt;
            let s = t - dt;
            let mut next_e = vec![0.0; N];
            let mut next_p = vec![0.0; N];
            for a in 0..N {
                let e = euler_row(a, t, dt)?;
                let q = reverse_distribution(&[a], t, s, &model, &prior, &guidance, Some(&classifier))?;
                for b in 0..N {
                    next_e[b] += p_euler[a] * e[b];
                    next_p[b] += p_post[a] * q[0].probs()[b];
                }
            }
            p_euler = next_e;
            p_post = next_p;
        }
        out.push((dt, total_variation(&p_euler, &p_post)));
    }
    Ok(out)
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn fit_log_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

fn ctmc_cases(seed: u64) -> Vec<Case> {
    let sched = NoiseSchedule::default();
    let mut cases = vec![
        case("uniform_rate_worked_value", move || {
            let r = uniform_rate(&sched, 0.5, 2)?;
            Ok((max_abs_diff(&[r.row(0), r.row(1)].concat(), &[-1.0, 1.0, 1.0, -1.0]), 1e-12))
        }),
        case("uniform_rate_difference_quotient", move || {
            let mut worst = 0.0f64;
            let h = 1e-6;
            for n in 2..=6 {
                let prior = PriorSpec::uniform(n)?;
                for t in [0.1, 0.4, 0.7] {
                    let r = uniform_rate(&sched, t, n)?;
                    let keep = sched.alpha(t + h)? / sched.alpha(t)?;
                    for a in 0..n {
                        let q = crate::forward::marginal(a, keep, &prior)?;
                        for b in 0..n {
                            let delta = if a == b { 1.0 } else { 0.0 };
                            worst = worst.max(((q.probs()[b] - delta) / h - r.get(a, b)).abs());
                        }
                    }
                }
            }
            Ok((worst, 1e-4))
        }),
        case("reverse_rate_two_state", || {
            let r = RateMatrix::new(2, vec![-1.0, 1.0, 1.0, -1.0])?;
            let q = [0.75, 0.25];
            let rev = reverse_rate(&r, |b, a| q[b] / q[a])?;
            Ok((max_abs_diff(&[rev.get(0, 1), rev.get(1, 0)], &[1.0 / 3.0, 3.0]), 1e-12))
        }),
    ];
    for (name, kind) in [("cfg_euler_slope", GuidedKind::Cfg), ("cbg_euler_slope", GuidedKind::Cbg)] {
        cases.push(case(name, move || {
            let pts = guided_euler_gap(kind, seed, 2.0, &[25, 50, 100, 200, 400])?;
            Ok(((fit_log_slope(&pts) - 1.0).abs(), 0.2))
        }));
    }
    cases
}

// ----------------------------------------------------------------- gradients

fn fd_params(arrays: usize, len: impl Fn(usize) -> usize, mut eval: impl FnMut(usize, usize, f64) -> Result<f64>, an: impl Fn(usize, usize) -> f64) -> Result<f64> {
    let h = 1e-6;
    let mut worst = 0.0f64;
    for a in 0..arrays {
        for i in 0..len(a) {
            let fd = (eval(a, i, h)? - eval(a, i, -h)?) / (2.0 * h);
            worst = worst.max(rel_err(fd, an(a, i)));
        }
    }
    Ok(worst)
}

fn denoiser_loss_case(seed: u64, stream: u64, objective: Objective, absorbing: bool) -> Result<(f64, f64)> {
    let mut rng = rng_for(seed, stream);
    let sched = NoiseSchedule::default();
    let mut worst = 0.0f64;
    for _ in 0..3 {
        let data_n = rng.gen_range(2..=4);
        let len = rng.gen_range(1..=3);
        let classes = if rng.gen_bool(0.5) { 2 } else { 0 };
        let (prior, mask) = if absorbing {
            (PriorSpec::absorbing(data_n + 1, data_n)?, Some(data_n))
        } else {
            (PriorSpec::uniform(data_n)?, None)
        };
        let n = prior.n();
        let shapes = DenoiserShapes {
            vocab: n,
            seq_len: len,
            embed: rng.gen_range(2..=4),
            hidden: rng.gen_range(2..=5),
            classes,
            mask,
        };
        let mut p = DenoiserParams::random(shapes, sched, &mut ChaCha8Rng::seed_from_u64(rng.gen()))?;
        let x: Vec<Token> = (0..len).map(|_| rng.gen_range(0..data_n)).collect();
        let point = draw_point(objective, &sched, &mut rng);
        let alpha = sched.alpha(point.t)?;
        let z: Vec<Token> = x.iter().map(|&v| sample_latent(v, alpha, &prior, &mut rng)).collect::<Result<_>>()?;
        let cond = if classes > 0 { Condition::Class(rng.gen_range(0..classes)) } else { Condition::Dropped };
        let grads = {
            let pass = p.forward_pass(&z, point.t, cond)?;
            let (_, adj) = point_loss_grad(objective, &x, &z, point, pass.probs(), &prior, &sched)?;
            pass.backward(adj)
        };
        let count = p.arrays().len();
        let lens: Vec<usize> = p.arrays().iter().map(|m| m.data.len()).collect();
        worst = worst.max(fd_params(
            count,
            |a| lens[a],
            |a, i, h| {
                let orig = p.arrays()[a].data[i];
                p.arrays_mut()[a].data[i] = orig + h;
                let probs = p.predict(&z, point.t, cond);
                p.arrays_mut()[a].data[i] = orig;
                Ok(point_loss_grad(objective, &x, &z, point, &probs?, &prior, &sched)?.0)
            },
            |a, i| grads.0[a].data[i],
        )?);
    }
    Ok((worst, 1e-4))
}

fn gradient_cases(seed: u64) -> Vec<Case> {
    let mut cases = Vec::new();
    let objectives = [
        ("denoiser_nelbo_uniform", Objective::NelboDiscrete { steps: 8 }, false),
        ("denoiser_udlm", Objective::UdlmContinuous, false),
        ("denoiser_sedd_form", Objective::SeddForm, false),
        ("denoiser_nelbo_absorbing", Objective::NelboDiscrete { steps: 8 }, true),
        ("denoiser_mdlm", Objective::MdlmContinuous, true),
    ];
    for (i, (name, obj, absorbing)) in objectives.into_iter().enumerate() {
        cases.push(case(name, move || denoiser_loss_case(seed, 60 + i as u64, obj, absorbing)));
    }
    cases.push(case("classifier_params_and_input", move || {
        let mut rng = rng_for(seed, 70);
        let sched = NoiseSchedule::default();
        let mut worst = 0.0f64;
        for _ in 0..3 {
            let shapes = ClassifierShapes {
                vocab: rng.gen_range(2..=5),
                seq_len: rng.gen_range(1..=4),
                embed: rng.gen_range(2..=4),
                hidden: rng.gen_range(2..=5),
                classes: rng.gen_range(2..=4),
            };
            let mut c = ClassifierParams::random(shapes, sched, &mut ChaCha8Rng::seed_from_u64(rng.gen()))?;
            let z: Vec<Token> = (0..shapes.seq_len).map(|_| rng.gen_range(0..shapes.vocab)).collect();
            let y = rng.gen_range(0..shapes.classes);
            let t = rng.gen_range(0.05..0.95);
            let mut adj = vec![0.0; shapes.classes];
            adj[y] = -1.0;
            let (grads, input) = c.forward_pass(&z, t)?.backward(adj);
            let lens: Vec<usize> = c.arrays().iter().map(|m| m.data.len()).collect();
            worst = worst.max(fd_params(
                lens.len(),
                |a| lens[a],
                |a, i, h| {
                    let orig = c.arrays()[a].data[i];
                    c.arrays_mut()[a].data[i] = orig + h;
                    let lp = c.log_probs(&z, t);
                    c.arrays_mut()[a].data[i] = orig;
                    Ok(-lp?[y])
                },
                |a, i| grads.0[a].data[i],
            )?);
            let base = Matrix::one_hot_rows(&z, shapes.vocab);
            worst = worst.max(fd_params(
                1,
                |_| base.data.len(),
                |_, i, h| {
                    let mut m = base.clone();
                    m.data[i] += h;
                    Ok(-c.forward_pass_relaxed(m, t)?.log_probs()[y])
                },
                |_, i| input.data[i],
            )?);
        }
        Ok((worst, 1e-4))
    }));
    cases.push(case("per_token_losses", move || {
        let mut rng = rng_for(seed, 71);
        let sched = NoiseSchedule::default();
        let mut worst = 0.0f64;
        for _ in 0..200 {
            let n = rng.gen_range(2..=6);
            let row = random_simplex(n, &mut rng);
            let (x, z) = (rng.gen_range(0..n), rng.gen_range(0..n));
            let t = rng.gen_range(0.05..0.95);
            let step = Step::from_times(&sched, t, t * rng.gen_range(0.0..0.99))?;
            let prior = PriorSpec::uniform(n)?;
            let (_, g_kl) = diffusion_kl_grad(x, z, step, &row, &prior)?;
            let (_, g_ud) = udlm_integrand_grad(x, z, t, &row, &sched)?;
            // The closed forms assume a normalized row, so differences are
            // taken along e_k - e_j, which stays on the simplex; a softmax
            // output layer only ever sees this projection.
            let h = 1e-6;
            for k in 0..n {
                let j = (k + 1) % n;
                let mut plus = row.clone();
                plus[k] += h;
                plus[j] -= h;
                let mut minus = row.clone();
                minus[k] -= h;
                minus[j] += h;
                let fd = (diffusion_kl(x, z, step, &plus, &prior)? - diffusion_kl(x, z, step, &minus, &prior)?) / (2.0 * h);
                worst = worst.max(rel_err(fd, g_kl[k] - g_kl[j]));
                let fd = (udlm_integrand(x, z, t, &plus, &sched)? - udlm_integrand(x, z, t, &minus, &sched)?) / (2.0 * h);
                worst = worst.max(rel_err(fd, g_ud[k] - g_ud[j]));
            }
        }
        Ok((worst, 1e-4))
    }));
    cases
}
