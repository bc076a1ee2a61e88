//! Python bindings. Sequences cross the boundary as strings over a
//! vocabulary, distributions as lists of floats.

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use udlm::data::{detokenize, gen_labeled_corpus, tokenize, Dataset, LabelRule, LabeledCorpusConfig};
use udlm::guidance::{cfg_combine, GuidanceConfig, GuidanceMode};
use udlm::loss::{bpc, diffusion_kl, nelbo_discrete_exact, udlm_integrand, Objective};
use udlm::metrics::kmer_js;
use udlm::model::{
    train_denoiser, Checkpoint, Condition, Denoiser, DenoiserModel, DenoiserParams, DenoiserShapes, ModelKind,
    TabularDenoiser, TrainConfig,
};
use udlm::sampler::{generate, FinalDecode, SampleRequest};
use udlm::verify::{run_suite, Suite};
use udlm::{Categorical, NoiseSchedule, PriorSpec, Sequence, Step, Vocabulary};

fn err(e: udlm::Error) -> PyErr {
    match e {
        udlm::Error::Numeric(_) | udlm::Error::Training(_) => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn prior_for(kind: &str, n: usize) -> PyResult<PriorSpec> {
    match kind {
        "uniform" => PriorSpec::uniform(n).map_err(err),
        "absorbing" => PriorSpec::absorbing(n, n - 1).map_err(err),
        _ => Err(PyValueError::new_err(format!("unknown prior {kind:?}"))),
    }
}

/// `q(z_s | z_t, x)` over `n` tokens. For the absorbing prior the mask is
/// token `n - 1`.
#[pyfunction]
#[pyo3(signature = (z_t, x, t, s, n, prior = "uniform"))]
fn posterior(z_t: usize, x: usize, t: f64, s: f64, n: usize, prior: &str) -> PyResult<Vec<f64>> {
    let prior = prior_for(prior, n)?;
    let step = Step::from_times(&NoiseSchedule::default(), t, s).map_err(err)?;
    Ok(udlm::forward::posterior(z_t, x, step, &prior).map_err(err)?.into_probs())
}

#[pyfunction]
#[pyo3(signature = (x, z_t, t, s, x_theta, prior = "uniform"))]
fn kl_term(x: usize, z_t: usize, t: f64, s: f64, x_theta: Vec<f64>, prior: &str) -> PyResult<f64> {
    let prior = prior_for(prior, x_theta.len())?;
    let step = Step::from_times(&NoiseSchedule::default(), t, s).map_err(err)?;
    diffusion_kl(x, z_t, step, &x_theta, &prior).map_err(err)
}

/// Per-token continuous-time uniform-noise integrand.
#[pyfunction]
fn integrand(x: usize, z_t: usize, t: f64, x_theta: Vec<f64>) -> PyResult<f64> {
    udlm_integrand(x, z_t, t, &x_theta, &NoiseSchedule::default()).map_err(err)
}

/// Row-wise `p_c^gamma p_u^(1 - gamma)`, renormalized.
#[pyfunction]
#[pyo3(name = "cfg")]
fn cfg_combine_rows(cond: Vec<Vec<f64>>, uncond: Vec<Vec<f64>>, gamma: f64) -> PyResult<Vec<Vec<f64>>> {
    let to = |rows: Vec<Vec<f64>>| rows.into_iter().map(Categorical::new).collect::<udlm::Result<Vec<_>>>();
    let out = cfg_combine(&to(cond).map_err(err)?, &to(uncond).map_err(err)?, gamma).map_err(err)?;
    Ok(out.into_iter().map(Categorical::into_probs).collect())
}

#[pyfunction]
#[pyo3(signature = (samples, reference, k = 2))]
fn kmer_divergence(samples: Vec<String>, reference: Vec<String>, k: usize) -> PyResult<f64> {
    let chars = |v: &[String]| v.iter().map(|s| s.chars().map(|c| c as usize).collect::<Vec<_>>()).collect::<Vec<_>>();
    kmer_js(&chars(&samples), &chars(&reference), k).map_err(err)
}

/// Sequences over `a, b, ...` and their majority-token labels.
#[pyfunction]
#[pyo3(signature = (n, length, count, concentration = 0.3, seed = 0))]
fn labeled_corpus(n: usize, length: usize, count: usize, concentration: f64, seed: u64) -> PyResult<(Vec<String>, Vec<usize>)> {
    let config = LabeledCorpusConfig { n, len: length, count, rule: LabelRule::MajorityToken, concentration, seed };
    let data = gen_labeled_corpus(&config).map_err(err)?;
    let vocab = Vocabulary::alphabetic(n).map_err(err)?;
    let seqs = data.sequences.iter().map(|s| detokenize(s.tokens(), &vocab)).collect::<udlm::Result<_>>().map_err(err)?;
    Ok((seqs, data.labels.unwrap_or_default()))
}

/// Runs a verification suite and returns its JSON report.
#[pyfunction]
#[pyo3(signature = (suite = "all", seed = 0))]
fn verify(suite: &str, seed: u64) -> PyResult<String> {
    run_suite(Suite::parse(suite).map_err(err)?, seed).to_json().map_err(err)
}

/// A trained or loaded model together with its vocabulary.
#[pyclass]
struct Model {
    inner: Checkpoint,
}

#[pymethods]
impl Model {
    /// Trains a denoiser on strings over `a, b, ...` (`vocab_size` symbols).
    #[staticmethod]
    #[pyo3(signature = (sequences, vocab_size, labels = None, kind = "uniform", architecture = "mlp", epochs = 10, hidden = 32, lr = 0.01, seed = 0))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        sequences: Vec<String>,
        vocab_size: usize,
        labels: Option<Vec<usize>>,
        kind: &str,
        architecture: &str,
        epochs: usize,
        hidden: usize,
        lr: f64,
        seed: u64,
    ) -> PyResult<Self> {
        let kind = ModelKind::parse(kind).map_err(err)?;
        let vocab = match kind {
            ModelKind::Uniform => Vocabulary::alphabetic(vocab_size),
            ModelKind::Absorbing => Vocabulary::alphabetic_with_mask(vocab_size),
        }
        .map_err(err)?;
        let prior = kind.prior(&vocab).map_err(err)?;
        let seqs: Vec<Sequence> = sequences.iter().map(|s| tokenize(s, &vocab)).collect::<udlm::Result<_>>().map_err(err)?;
        let classes = labels.as_ref().map_or(0, |l| l.iter().max().map_or(0, |m| m + 1));
        let data = Dataset::new(seqs, labels, classes).map_err(err)?;
        let schedule = NoiseSchedule::default();
        let denoiser = match architecture {
            "tabular" => DenoiserModel::Tabular(TabularDenoiser::from_dataset(&data, prior, schedule).map_err(err)?),
            "mlp" => {
                let shapes = DenoiserShapes {
                    vocab: vocab.size(),
                    seq_len: data.seq_len(),
                    embed: hidden.div_ceil(2),
                    hidden,
                    classes,
                    mask: vocab.mask_index(),
                };
                let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
                let init = DenoiserParams::init(shapes, schedule, &mut rng).map_err(err)?;
                let objective = match kind {
                    ModelKind::Uniform => Objective::UdlmContinuous,
                    ModelKind::Absorbing => Objective::MdlmContinuous,
                };
                let config = TrainConfig { epochs, lr, seed, ..TrainConfig::new(objective) };
                DenoiserModel::Mlp(train_denoiser(&data, &prior, init, &config).map_err(err)?.params)
            }
            _ => return Err(PyValueError::new_err(format!("unknown architecture {architecture:?}"))),
        };
        Ok(Self { inner: Checkpoint::new(kind, vocab, denoiser, None).map_err(err)? })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Self { inner: Checkpoint::load(std::path::Path::new(path)).map_err(err)? })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(std::path::Path::new(path)).map_err(err)
    }

    #[getter]
    fn seq_len(&self) -> usize {
        self.inner.denoiser.seq_len()
    }

    #[getter]
    fn symbols(&self) -> Vec<String> {
        self.inner.vocab.symbols().to_vec()
    }

    /// Predicted clean-token distributions for a latent string at time `t`.
    #[pyo3(signature = (z, t, label = None))]
    fn predict(&self, z: &str, t: f64, label: Option<usize>) -> PyResult<Vec<Vec<f64>>> {
        let z = tokenize(z, &self.inner.vocab).map_err(err)?;
        let m = self.inner.denoiser.predict(z.tokens(), t, Condition::from_label(label)).map_err(err)?;
        Ok((0..m.rows).map(|r| m.row(r).to_vec()).collect())
    }

    #[pyo3(signature = (num, steps = 64, guidance = "none", gamma = 1.0, label = None, seed = 0, argmax = false))]
    #[allow(clippy::too_many_arguments)]
    fn sample(
        &self,
        num: usize,
        steps: usize,
        guidance: &str,
        gamma: f64,
        label: Option<usize>,
        seed: u64,
        argmax: bool,
    ) -> PyResult<Vec<String>> {
        let mode = GuidanceMode::parse(guidance).map_err(err)?;
        let request = SampleRequest {
            final_decode: if argmax { FinalDecode::Argmax } else { FinalDecode::Sample },
            ..SampleRequest::new(num, self.seq_len(), steps, seed).with_guidance(GuidanceConfig::new(mode, gamma, label))
        };
        let prior = self.inner.prior().map_err(err)?;
        let out = generate(&request, &self.inner.denoiser, &prior, self.inner.classifier.as_ref()).map_err(err)?;
        out.iter().map(|g| detokenize(g.sequence.tokens(), &self.inner.vocab)).collect::<udlm::Result<_>>().map_err(err)
    }

    /// Exact `steps`-step NELBO of one sequence in nats and bits per character.
    #[pyo3(signature = (sequence, steps = 32, label = None))]
    fn nelbo(&self, sequence: &str, steps: usize, label: Option<usize>) -> PyResult<(f64, f64)> {
        let x = tokenize(sequence, &self.inner.vocab).map_err(err)?;
        let prior = self.inner.prior().map_err(err)?;
        let v = nelbo_discrete_exact(x.tokens(), &self.inner.denoiser, Condition::from_label(label), steps, &prior)
            .map_err(err)?;
        Ok((v, bpc(v, x.len())))
    }
}

#[pymodule]
fn udlm_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Model>()?;
    m.add_function(wrap_pyfunction!(posterior, m)?)?;
    m.add_function(wrap_pyfunction!(kl_term, m)?)?;
    m.add_function(wrap_pyfunction!(integrand, m)?)?;
    m.add_function(wrap_pyfunction!(cfg_combine_rows, m)?)?;
    m.add_function(wrap_pyfunction!(kmer_divergence, m)?)?;
    m.add_function(wrap_pyfunction!(labeled_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(verify, m)?)?;
    Ok(())
}
