//! Ancestral sampling from the reverse process, optionally guided.
//!
//! Generation walks the grid `t_i = i / T` from `t = 1` down to `t = 0`. The
//! last step lands on `s = 0`, where the reverse distribution is the model's
//! distribution over clean tokens given `z_{1/T}`; `final_decode` chooses
//! between sampling it and taking its argmax.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::categorical::{argmax, sample_index, Categorical};
use crate::data::detokenize;
use crate::error::{domain, shape, Error, Result};
use crate::forward::{model_posterior, PriorSpec, Step};
use crate::guidance::{cbg_exact, cbg_taylor, cfg_combine, ClassifierTime, GuidanceConfig, GuidanceMode};
use crate::model::{Classifier, Condition, Denoiser};
use crate::vocab::{Sequence, Token, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinalDecode {
    #[default]
    Sample,
    Argmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SampleRequest {
    pub num_sequences: usize,
    pub seq_len: usize,
    /// Number of reverse steps `T`.
    pub steps: usize,
    pub guidance: GuidanceConfig,
    pub seed: u64,
    pub final_decode: FinalDecode,
}

impl SampleRequest {
    pub fn new(num_sequences: usize, seq_len: usize, steps: usize, seed: u64) -> Self {
        Self { num_sequences, seq_len, steps, guidance: GuidanceConfig::none(), seed, final_decode: FinalDecode::Sample }
    }

    pub fn with_guidance(mut self, guidance: GuidanceConfig) -> Self {
        self.guidance = guidance;
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleDiagnostics {
    pub steps: usize,
    /// Per position: how often the token changed after it first held a
    /// non-mask value produced by a reverse step.
    pub edits: Vec<usize>,
}

impl SampleDiagnostics {
    pub fn total_edits(&self) -> usize {
        self.edits.iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeneratedSequence {
    pub sequence: Sequence,
    pub diagnostics: SampleDiagnostics,
}

/// Draws `z_1` from the prior: i.i.d. uniform tokens, or all mask.
pub fn prior_draw<R: Rng + ?Sized>(prior: &PriorSpec, len: usize, rng: &mut R) -> Result<Sequence> {
    if len == 0 {
        return domain("sequence length must be at least 1");
    }
    let pi = prior.pi_vector();
    let tokens = match prior.mask() {
        Some(m) => vec![m; len],
        None => (0..len).map(|_| sample_index(&pi, rng.gen::<f64>())).collect(),
    };
    Ok(Sequence::from_raw(tokens))
}

fn posterior_rows<D: Denoiser + ?Sized>(
    model: &D,
    z_t: &[Token],
    t: f64,
    step: Step,
    cond: Condition,
    prior: &PriorSpec,
) -> Result<Vec<Categorical>> {
    let x = model.predict(z_t, t, cond)?;
    z_t.iter()
        .enumerate()
        .map(|(l, &z)| model_posterior(z, x.row(l), step, prior).map(Categorical::from_raw))
        .collect()
}

/// Guided per-position reverse distributions `p(z_s | z_t)`.
///
/// With mode `none` the denoiser is conditioned on `target_class` when one is
/// given. Classifier-based modes use the denoiser with the condition dropped.
#[allow(clippy::too_many_arguments)]
pub fn reverse_distribution<D: Denoiser + ?Sized, C: Classifier + ?Sized>(
    z_t: &[Token],
    t: f64,
    s: f64,
    model: &D,
    prior: &PriorSpec,
    guidance: &GuidanceConfig,
    classifier: Option<&C>,
) -> Result<Vec<Categorical>> {
    if !(0.0 <= s && s < t && t <= 1.0) {
        return domain(format!("reverse step needs 0 <= s < t <= 1, got s={s}, t={t}"));
    }
    if prior.n() != model.vocab_size() {
        return shape("prior and denoiser disagree on the vocabulary size");
    }
    let step = Step::from_times(model.schedule(), t, s)?;
    match guidance.mode {
        GuidanceMode::None => {
            posterior_rows(model, z_t, t, step, Condition::from_label(guidance.target_class), prior)
        }
        GuidanceMode::Cfg => {
            let y = guidance.target_class.ok_or_else(|| Error::Domain("cfg guidance needs a target class".into()))?;
            let cond = posterior_rows(model, z_t, t, step, Condition::Class(y), prior)?;
            let uncond = posterior_rows(model, z_t, t, step, Condition::Dropped, prior)?;
            cfg_combine(&cond, &uncond, guidance.gamma)
        }
        GuidanceMode::CbgExact | GuidanceMode::CbgTaylor => {
            let y = guidance.target_class.ok_or_else(|| Error::Domain("classifier guidance needs a target class".into()))?;
            let c = classifier.ok_or_else(|| Error::Domain("classifier guidance needs a classifier".into()))?;
            let rows = posterior_rows(model, z_t, t, step, Condition::Dropped, prior)?;
            let time = match guidance.classifier_time {
                ClassifierTime::Destination => s,
                ClassifierTime::Source => t,
            };
            if guidance.mode == GuidanceMode::CbgExact {
                cbg_exact(c, z_t, time, &rows, y, guidance.gamma)
            } else {
                cbg_taylor(c, z_t, time, &rows, y, guidance.gamma)
            }
        }
    }
}

/// One ancestral step `z_t -> z_s`, sampling positions independently.
#[allow(clippy::too_many_arguments)]
pub fn reverse_step<D: Denoiser + ?Sized, C: Classifier + ?Sized, R: Rng + ?Sized>(
    z_t: &[Token],
    t: f64,
    s: f64,
    model: &D,
    prior: &PriorSpec,
    guidance: &GuidanceConfig,
    classifier: Option<&C>,
    rng: &mut R,
) -> Result<Vec<Token>> {
    let rows = reverse_distribution(z_t, t, s, model, prior, guidance, classifier)?;
    Ok(rows.iter().map(|r| sample_index(r.probs(), rng.gen::<f64>())).collect())
}

fn check_request<D: Denoiser + ?Sized, C: Classifier + ?Sized>(
    request: &SampleRequest,
    model: &D,
    prior: &PriorSpec,
    classifier: Option<&C>,
) -> Result<()> {
    if request.steps == 0 {
        return domain("number of reverse steps must be at least 1");
    }
    if request.seq_len != model.seq_len() {
        return shape(format!("requested length {} != model length {}", request.seq_len, model.seq_len()));
    }
    if prior.n() != model.vocab_size() {
        return shape("prior and denoiser disagree on the vocabulary size");
    }
    let g = &request.guidance;
    let classes = match (g.mode, classifier) {
        (GuidanceMode::CbgExact | GuidanceMode::CbgTaylor, None) => {
            return domain(format!("{} guidance needs a classifier", g.mode.name()))
        }
        (GuidanceMode::CbgExact | GuidanceMode::CbgTaylor, Some(c)) => {
            if c.seq_len() != model.seq_len() || c.vocab_size() != model.vocab_size() {
                return shape("classifier shapes disagree with the denoiser");
            }
            c.num_classes()
        }
        _ => model.num_classes(),
    };
    if g.mode == GuidanceMode::None {
        if let Some(y) = g.target_class {
            if y >= model.num_classes() {
                return domain(format!("condition {y} >= number of classes {}", model.num_classes()));
            }
        }
    }
    g.validate(classes)
}

fn generate_one<D: Denoiser + ?Sized, C: Classifier + ?Sized>(
    request: &SampleRequest,
    model: &D,
    prior: &PriorSpec,
    classifier: Option<&C>,
    index: usize,
) -> Result<GeneratedSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(request.seed);
    rng.set_stream(index as u64);
    let mask = prior.mask();
    let mut z = prior_draw(prior, request.seq_len, &mut rng)?.into_tokens();
    let mut committed = vec![false; z.len()];
    let mut edits = vec![0usize; z.len()];
    let steps = request.steps;
    for i in (1..=steps).rev() {
        let t = i as f64 / steps as f64;
        let s = (i - 1) as f64 / steps as f64;
        let rows = reverse_distribution(&z, t, s, model, prior, &request.guidance, classifier)?;
        let next: Vec<Token> = rows
            .iter()
            .map(|r| {
                if i == 1 && request.final_decode == FinalDecode::Argmax {
                    argmax(r.probs())
                } else {
                    sample_index(r.probs(), rng.gen::<f64>())
                }
            })
            .collect();
        for l in 0..z.len() {
            if committed[l] && next[l] != z[l] {
                edits[l] += 1;
            }
            if Some(next[l]) != mask {
                committed[l] = true;
            }
        }
        z = next;
    }
    Ok(GeneratedSequence { sequence: Sequence::from_raw(z), diagnostics: SampleDiagnostics { steps, edits } })
}

/// Generates `request.num_sequences` sequences. Each sequence uses its own
/// ChaCha stream keyed by `(seed, index)`, so the output does not depend on
/// scheduling.
pub fn generate<D: Denoiser + ?Sized, C: Classifier + ?Sized>(
    request: &SampleRequest,
    model: &D,
    prior: &PriorSpec,
    classifier: Option<&C>,
) -> Result<Vec<GeneratedSequence>> {
    check_request(request, model, prior, classifier)?;
    (0..request.num_sequences)
        .into_par_iter()
        .map(|i| generate_one(request, model, prior, classifier, i))
        .collect()
}

/// [`generate`] without a classifier.
pub fn generate_unguided<D: Denoiser + ?Sized>(
    request: &SampleRequest,
    model: &D,
    prior: &PriorSpec,
) -> Result<Vec<GeneratedSequence>> {
    generate::<D, crate::model::ClassifierModel>(request, model, prior, None)
}

#[derive(Serialize)]
struct SampleMetadata<'a> {
    num_sequences: usize,
    seq_len: usize,
    steps: usize,
    seed: u64,
    mode: &'a str,
    gamma: f64,
    target_class: Option<usize>,
    final_decode: FinalDecode,
}

/// Path of the metadata file written next to a sample file.
pub fn metadata_path(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".meta.json");
    PathBuf::from(name)
}

/// Writes one detokenized sequence per line, plus a JSON sidecar recording
/// how the samples were drawn.
pub fn write_samples(path: &Path, samples: &[GeneratedSequence], vocab: &Vocabulary, request: &SampleRequest) -> Result<()> {
    let mut text = String::new();
    for g in samples {
        text.push_str(&detokenize(g.sequence.tokens(), vocab)?);
        text.push('\n');
    }
    fs::write(path, text)?;
    let meta = SampleMetadata {
        num_sequences: samples.len(),
        seq_len: request.seq_len,
        steps: request.steps,
        seed: request.seed,
        mode: request.guidance.mode.name(),
        gamma: request.guidance.gamma,
        target_class: request.guidance.target_class,
        final_decode: request.final_decode,
    };
    fs::write(metadata_path(path), serde_json::to_string_pretty(&meta)? + "\n")?;
    Ok(())
}
