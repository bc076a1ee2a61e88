//! Labeled-corpus experiment shared by the acceptance target and the
//! calibration example.

#![allow(dead_code)]

use std::time::Instant;

use udlm::data::{gen_labeled_corpus, Dataset, LabelRule, LabeledCorpusConfig};
use udlm::guidance::{GuidanceConfig, GuidanceMode};
use udlm::loss::Objective;
use udlm::metrics::{gamma_sweep, kmer_js, SweepRow, SweepSpec};
use udlm::model::{train_denoiser, ClassifierModel, DenoiserParams, DenoiserShapes, TrainConfig};
use udlm::sampler::{generate_unguided, SampleRequest};
use udlm::{NoiseSchedule, PriorSpec, Token};

pub const N: usize = 6;
pub const LEN: usize = 16;
pub const COUNT: usize = 10_000;
pub const CONCENTRATION: f64 = 0.3;
pub const RULE: LabelRule = LabelRule::MajorityToken;
pub const EMBED: usize = 16;
pub const HIDDEN: usize = 32;
pub const EPOCHS: usize = 8;
pub const SWEEP_GAMMAS: [f64; 3] = [0.0, 1.0, 2.0];
pub const SWEEP_PER_CLASS: usize = 100;
pub const SWEEP_STEPS: usize = 64;
pub const JS_SAMPLES: usize = 10_000;
pub const JS_STEPS: usize = 128;
pub const FAST_STEPS: usize = 16;
pub const SLOW_STEPS: usize = 256;
pub const GAP_SAMPLES: usize = 1_000;
pub const GAP_SEEDS: [u64; 5] = [11, 12, 13, 14, 15];

pub struct Trained {
    pub prior: PriorSpec,
    pub model: DenoiserParams,
    pub loss_trace: Vec<f64>,
}

pub fn corpus(seed: u64) -> Dataset {
    gen_labeled_corpus(&LabeledCorpusConfig { n: N, len: LEN, count: COUNT, rule: RULE, concentration: CONCENTRATION, seed })
        .unwrap()
}

pub fn rule(tokens: &[Token]) -> usize {
    RULE.label(tokens, N)
}

fn train(data: &Dataset, prior: PriorSpec, objective: Objective, seed: u64) -> Trained {
    let mask = prior.mask();
    let shapes = DenoiserShapes { vocab: prior.n(), seq_len: LEN, embed: EMBED, hidden: HIDDEN, classes: N, mask };
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
    let init = DenoiserParams::init(shapes, NoiseSchedule::default(), &mut rng).unwrap();
    let config = TrainConfig { epochs: EPOCHS, condition_dropout: 0.2, seed, ..TrainConfig::new(objective) };
    let report = train_denoiser(data, &prior, init, &config).unwrap();
    Trained { prior, model: report.params, loss_trace: report.loss_trace }
}

pub fn train_uniform(data: &Dataset, seed: u64) -> Trained {
    train(data, PriorSpec::uniform(N).unwrap(), Objective::UdlmContinuous, seed)
}

pub fn train_absorbing(data: &Dataset, seed: u64) -> Trained {
    train(data, PriorSpec::absorbing(N + 1, N).unwrap(), Objective::MdlmContinuous, seed)
}

pub fn cfg_sweep(m: &Trained, data: &Dataset, seed: u64) -> Vec<SweepRow> {
    let reference: Vec<&[Token]> = data.sequences.iter().map(|s| s.tokens()).collect();
    let spec = SweepSpec {
        template: SampleRequest::new(SWEEP_PER_CLASS, LEN, SWEEP_STEPS, seed)
            .with_guidance(GuidanceConfig::new(GuidanceMode::Cfg, 1.0, None)),
        classes: (0..N).collect(),
        num_classes: N,
        rule: &rule,
        reference: &reference,
        k: 2,
    };
    gamma_sweep::<_, ClassifierModel, _>(&m.model, &m.prior, None, &SWEEP_GAMMAS, &spec).unwrap()
}

pub fn unguided_js(m: &Trained, data: &Dataset, num: usize, steps: usize, seed: u64) -> f64 {
    let samples = generate_unguided(&SampleRequest::new(num, LEN, steps, seed), &m.model, &m.prior).unwrap();
    let samples: Vec<Vec<Token>> = samples.into_iter().map(|g| g.sequence.into_tokens()).collect();
    let reference: Vec<&[Token]> = data.sequences.iter().map(|s| s.tokens()).collect();
    kmer_js(&samples, &reference, 2).unwrap()
}

/// `JS(fast) - JS(slow)` per seed.
pub fn fast_sampling_gaps(m: &Trained, data: &Dataset) -> Vec<f64> {
    GAP_SEEDS
        .iter()
        .map(|&seed| {
            unguided_js(m, data, GAP_SAMPLES, FAST_STEPS, seed) - unguided_js(m, data, GAP_SAMPLES, SLOW_STEPS, seed)
        })
        .collect()
}

pub fn timed<T>(label: &str, f: impl FnOnce() -> T) -> T {
    let start = Instant::now();
    let out = f();
    eprintln!("[{label}: {:.1} s]", start.elapsed().as_secs_f64());
    out
}
