//! Minibatch training of denoisers and noised-latent classifiers.
//!
//! Each example draws its own randomness from a ChaCha stream keyed by
//! `(seed, epoch, example index)`, so results do not depend on the thread
//! count. Per-example gradients are summed within fixed-size chunks and the
//! chunk sums are added in order, which keeps the reduction order fixed.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ClassifierParams, Condition, DenoiserParams, Optimizer, OptimizerKind, ParamGrads};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::forward::{sample_latent, PriorSpec};
use crate::loss::{draw_point, point_loss_grad, Objective};
use crate::vocab::Token;

const REDUCTION_CHUNK: usize = 8;
const ORDER_SALT: u64 = 0x6a09_e667_f3bc_c908;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub objective: Objective,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    /// Probability of replacing an example's label by the dropped condition.
    pub condition_dropout: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(objective: Objective) -> Self {
        Self {
            objective,
            epochs: 10,
            batch_size: 64,
            lr: 1e-2,
            optimizer: OptimizerKind::adam(),
            condition_dropout: 0.10,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        Self { epochs: 10, batch_size: 64, lr: 1e-2, optimizer: OptimizerKind::adam(), seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport<P> {
    pub params: P,
    /// Mean per-example loss of every epoch.
    pub loss_trace: Vec<f64>,
    pub steps: u64,
}

/// Keeps `label` with probability `1 - p`, otherwise returns the dropped condition.
pub fn condition_dropout<R: Rng + ?Sized>(label: Option<usize>, p: f64, rng: &mut R) -> Condition {
    match label {
        Some(y) if rng.gen::<f64>() >= p => Condition::Class(y),
        _ => Condition::Dropped,
    }
}

fn example_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((epoch as u64) << 32) | index as u64);
    rng
}

fn epoch_order(seed: u64, epoch: usize, count: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ORDER_SALT);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut rng);
    order
}

/// Sums `(loss, grads)` over `batch` in a thread-count-independent order.
fn reduce_batch<F>(batch: &[usize], zero: &ParamGrads, f: F) -> Result<(f64, ParamGrads)>
where
    F: Fn(usize) -> Result<(f64, ParamGrads)> + Sync,
{
    let chunks: Vec<Result<(f64, ParamGrads)>> = batch
        .par_chunks(REDUCTION_CHUNK)
        .map(|chunk| {
            let mut loss = 0.0;
            let mut grads = zero.clone();
            for &i in chunk {
                let (l, g) = f(i)?;
                loss += l;
                grads.add_assign(&g);
            }
            Ok((loss, grads))
        })
        .collect();
    let mut loss = 0.0;
    let mut grads = zero.clone();
    for c in chunks {
        let (l, g) = c?;
        loss += l;
        grads.add_assign(&g);
    }
    Ok((loss, grads))
}

fn check_training(data: &Dataset, seq_len: usize, vocab: usize, epochs: usize, batch: usize, lr: f64) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Training("empty dataset".into()));
    }
    if data.seq_len() != seq_len {
        return Err(Error::Training(format!("dataset length {} != model length {seq_len}", data.seq_len())));
    }
    if data.sequences.iter().flat_map(|s| s.tokens()).any(|&v| v >= vocab) {
        return Err(Error::Training("dataset token outside the model vocabulary".into()));
    }
    if epochs == 0 || batch == 0 || !(lr.is_finite() && lr > 0.0) {
        return Err(Error::Training(format!("invalid schedule: epochs={epochs}, batch={batch}, lr={lr}")));
    }
    Ok(())
}

fn draw_latent_sequence(x: &[Token], alpha: f64, prior: &PriorSpec, rng: &mut ChaCha8Rng) -> Result<Vec<Token>> {
    x.iter().map(|&v| sample_latent(v, alpha, prior, rng)).collect()
}

pub fn train_denoiser(
    data: &Dataset,
    prior: &PriorSpec,
    init: DenoiserParams,
    config: &TrainConfig,
) -> Result<TrainReport<DenoiserParams>> {
    let mut params = init;
    params.validate()?;
    let shapes = params.shapes;
    check_training(data, shapes.seq_len, shapes.vocab, config.epochs, config.batch_size, config.lr)?;
    config.objective.check_prior(prior)?;
    if prior.n() != shapes.vocab || prior.mask() != shapes.mask {
        return Err(Error::Training("prior disagrees with the model vocabulary or mask".into()));
    }
    if shapes.classes > 0 && (data.labels.is_none() || data.num_classes != shapes.classes) {
        return Err(Error::Training(format!(
            "conditional model with {} classes needs a dataset labeled with as many",
            shapes.classes
        )));
    }
    if !(0.0..=1.0).contains(&config.condition_dropout) {
        return Err(Error::Training("condition dropout must lie in [0, 1]".into()));
    }
    let schedule = params.schedule;
    let mut opt = Optimizer::new(config.optimizer, config.lr);
    let mut trace = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let order = epoch_order(config.seed, epoch, data.len());
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let zero = params.zero_grads();
            let snapshot = &params;
            let (loss, mut grads) = reduce_batch(batch, &zero, |i| {
                let mut rng = example_rng(config.seed, epoch, i);
                let x = data.sequences[i].tokens();
                let label = if shapes.classes > 0 { data.label(i) } else { None };
                let cond = condition_dropout(label, config.condition_dropout, &mut rng);
                let point = draw_point(config.objective, &schedule, &mut rng);
                let z = draw_latent_sequence(x, schedule.alpha(point.t)?, prior, &mut rng)?;
                let pass = snapshot.forward_pass(&z, point.t, cond)?;
                let (loss, adj) = point_loss_grad(config.objective, x, &z, point, pass.probs(), prior, &schedule)?;
                Ok((loss, pass.backward(adj)))
            })?;
            if !loss.is_finite() {
                return Err(Error::Training(format!("non-finite loss {loss} in epoch {epoch}")));
            }
            grads.scale(1.0 / batch.len() as f64);
            opt.step(params.arrays_mut(), &grads)?;
            epoch_loss += loss;
        }
        trace.push(epoch_loss / data.len() as f64);
    }
    Ok(TrainReport { params, loss_trace: trace, steps: opt.steps() })
}

/// Cross-entropy training of `p(y | z_t, t)` on latents drawn from the
/// forward process at uniformly drawn times.
pub fn train_classifier(
    data: &Dataset,
    prior: &PriorSpec,
    init: ClassifierParams,
    config: &ClassifierTrainConfig,
) -> Result<TrainReport<ClassifierParams>> {
    let mut params = init;
    params.validate()?;
    let shapes = params.shapes;
    check_training(data, shapes.seq_len, shapes.vocab, config.epochs, config.batch_size, config.lr)?;
    if data.labels.is_none() || data.num_classes != shapes.classes {
        return Err(Error::Training("classifier training needs labels matching the class count".into()));
    }
    if prior.n() != shapes.vocab {
        return Err(Error::Training("prior disagrees with the classifier vocabulary".into()));
    }
    let schedule = params.schedule;
    let mut opt = Optimizer::new(config.optimizer, config.lr);
    let mut trace = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let order = epoch_order(config.seed, epoch, data.len());
        let mut epoch_loss = 0.0;
        for batch in order.chunks(config.batch_size) {
            let zero = params.zero_grads();
            let snapshot = &params;
            let (loss, mut grads) = reduce_batch(batch, &zero, |i| {
                let mut rng = example_rng(config.seed, epoch, i);
                let x = data.sequences[i].tokens();
                let y = data.label(i).unwrap_or(0);
                let t = schedule.sample_time(&mut rng);
                let z = draw_latent_sequence(x, schedule.alpha(t)?, prior, &mut rng)?;
                let pass = snapshot.forward_pass(&z, t)?;
                let loss = -pass.log_probs()[y];
                let mut adj = vec![0.0; shapes.classes];
                adj[y] = -1.0;
                Ok((loss, pass.backward(adj).0))
            })?;
            if !loss.is_finite() {
                return Err(Error::Training(format!("non-finite classifier loss in epoch {epoch}")));
            }
            grads.scale(1.0 / batch.len() as f64);
            opt.step(params.arrays_mut(), &grads)?;
            epoch_loss += loss;
        }
        trace.push(epoch_loss / data.len() as f64);
    }
    Ok(TrainReport { params, loss_trace: trace, steps: opt.steps() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ClassifierShapes, DenoiserShapes};
    use crate::schedule::NoiseSchedule;
    use crate::vocab::Sequence;

    fn repeated(tokens: &[Token], copies: usize) -> Dataset {
        Dataset::unlabeled(vec![Sequence::new(tokens.to_vec(), 4).unwrap(); copies]).unwrap()
    }

    fn shapes(classes: usize, mask: Option<Token>, vocab: usize) -> DenoiserShapes {
        DenoiserShapes { vocab, seq_len: 3, embed: 8, hidden: 16, classes, mask }
    }

    #[test]
    fn dropout_rate_passes_chi_square() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let draws = 100_000;
        let dropped = (0..draws).filter(|_| condition_dropout(Some(1), 0.10, &mut rng) == Condition::Dropped).count();
        let e1 = 0.1 * draws as f64;
        let e0 = 0.9 * draws as f64;
        let d = dropped as f64;
        let chi2 = (d - e1).powi(2) / e1 + ((draws as f64 - d) - e0).powi(2) / e0;
        // 0.999 quantile of chi-square with one degree of freedom.
        assert!(chi2 < 10.83, "chi2 = {chi2}");
        assert_eq!(condition_dropout(None, 0.0, &mut rng), Condition::Dropped);
        assert_eq!(condition_dropout(Some(2), 0.0, &mut rng), Condition::Class(2));
        assert_eq!(condition_dropout(Some(2), 1.0, &mut rng), Condition::Dropped);
    }

    fn fit_single(objective: Objective, prior: PriorSpec, mask: Option<Token>, vocab: usize) -> TrainReport<DenoiserParams> {
        let data = repeated(&[2, 0, 1], 64);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let init = DenoiserParams::init(shapes(0, mask, vocab), NoiseSchedule::default(), &mut rng).unwrap();
        let mut cfg = TrainConfig::new(objective);
        cfg.epochs = 40;
        cfg.batch_size = 16;
        cfg.lr = 0.05;
        train_denoiser(&data, &prior, init, &cfg).unwrap()
    }

    #[test]
    fn single_sequence_loss_approaches_zero() {
        let cases = [
            (Objective::UdlmContinuous, PriorSpec::uniform(4).unwrap(), None, 4),
            (Objective::NelboDiscrete { steps: 16 }, PriorSpec::uniform(4).unwrap(), None, 4),
            (Objective::MdlmContinuous, PriorSpec::absorbing(5, 4).unwrap(), Some(4), 5),
        ];
        for (objective, prior, mask, vocab) in cases {
            let report = fit_single(objective, prior, mask, vocab);
            let first = report.loss_trace[0];
            let last = *report.loss_trace.last().unwrap();
            assert!(last <= 0.05 * first, "{}: {first} -> {last}", objective.name());
        }
    }

    #[test]
    fn training_is_reproducible() {
        let a = fit_single(Objective::UdlmContinuous, PriorSpec::uniform(4).unwrap(), None, 4);
        let b = fit_single(Objective::UdlmContinuous, PriorSpec::uniform(4).unwrap(), None, 4);
        assert_eq!(a.params, b.params);
        assert_eq!(a.loss_trace, b.loss_trace);
    }

    #[test]
    fn full_dropout_never_touches_class_rows() {
        let seqs = vec![Sequence::new(vec![0, 1, 2], 4).unwrap(), Sequence::new(vec![3, 3, 1], 4).unwrap()];
        let data = Dataset::new(seqs, Some(vec![0, 1]), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let init = DenoiserParams::init(shapes(2, None, 4), NoiseSchedule::default(), &mut rng).unwrap();
        let mut cfg = TrainConfig::new(Objective::UdlmContinuous);
        cfg.condition_dropout = 1.0;
        cfg.epochs = 5;
        let before = init.condition_embedding.clone().unwrap();
        let report = train_denoiser(&data, &PriorSpec::uniform(4).unwrap(), init, &cfg).unwrap();
        let after = report.params.condition_embedding.unwrap();
        assert_eq!(&after.data[..2 * 8], &before.data[..2 * 8]);
        assert_ne!(&after.data[2 * 8..], &before.data[2 * 8..]);
    }

    #[test]
    fn empty_and_mismatched_data_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let init = DenoiserParams::init(shapes(0, None, 4), NoiseSchedule::default(), &mut rng).unwrap();
        let data = Dataset::unlabeled(vec![Sequence::new(vec![0, 1], 4).unwrap()]).unwrap();
        let cfg = TrainConfig::new(Objective::UdlmContinuous);
        assert!(train_denoiser(&data, &PriorSpec::uniform(4).unwrap(), init.clone(), &cfg).is_err());
        let data = repeated(&[0, 1, 2], 2);
        let cfg = TrainConfig::new(Objective::MdlmContinuous);
        assert!(train_denoiser(&data, &PriorSpec::uniform(4).unwrap(), init, &cfg).is_err());
    }

    #[test]
    fn classifier_learns_a_prefix_rule() {
        let mut seqs = Vec::new();
        let mut labels = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..256 {
            let t: Vec<Token> = (0..3).map(|_| rng.gen_range(0..4)).collect();
            labels.push(usize::from(t[0] >= 2));
            seqs.push(Sequence::new(t, 4).unwrap());
        }
        let data = Dataset::new(seqs, Some(labels), 2).unwrap();
        let cs = ClassifierShapes { vocab: 4, seq_len: 3, embed: 8, hidden: 16, classes: 2 };
        let init = ClassifierParams::init(cs, NoiseSchedule::default(), &mut rng).unwrap();
        let cfg = ClassifierTrainConfig { epochs: 30, batch_size: 32, lr: 0.02, ..Default::default() };
        let report = train_classifier(&data, &PriorSpec::uniform(4).unwrap(), init, &cfg).unwrap();
        let first = report.loss_trace[0];
        let last = *report.loss_trace.last().unwrap();
        assert!(last < 0.9 * first, "{first} -> {last}");
        use crate::model::Classifier;
        let correct = data
            .sequences
            .iter()
            .zip(data.labels.as_ref().unwrap())
            .filter(|(s, &y)| {
                let lp = report.params.log_probs(s.tokens(), 0.01).unwrap();
                usize::from(lp[1] > lp[0]) == y
            })
            .count();
        assert!(correct as f64 / data.len() as f64 > 0.95, "{correct} / {}", data.len());
    }
}
