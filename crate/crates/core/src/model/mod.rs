//! Clean-data predictors `x_theta(z_t, t, y)` and noised-latent classifiers
//! `p_phi(y | z_t, t)`.

mod checkpoint;
mod mlp;
mod optim;
mod tabular;
mod train;

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, ClassifierModel, DenoiserModel, ModelKind, CHECKPOINT_FORMAT_VERSION};
pub use mlp::{
    ClassifierParams, ClassifierPass, ClassifierShapes, DenoiserParams, DenoiserPass, DenoiserShapes, ParamGrads,
};
pub use optim::{Optimizer, OptimizerKind};
pub use tabular::{TabularClassifier, TabularDenoiser};
pub use train::{
    condition_dropout, train_classifier, train_denoiser, ClassifierTrainConfig, TrainConfig, TrainReport,
};

use crate::autodiff::Matrix;
use crate::categorical::Categorical;
use crate::error::{domain, Result};
use crate::schedule::NoiseSchedule;
use crate::vocab::Token;

/// Conditioning input of a denoiser.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Condition {
    /// The conditioner is masked out; the network acts as the unconditional model.
    Dropped,
    Class(usize),
}

impl Condition {
    pub fn from_label(label: Option<usize>) -> Self {
        label.map_or(Self::Dropped, Self::Class)
    }
}

/// Per-position predictor of clean tokens.
pub trait Denoiser: Sync {
    fn vocab_size(&self) -> usize;
    fn seq_len(&self) -> usize;
    /// Number of conditioning classes; zero for unconditional models.
    fn num_classes(&self) -> usize;
    fn schedule(&self) -> &NoiseSchedule;

    /// `L x N` matrix whose rows are the predicted distributions over clean tokens.
    fn predict(&self, z: &[Token], t: f64, cond: Condition) -> Result<Matrix>;

    fn check_input(&self, z: &[Token], t: f64, cond: Condition) -> Result<()> {
        if z.len() != self.seq_len() {
            return crate::error::shape(format!("sequence length {} != model length {}", z.len(), self.seq_len()));
        }
        if let Some(bad) = z.iter().find(|&&v| v >= self.vocab_size()) {
            return domain(format!("token {bad} outside vocabulary of size {}", self.vocab_size()));
        }
        if !(0.0..=1.0).contains(&t) {
            return domain(format!("time {t} outside [0, 1]"));
        }
        if let Condition::Class(k) = cond {
            if k >= self.num_classes() {
                return domain(format!("condition {k} >= number of classes {}", self.num_classes()));
            }
        }
        Ok(())
    }
}

/// Rows of [`Denoiser::predict`] as categorical distributions.
pub fn denoise<D: Denoiser + ?Sized>(model: &D, z: &[Token], t: f64, cond: Condition) -> Result<Vec<Categorical>> {
    let m = model.predict(z, t, cond)?;
    (0..m.rows).map(|r| Categorical::normalized(m.row(r).to_vec())).collect()
}

/// Default time below which a uniform-noise model copies its input.
pub const DEFAULT_COPY_FLOOR: f64 = 1e-4;

/// Wraps a denoiser so that `x_theta(z_t, t) = z_t` for `t <= t_floor`.
#[derive(Debug, Clone)]
pub struct CopyFloor<D> {
    pub inner: D,
    pub t_floor: f64,
}

impl<D: Denoiser> CopyFloor<D> {
    pub fn new(inner: D) -> Self {
        Self { inner, t_floor: DEFAULT_COPY_FLOOR }
    }
}

impl<D: Denoiser> Denoiser for CopyFloor<D> {
    fn vocab_size(&self) -> usize {
        self.inner.vocab_size()
    }
    fn seq_len(&self) -> usize {
        self.inner.seq_len()
    }
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }
    fn schedule(&self) -> &NoiseSchedule {
        self.inner.schedule()
    }
    fn predict(&self, z: &[Token], t: f64, cond: Condition) -> Result<Matrix> {
        if t <= self.t_floor {
            self.check_input(z, t, cond)?;
            return Ok(Matrix::one_hot_rows(z, self.vocab_size()));
        }
        self.inner.predict(z, t, cond)
    }
}

/// `denoise` with the small-time copy parameterization of uniform-noise models.
pub fn denoise_with_copy_floor<D: Denoiser + ?Sized>(
    model: &D,
    z: &[Token],
    t: f64,
    cond: Condition,
    t_floor: f64,
) -> Result<Vec<Categorical>> {
    if t <= t_floor {
        model.check_input(z, t, cond)?;
        return z.iter().map(|&v| Categorical::one_hot(model.vocab_size(), v)).collect();
    }
    denoise(model, z, t, cond)
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }
    fn seq_len(&self) -> usize {
        (**self).seq_len()
    }
    fn num_classes(&self) -> usize {
        (**self).num_classes()
    }
    fn schedule(&self) -> &NoiseSchedule {
        (**self).schedule()
    }
    fn predict(&self, z: &[Token], t: f64, cond: Condition) -> Result<Matrix> {
        (**self).predict(z, t, cond)
    }
}

/// Classifier over noised sequences.
pub trait Classifier: Sync {
    fn num_classes(&self) -> usize;
    fn seq_len(&self) -> usize;
    fn vocab_size(&self) -> usize;

    /// Length-`K` vector of `log p(y | z, t)`.
    fn log_probs(&self, z: &[Token], t: f64) -> Result<Vec<f64>>;

    /// `log p(y | z, t)` and its gradient with respect to the one-hot
    /// encoding of `z`, treated as a real `L x N` matrix.
    fn log_prob_with_input_grad(&self, z: &[Token], t: f64, y: usize) -> Result<(f64, Matrix)>;
}

impl<C: Classifier + ?Sized> Classifier for &C {
    fn num_classes(&self) -> usize {
        (**self).num_classes()
    }
    fn seq_len(&self) -> usize {
        (**self).seq_len()
    }
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }
    fn log_probs(&self, z: &[Token], t: f64) -> Result<Vec<f64>> {
        (**self).log_probs(z, t)
    }
    fn log_prob_with_input_grad(&self, z: &[Token], t: f64, y: usize) -> Result<(f64, Matrix)> {
        (**self).log_prob_with_input_grad(z, t, y)
    }
}

/// Counts forward and backward passes through a wrapped classifier.
#[derive(Debug, Default)]
pub struct CountingClassifier<C> {
    pub inner: C,
    forward: AtomicUsize,
    backward: AtomicUsize,
}

impl<C> CountingClassifier<C> {
    pub fn new(inner: C) -> Self {
        Self { inner, forward: AtomicUsize::new(0), backward: AtomicUsize::new(0) }
    }

    pub fn forward_calls(&self) -> usize {
        self.forward.load(Ordering::SeqCst)
    }

    pub fn backward_calls(&self) -> usize {
        self.backward.load(Ordering::SeqCst)
    }

    pub fn reset(&self) {
        self.forward.store(0, Ordering::SeqCst);
        self.backward.store(0, Ordering::SeqCst);
    }
}

impl<C: Classifier> Classifier for CountingClassifier<C> {
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }
    fn seq_len(&self) -> usize {
        self.inner.seq_len()
    }
    fn vocab_size(&self) -> usize {
        self.inner.vocab_size()
    }
    fn log_probs(&self, z: &[Token], t: f64) -> Result<Vec<f64>> {
        self.forward.fetch_add(1, Ordering::SeqCst);
        self.inner.log_probs(z, t)
    }
    fn log_prob_with_input_grad(&self, z: &[Token], t: f64, y: usize) -> Result<(f64, Matrix)> {
        self.forward.fetch_add(1, Ordering::SeqCst);
        self.backward.fetch_add(1, Ordering::SeqCst);
        self.inner.log_prob_with_input_grad(z, t, y)
    }
}
