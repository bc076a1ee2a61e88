//! Versioned JSON checkpoints.
//!
//! Keys are written in a fixed order and floats in shortest round-trip form,
//! so identical models serialize to identical bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    Classifier, ClassifierParams, ClassifierShapes, Condition, Denoiser, DenoiserParams, DenoiserShapes,
    TabularClassifier, TabularDenoiser,
};
use crate::autodiff::Matrix;
use crate::error::{Error, Result};
use crate::forward::PriorSpec;
use crate::schedule::NoiseSchedule;
use crate::vocab::{Token, Vocabulary};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Uniform,
    Absorbing,
}

impl ModelKind {
    pub fn prior(&self, vocab: &Vocabulary) -> Result<PriorSpec> {
        match (self, vocab.mask_index()) {
            (Self::Uniform, None) => PriorSpec::uniform(vocab.size()),
            (Self::Absorbing, Some(m)) => PriorSpec::absorbing(vocab.size(), m),
            (Self::Uniform, Some(_)) => Err(Error::Checkpoint("uniform model with a mask token".into())),
            (Self::Absorbing, None) => Err(Error::Checkpoint("absorbing model without a mask token".into())),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "absorbing" => Ok(Self::Absorbing),
            _ => Err(Error::Domain(format!("unknown model kind {s:?}"))),
        }
    }
}

/// A denoiser of any supported architecture.
#[derive(Debug, Clone, PartialEq)]
pub enum DenoiserModel {
    Mlp(DenoiserParams),
    Tabular(TabularDenoiser),
}

impl Denoiser for DenoiserModel {
    fn vocab_size(&self) -> usize {
        match self {
            Self::Mlp(m) => m.vocab_size(),
            Self::Tabular(m) => m.vocab_size(),
        }
    }
    fn seq_len(&self) -> usize {
        match self {
            Self::Mlp(m) => Denoiser::seq_len(m),
            Self::Tabular(m) => Denoiser::seq_len(m),
        }
    }
    fn num_classes(&self) -> usize {
        match self {
            Self::Mlp(m) => Denoiser::num_classes(m),
            Self::Tabular(m) => Denoiser::num_classes(m),
        }
    }
    fn schedule(&self) -> &NoiseSchedule {
        match self {
            Self::Mlp(m) => m.schedule(),
            Self::Tabular(m) => m.schedule(),
        }
    }
    fn predict(&self, z: &[Token], t: f64, cond: Condition) -> Result<Matrix> {
        match self {
            Self::Mlp(m) => m.predict(z, t, cond),
            Self::Tabular(m) => m.predict(z, t, cond),
        }
    }
}

/// A classifier of any supported architecture.
#[derive(Debug, Clone, PartialEq)]
pub enum ClassifierModel {
    Mlp(ClassifierParams),
    Tabular(TabularClassifier),
}

impl Classifier for ClassifierModel {
    fn num_classes(&self) -> usize {
        match self {
            Self::Mlp(m) => Classifier::num_classes(m),
            Self::Tabular(m) => Classifier::num_classes(m),
        }
    }
    fn seq_len(&self) -> usize {
        match self {
            Self::Mlp(m) => Classifier::seq_len(m),
            Self::Tabular(m) => Classifier::seq_len(m),
        }
    }
    fn vocab_size(&self) -> usize {
        match self {
            Self::Mlp(m) => Classifier::vocab_size(m),
            Self::Tabular(m) => Classifier::vocab_size(m),
        }
    }
    fn log_probs(&self, z: &[Token], t: f64) -> Result<Vec<f64>> {
        match self {
            Self::Mlp(m) => m.log_probs(z, t),
            Self::Tabular(m) => m.log_probs(z, t),
        }
    }
    fn log_prob_with_input_grad(&self, z: &[Token], t: f64, y: usize) -> Result<(f64, Matrix)> {
        match self {
            Self::Mlp(m) => m.log_prob_with_input_grad(z, t, y),
            Self::Tabular(m) => m.log_prob_with_input_grad(z, t, y),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model_kind: ModelKind,
    pub vocab: Vocabulary,
    pub schedule: NoiseSchedule,
    pub denoiser: DenoiserModel,
    pub classifier: Option<ClassifierModel>,
}

#[derive(Serialize, Deserialize)]
struct NamedArray {
    name: String,
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Table {
    seq_len: usize,
    classes: usize,
    sequences: Vec<Vec<Token>>,
    labels: Option<Vec<usize>>,
}

#[derive(Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Architecture {
    Mlp,
    Tabular,
}

#[derive(Serialize, Deserialize)]
struct ClassifierDoc {
    architecture: Architecture,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    shapes: Option<ClassifierShapes>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    params: Option<Vec<NamedArray>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    table: Option<Table>,
}

#[derive(Serialize, Deserialize)]
struct Document {
    format_version: u32,
    model_kind: ModelKind,
    architecture: Architecture,
    vocab: Vocabulary,
    schedule: NoiseSchedule,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    shapes: Option<DenoiserShapes>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    params: Option<Vec<NamedArray>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    table: Option<Table>,
    classifier: Option<ClassifierDoc>,
}

fn named(names: Vec<&'static str>, arrays: Vec<&Matrix>) -> Vec<NamedArray> {
    names
        .into_iter()
        .zip(arrays)
        .map(|(name, m)| NamedArray { name: name.to_string(), rows: m.rows, cols: m.cols, data: m.data.clone() })
        .collect()
}

fn fill(names: Vec<&'static str>, targets: Vec<&mut Matrix>, arrays: Vec<NamedArray>) -> Result<()> {
    if arrays.len() != targets.len() {
        return Err(Error::Checkpoint(format!("expected {} parameter arrays, found {}", targets.len(), arrays.len())));
    }
    for ((name, target), a) in names.into_iter().zip(targets).zip(arrays) {
        if a.name != name {
            return Err(Error::Checkpoint(format!("expected array {name}, found {}", a.name)));
        }
        if (a.rows, a.cols) != target.shape() || a.data.len() != a.rows * a.cols {
            return Err(Error::Checkpoint(format!(
                "array {name} has shape {}x{} ({} values), expected {:?}",
                a.rows,
                a.cols,
                a.data.len(),
                target.shape()
            )));
        }
        target.data = a.data;
    }
    Ok(())
}

impl Checkpoint {
    pub fn new(
        model_kind: ModelKind,
        vocab: Vocabulary,
        denoiser: DenoiserModel,
        classifier: Option<ClassifierModel>,
    ) -> Result<Self> {
        let schedule = *denoiser.schedule();
        let ck = Self { model_kind, vocab, schedule, denoiser, classifier };
        ck.validate()?;
        Ok(ck)
    }

    pub fn prior(&self) -> Result<PriorSpec> {
        self.model_kind.prior(&self.vocab)
    }

    fn validate(&self) -> Result<()> {
        let prior = self.prior()?;
        if self.denoiser.vocab_size() != self.vocab.size() {
            return Err(Error::Checkpoint("denoiser vocabulary size disagrees with the vocabulary".into()));
        }
        match &self.denoiser {
            DenoiserModel::Mlp(p) => {
                p.validate()?;
                if p.shapes.mask != self.vocab.mask_index() {
                    return Err(Error::Checkpoint("denoiser mask disagrees with the vocabulary".into()));
                }
            }
            DenoiserModel::Tabular(t) => {
                if t.prior != prior {
                    return Err(Error::Checkpoint("tabular prior disagrees with the model kind".into()));
                }
            }
        }
        if let Some(c) = &self.classifier {
            if c.vocab_size() != self.vocab.size() || Classifier::seq_len(c) != self.denoiser.seq_len() {
                return Err(Error::Checkpoint("classifier shapes disagree with the denoiser".into()));
            }
            if let ClassifierModel::Mlp(p) = c {
                p.validate()?;
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let (architecture, shapes, params, table) = match &self.denoiser {
            DenoiserModel::Mlp(p) => (Architecture::Mlp, Some(p.shapes), Some(named(p.array_names(), p.arrays())), None),
            DenoiserModel::Tabular(t) => (
                Architecture::Tabular,
                None,
                None,
                Some(Table {
                    seq_len: t.seq_len,
                    classes: t.classes,
                    sequences: t.sequences.clone(),
                    labels: t.labels.clone(),
                }),
            ),
        };
        let classifier = self.classifier.as_ref().map(|c| match c {
            ClassifierModel::Mlp(p) => ClassifierDoc {
                architecture: Architecture::Mlp,
                shapes: Some(p.shapes),
                params: Some(named(p.array_names(), p.arrays())),
                table: None,
            },
            ClassifierModel::Tabular(t) => ClassifierDoc {
                architecture: Architecture::Tabular,
                shapes: None,
                params: None,
                table: Some(Table {
                    seq_len: t.seq_len,
                    classes: t.classes,
                    sequences: t.sequences.clone(),
                    labels: Some(t.labels.clone()),
                }),
            },
        });
        let doc = Document {
            format_version: CHECKPOINT_FORMAT_VERSION,
            model_kind: self.model_kind,
            architecture,
            vocab: self.vocab.clone(),
            schedule: self.schedule,
            shapes,
            params,
            table,
            classifier,
        };
        Ok(serde_json::to_string(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: Document = serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("malformed checkpoint: {e}")))?;
        if doc.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {} (expected {CHECKPOINT_FORMAT_VERSION})",
                doc.format_version
            )));
        }
        let prior = doc.model_kind.prior(&doc.vocab)?;
        let missing = |what: &str| Error::Checkpoint(format!("checkpoint lacks {what}"));
        let denoiser = match doc.architecture {
            Architecture::Mlp => {
                let shapes = doc.shapes.ok_or_else(|| missing("shapes"))?;
                let mut p = DenoiserParams::zeros(shapes, doc.schedule)?;
                fill(p.array_names(), p.arrays_mut(), doc.params.ok_or_else(|| missing("params"))?)?;
                DenoiserModel::Mlp(p)
            }
            Architecture::Tabular => {
                let t = doc.table.ok_or_else(|| missing("table"))?;
                let model = TabularDenoiser::new(t.sequences, t.labels, t.classes, prior.clone(), doc.schedule)?;
                if model.seq_len != t.seq_len {
                    return Err(Error::Checkpoint("table length disagrees with its sequences".into()));
                }
                DenoiserModel::Tabular(model)
            }
        };
        let classifier = match doc.classifier {
            None => None,
            Some(c) => Some(match c.architecture {
                Architecture::Mlp => {
                    let shapes = c.shapes.ok_or_else(|| missing("classifier shapes"))?;
                    let mut p = ClassifierParams::zeros(shapes, doc.schedule)?;
                    fill(p.array_names(), p.arrays_mut(), c.params.ok_or_else(|| missing("classifier params"))?)?;
                    ClassifierModel::Mlp(p)
                }
                Architecture::Tabular => {
                    let t = c.table.ok_or_else(|| missing("classifier table"))?;
                    let labels = t.labels.ok_or_else(|| missing("classifier labels"))?;
                    ClassifierModel::Tabular(TabularClassifier::new(t.sequences, labels, t.classes, prior, doc.schedule)?)
                }
            }),
        };
        let ck = Self { model_kind: doc.model_kind, vocab: doc.vocab, schedule: doc.schedule, denoiser, classifier };
        ck.validate()?;
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}
