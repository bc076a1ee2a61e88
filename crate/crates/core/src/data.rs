//! Character-level tokenization, text datasets, and synthetic corpora with
//! known statistics.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::categorical::sample_index;
use crate::error::{Error, Result};
use crate::vocab::{Sequence, Token, Vocabulary};

/// Fixed-length sequences with optional class labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub sequences: Vec<Sequence>,
    pub labels: Option<Vec<usize>>,
    /// Number of label classes `K`; 0 for unlabeled data.
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(sequences: Vec<Sequence>, labels: Option<Vec<usize>>, num_classes: usize) -> Result<Self> {
        let Some(first) = sequences.first() else {
            return Err(Error::Dataset("empty dataset".into()));
        };
        let len = first.len();
        if let Some(i) = sequences.iter().position(|s| s.len() != len) {
            return Err(Error::Dataset(format!("sequence {i} has length {}, expected {len}", sequences[i].len())));
        }
        match &labels {
            Some(l) if l.len() != sequences.len() => {
                return Err(Error::Dataset(format!("{} labels for {} sequences", l.len(), sequences.len())));
            }
            Some(l) => {
                if let Some(i) = l.iter().position(|&y| y >= num_classes) {
                    return Err(Error::Dataset(format!("label {} at index {i} >= {num_classes} classes", l[i])));
                }
            }
            None if num_classes > 0 => return Err(Error::Dataset("class count given for unlabeled data".into())),
            None => {}
        }
        Ok(Self { sequences, labels, num_classes })
    }

    pub fn unlabeled(sequences: Vec<Sequence>) -> Result<Self> {
        Self::new(sequences, None, 0)
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn seq_len(&self) -> usize {
        self.sequences[0].len()
    }

    pub fn label(&self, i: usize) -> Option<usize> {
        self.labels.as_ref().map(|l| l[i])
    }

    /// Sequences whose label is `y`.
    pub fn class_subset(&self, y: usize) -> Vec<&Sequence> {
        match &self.labels {
            Some(l) => self.sequences.iter().zip(l).filter(|(_, &k)| k == y).map(|(s, _)| s).collect(),
            None => Vec::new(),
        }
    }

    /// Checks every token against a vocabulary; mask tokens are not data.
    pub fn check_vocab(&self, vocab: &Vocabulary) -> Result<()> {
        for (i, s) in self.sequences.iter().enumerate() {
            if s.tokens().iter().any(|&v| v >= vocab.size() || Some(v) == vocab.mask_index()) {
                return Err(Error::Dataset(format!("sequence {i} holds a token outside the data alphabet")));
            }
        }
        Ok(())
    }
}

/// Maps each character of `text` to its vocabulary index.
pub fn tokenize(text: &str, vocab: &Vocabulary) -> Result<Sequence> {
    let index: HashMap<&str, Token> = vocab.symbols().iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let mut tokens = Vec::with_capacity(text.len());
    let mut buf = [0u8; 4];
    for (pos, ch) in text.chars().enumerate() {
        let key: &str = ch.encode_utf8(&mut buf);
        match index.get(key) {
            Some(&t) => tokens.push(t),
            None => return Err(Error::Tokenize(format!("character {ch:?} at position {pos} is not in the vocabulary"))),
        }
    }
    if tokens.is_empty() {
        return Err(Error::Tokenize("empty string".into()));
    }
    Ok(Sequence::from_raw(tokens))
}

pub fn detokenize(seq: &[Token], vocab: &Vocabulary) -> Result<String> {
    seq.iter()
        .map(|&t| vocab.symbol(t).ok_or_else(|| Error::Tokenize(format!("token {t} outside vocabulary"))))
        .collect()
}

/// Reads one sequence per line (each exactly `len` characters) and an
/// optional aligned labels file of decimal integers. `num_classes` defaults
/// to one more than the largest label.
pub fn load_text_dataset(
    path: &Path,
    vocab: &Vocabulary,
    len: usize,
    labels_path: Option<&Path>,
    num_classes: Option<usize>,
) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    let mut sequences = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let seq = tokenize(line, vocab).map_err(|e| Error::Dataset(format!("line {}: {e}", i + 1)))?;
        if seq.len() != len {
            return Err(Error::Dataset(format!("line {} has length {}, expected {len}", i + 1, seq.len())));
        }
        sequences.push(seq);
    }
    let labels = match labels_path {
        None => None,
        Some(p) => {
            let text = fs::read_to_string(p)?;
            let labels = text
                .lines()
                .enumerate()
                .map(|(i, l)| {
                    l.trim().parse::<usize>().map_err(|e| Error::Dataset(format!("labels line {}: {e}", i + 1)))
                })
                .collect::<Result<Vec<_>>>()?;
            if labels.len() != sequences.len() {
                return Err(Error::Dataset(format!(
                    "labels file has {} lines but dataset has {} sequences",
                    labels.len(),
                    sequences.len()
                )));
            }
            Some(labels)
        }
    };
    let k = match (&labels, num_classes) {
        (Some(_), Some(k)) => k,
        (Some(l), None) => l.iter().max().map_or(0, |m| m + 1),
        (None, _) => 0,
    };
    let data = Dataset::new(sequences, labels, k)?;
    data.check_vocab(vocab)?;
    Ok(data)
}

/// Writes sequences (one per line) and, when present, labels.
pub fn write_text_dataset(data: &Dataset, vocab: &Vocabulary, path: &Path, labels_path: Option<&Path>) -> Result<()> {
    let mut out = String::new();
    for s in &data.sequences {
        out.push_str(&detokenize(s.tokens(), vocab)?);
        out.push('\n');
    }
    fs::write(path, out)?;
    if let (Some(p), Some(labels)) = (labels_path, &data.labels) {
        let text: String = labels.iter().map(|y| format!("{y}\n")).collect();
        fs::write(p, text)?;
    }
    Ok(())
}

/// A Markov-chain corpus and the exact chain that generated it.
#[derive(Debug, Clone)]
pub struct MarkovCorpus {
    pub dataset: Dataset,
    pub transition: Vec<Vec<f64>>,
    pub stationary: Vec<f64>,
}

/// Stationary distribution of a row-stochastic matrix, by iterating the lazy
/// chain `(I + P) / 2` from the uniform distribution.
pub fn stationary_distribution(transition: &[Vec<f64>]) -> Vec<f64> {
    let n = transition.len();
    let mut pi = vec![1.0 / n as f64; n];
    for _ in 0..100_000 {
        let mut next = vec![0.0; n];
        for (i, row) in transition.iter().enumerate() {
            for (j, &p) in row.iter().enumerate() {
                next[j] += pi[i] * p;
            }
        }
        let next: Vec<f64> = pi.iter().zip(&next).map(|(a, b)| 0.5 * (a + b)).collect();
        let diff = pi.iter().zip(&next).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        pi = next;
        if diff < 1e-15 {
            break;
        }
    }
    let s: f64 = pi.iter().sum();
    pi.into_iter().map(|v| v / s).collect()
}

pub fn gen_markov_corpus(n: usize, len: usize, transition: &[Vec<f64>], count: usize, seed: u64) -> Result<MarkovCorpus> {
    if n < 2 || len == 0 || count == 0 {
        return Err(Error::Dataset(format!("invalid corpus size N={n}, L={len}, count={count}")));
    }
    if transition.len() != n || transition.iter().any(|r| r.len() != n) {
        return Err(Error::Dataset("transition matrix must be N x N".into()));
    }
    for (i, row) in transition.iter().enumerate() {
        let s: f64 = row.iter().sum();
        if row.iter().any(|p| !(p.is_finite() && *p >= 0.0)) || (s - 1.0).abs() > 1e-9 {
            return Err(Error::Dataset(format!("transition row {i} is not a distribution")));
        }
    }
    let stationary = stationary_distribution(transition);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sequences = (0..count)
        .map(|_| {
            let mut tokens = Vec::with_capacity(len);
            let mut cur = sample_index(&stationary, rng.gen());
            tokens.push(cur);
            for _ in 1..len {
                cur = sample_index(&transition[cur], rng.gen());
                tokens.push(cur);
            }
            Sequence::from_raw(tokens)
        })
        .collect();
    Ok(MarkovCorpus { dataset: Dataset::unlabeled(sequences)?, transition: transition.to_vec(), stationary })
}

/// Deterministic label of a clean sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LabelRule {
    /// Most frequent token; ties go to the smallest index. `K = N`.
    MajorityToken,
    /// Bucket `first_token * K / N` of the first token.
    PrefixClass { classes: usize },
}

impl LabelRule {
    pub fn num_classes(&self, n: usize) -> usize {
        match self {
            Self::MajorityToken => n,
            Self::PrefixClass { classes } => *classes,
        }
    }

    pub fn label(&self, tokens: &[Token], n: usize) -> usize {
        match self {
            Self::MajorityToken => {
                let mut counts = vec![0usize; n];
                for &t in tokens {
                    counts[t] += 1;
                }
                let best = counts.iter().copied().max().unwrap_or(0);
                counts.iter().position(|&c| c == best).unwrap_or(0)
            }
            Self::PrefixClass { classes } => tokens[0] * classes / n,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabeledCorpusConfig {
    pub n: usize,
    pub len: usize,
    pub count: usize,
    pub rule: LabelRule,
    /// Probability that a position copies the sequence's latent favored
    /// token instead of drawing uniformly. Zero gives i.i.d. uniform tokens.
    pub concentration: f64,
    pub seed: u64,
}

/// Sequences drawn from a mixture over a latent favored token, labeled by
/// `rule`. Labels are recomputed from the tokens, never from the latent.
pub fn gen_labeled_corpus(config: &LabeledCorpusConfig) -> Result<Dataset> {
    let LabeledCorpusConfig { n, len, count, rule, concentration, seed } = *config;
    if n < 2 || len == 0 || count == 0 {
        return Err(Error::Dataset(format!("invalid corpus size N={n}, L={len}, count={count}")));
    }
    if !(0.0..=1.0).contains(&concentration) {
        return Err(Error::Dataset(format!("concentration {concentration} outside [0, 1]")));
    }
    let k = rule.num_classes(n);
    if k == 0 || k > n {
        return Err(Error::Dataset(format!("rule needs 1 <= K <= N, got K={k}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sequences = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        let favored = rng.gen_range(0..n);
        let tokens: Vec<Token> =
            (0..len).map(|_| if rng.gen::<f64>() < concentration { favored } else { rng.gen_range(0..n) }).collect();
        labels.push(rule.label(&tokens, n));
        sequences.push(Sequence::from_raw(tokens));
    }
    let data = Dataset::new(sequences, Some(labels), k)?;
    for (s, &y) in data.sequences.iter().zip(data.labels.as_deref().unwrap_or_default()) {
        if rule.label(s.tokens(), n) != y {
            return Err(Error::Dataset("generated label disagrees with its rule".into()));
        }
    }
    Ok(data)
}
