//! Sample-quality and controllability metrics for small corpora.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{domain, shape, Result};
use crate::forward::PriorSpec;
use crate::guidance::GuidanceConfig;
use crate::model::{Classifier, Denoiser};
use crate::sampler::{generate, SampleRequest};
use crate::vocab::Token;

fn kmer_histogram<S: AsRef<[Token]>>(seqs: &[S], k: usize) -> Result<BTreeMap<Vec<Token>, u64>> {
    let mut h = BTreeMap::new();
    for s in seqs {
        let s = s.as_ref();
        if k > s.len() {
            return domain(format!("k = {k} exceeds sequence length {}", s.len()));
        }
        for w in s.windows(k) {
            *h.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    Ok(h)
}

/// Base-2 Jensen-Shannon divergence between the k-mer histograms of two
/// corpora.
pub fn kmer_js<A: AsRef<[Token]>, B: AsRef<[Token]>>(samples: &[A], reference: &[B], k: usize) -> Result<f64> {
    if k == 0 {
        return domain("k must be at least 1");
    }
    if samples.is_empty() || reference.is_empty() {
        return domain("k-mer divergence needs non-empty corpora");
    }
    let p = kmer_histogram(samples, k)?;
    let q = kmer_histogram(reference, k)?;
    let np: u64 = p.values().sum();
    let nq: u64 = q.values().sum();
    let mut keys: Vec<&Vec<Token>> = p.keys().chain(q.keys()).collect();
    keys.sort();
    keys.dedup();
    let mut js = 0.0;
    for key in keys {
        let a = p.get(key).map_or(0.0, |&c| c as f64 / np as f64);
        let b = q.get(key).map_or(0.0, |&c| c as f64 / nq as f64);
        let m = 0.5 * (a + b);
        let ta = if a > 0.0 { 0.5 * a * (a / m).log2() } else { 0.0 };
        let tb = if b > 0.0 { 0.5 * b * (b / m).log2() } else { 0.0 };
        js += ta + tb;
    }
    Ok(js.clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ControlReport {
    pub accuracy: f64,
    /// Recall averaged over the classes that were requested at least once.
    pub macro_recall: f64,
    /// `confusion[requested][observed]`.
    pub confusion: Vec<Vec<u64>>,
}

/// Fraction of samples whose rule-derived label equals the requested one.
pub fn control_accuracy<S: AsRef<[Token]>>(
    samples: &[S],
    requested: &[usize],
    num_classes: usize,
    rule: impl Fn(&[Token]) -> usize,
) -> Result<ControlReport> {
    if samples.is_empty() {
        return domain("control accuracy needs at least one sample");
    }
    if samples.len() != requested.len() {
        return shape(format!("{} samples but {} requested labels", samples.len(), requested.len()));
    }
    let mut confusion = vec![vec![0u64; num_classes]; num_classes];
    for (s, &y) in samples.iter().zip(requested) {
        let got = rule(s.as_ref());
        if y >= num_classes || got >= num_classes {
            return domain(format!("label outside 0..{num_classes}"));
        }
        confusion[y][got] += 1;
    }
    let hits: u64 = (0..num_classes).map(|c| confusion[c][c]).sum();
    let recalls: Vec<f64> = confusion
        .iter()
        .enumerate()
        .filter_map(|(c, row)| {
            let total: u64 = row.iter().sum();
            (total > 0).then(|| row[c] as f64 / total as f64)
        })
        .collect();
    Ok(ControlReport {
        accuracy: hits as f64 / samples.len() as f64,
        macro_recall: recalls.iter().sum::<f64>() / recalls.len() as f64,
        confusion,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NoveltyReport {
    pub num_samples: usize,
    pub num_valid: usize,
    /// Valid, distinct, and absent from the training set.
    pub num_novel: usize,
    /// Mean property over the novel samples; `None` when there are none.
    pub property_mean: Option<f64>,
}

pub fn validity_novelty_property<S: AsRef<[Token]>, T: AsRef<[Token]>>(
    samples: &[S],
    validator: impl Fn(&[Token]) -> bool,
    train_set: &[T],
    property: impl Fn(&[Token]) -> f64,
) -> NoveltyReport {
    let train: HashSet<&[Token]> = train_set.iter().map(|s| s.as_ref()).collect();
    let mut seen: HashSet<&[Token]> = HashSet::new();
    let mut num_valid = 0;
    let mut total = 0.0;
    let mut num_novel = 0;
    for s in samples {
        let s = s.as_ref();
        if !validator(s) {
            continue;
        }
        num_valid += 1;
        if !train.contains(s) && seen.insert(s) {
            num_novel += 1;
            total += property(s);
        }
    }
    NoveltyReport {
        num_samples: samples.len(),
        num_valid,
        num_novel,
        property_mean: (num_novel > 0).then(|| total / num_novel as f64),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub gamma: f64,
    pub control_accuracy: f64,
    pub macro_recall: f64,
    pub kmer_js: f64,
    pub num_novel: usize,
}

/// Inputs of [`gamma_sweep`] besides the models.
pub struct SweepSpec<'a, T: AsRef<[Token]>> {
    /// Request used for every class; its guidance mode is kept and its
    /// `gamma` and `target_class` are overwritten.
    pub template: SampleRequest,
    /// Classes to request; each gets `template.num_sequences` samples.
    pub classes: Vec<usize>,
    pub num_classes: usize,
    pub rule: &'a (dyn Fn(&[Token]) -> usize + Sync),
    pub reference: &'a [T],
    pub k: usize,
}

/// One generation batch per `gamma`. Class `y` always uses seed
/// `template.seed + y`, so batches at different `gamma` share randomness.
pub fn gamma_sweep<D: Denoiser + ?Sized, C: Classifier + ?Sized, T: AsRef<[Token]>>(
    model: &D,
    prior: &PriorSpec,
    classifier: Option<&C>,
    gammas: &[f64],
    spec: &SweepSpec<'_, T>,
) -> Result<Vec<SweepRow>> {
    if gammas.is_empty() || spec.classes.is_empty() {
        return domain("sweep needs at least one gamma and one class");
    }
    let mut rows = Vec::with_capacity(gammas.len());
    for &gamma in gammas {
        let mut samples = Vec::new();
        let mut requested = Vec::new();
        for &y in &spec.classes {
            let req = SampleRequest {
                guidance: GuidanceConfig { gamma, target_class: Some(y), ..spec.template.guidance },
                seed: spec.template.seed.wrapping_add(y as u64),
                ..spec.template
            };
            for g in generate(&req, model, prior, classifier)? {
                samples.push(g.sequence.into_tokens());
                requested.push(y);
            }
        }
        let control = control_accuracy(&samples, &requested, spec.num_classes, spec.rule)?;
        let novelty = validity_novelty_property(&samples, |_| true, spec.reference, |_| 0.0);
        rows.push(SweepRow {
            gamma,
            control_accuracy: control.accuracy,
            macro_recall: control.macro_recall,
            kmer_js: kmer_js(&samples, spec.reference, spec.k)?,
            num_novel: novelty.num_novel,
        });
    }
    Ok(rows)
}

/// Tab-separated table with a header row.
pub fn sweep_tsv(rows: &[SweepRow]) -> String {
    let mut out = String::from("gamma\tcontrol_accuracy\tmacro_recall\tkmer_js\tnum_novel\n");
    for r in rows {
        let _ = writeln!(out, "{}\t{:.6}\t{:.6}\t{:.6}\t{}", r.gamma, r.control_accuracy, r.macro_recall, r.kmer_js, r.num_novel);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::LabelRule;
    use crate::model::{ClassifierModel, TabularDenoiser};
    use crate::schedule::NoiseSchedule;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn js_basics() {
        let a = vec![vec![0, 1, 2], vec![1, 1, 0]];
        let b = vec![vec![2, 2, 2], vec![0, 0, 1]];
        let c = vec![vec![3, 3, 3]];
        assert_eq!(kmer_js(&a, &a, 2).unwrap(), 0.0);
        assert_eq!(kmer_js(&a, &b, 2).unwrap(), kmer_js(&b, &a, 2).unwrap());
        assert!((kmer_js(&a, &c, 1).unwrap() - 1.0).abs() < 1e-12);
        assert!(kmer_js(&a, &b, 4).is_err());
        assert!(kmer_js::<Vec<Token>, _>(&[], &b, 1).is_err());
    }

    #[test]
    fn control_accuracy_cases() {
        let rule = |s: &[Token]| LabelRule::MajorityToken.label(s, 3);
        let copied = vec![vec![2, 2, 1]; 5];
        let r = control_accuracy(&copied, &[2; 5], 3, rule).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.confusion[2][2], 5);
        assert!(control_accuracy::<Vec<Token>>(&[], &[], 3, rule).is_err());

        // Random samples with balanced requests: accuracy near 1/K.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let k = 3;
        let n = 30_000;
        let samples: Vec<Vec<Token>> = (0..n).map(|_| vec![rng.gen_range(0..k)]).collect();
        let requested: Vec<usize> = (0..n).map(|i| i % k).collect();
        let r = control_accuracy(&samples, &requested, k, |s: &[Token]| s[0]).unwrap();
        let p = 1.0 / k as f64;
        let sd = (p * (1.0 - p) / n as f64).sqrt();
        assert!((r.accuracy - p).abs() < 3.0 * sd, "{}", r.accuracy);
    }

    #[test]
    fn novelty_cases() {
        let train = vec![vec![0, 1], vec![1, 1]];
        let r = validity_novelty_property(&train, |_| true, &train, |_| 1.0);
        assert_eq!(r.num_novel, 0);
        assert_eq!(r.property_mean, None);
        let r = validity_novelty_property(&[vec![2, 2]], |_| false, &train, |_| 1.0);
        assert_eq!((r.num_valid, r.property_mean), (0, None));
        let dup = vec![vec![2, 2], vec![2, 2], vec![0, 2]];
        let r = validity_novelty_property(&dup, |_| true, &train, |s| s.iter().filter(|&&v| v == 2).count() as f64);
        assert_eq!(r.num_novel, 2);
        assert_eq!(r.property_mean, Some(1.5));
    }

    #[test]
    fn sweep_table_shape() {
        let prior = PriorSpec::uniform(3).unwrap();
        let seqs = vec![vec![0, 0], vec![1, 1], vec![2, 2]];
        let m = TabularDenoiser::new(seqs.clone(), Some(vec![0, 1, 2]), 3, prior.clone(), NoiseSchedule::default()).unwrap();
        let rule = |s: &[Token]| LabelRule::MajorityToken.label(s, 3);
        let spec = SweepSpec {
            template: SampleRequest::new(10, 2, 8, 0).with_guidance(GuidanceConfig::new(crate::guidance::GuidanceMode::Cfg, 1.0, None)),
            classes: vec![0, 1, 2],
            num_classes: 3,
            rule: &rule,
            reference: &seqs,
            k: 1,
        };
        let rows = gamma_sweep::<_, ClassifierModel, _>(&m, &prior, None, &[1.0], &spec).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].control_accuracy, 1.0);
        let rows = gamma_sweep::<_, ClassifierModel, _>(&m, &prior, None, &[0.0, 1.0, 2.0], &spec).unwrap();
        let tsv = sweep_tsv(&rows);
        assert_eq!(tsv.lines().count(), 4);
        assert!(tsv.starts_with("gamma\t"));
    }
}
