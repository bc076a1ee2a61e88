use std::fs;
use std::path::Path;

use clap::{ArgMatches, Command};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde_json::json;

use udlm::data::{load_text_dataset, tokenize, Dataset, LabelRule};
use udlm::guidance::{ClassifierTime, GuidanceConfig, GuidanceMode};
use udlm::loss::{bpc, mc_loss, nelbo_discrete_exact, ppl, Objective};
use udlm::metrics::{control_accuracy, kmer_js, validity_novelty_property};
use udlm::model::{
    train_classifier, train_denoiser, Checkpoint, ClassifierModel, ClassifierParams, ClassifierShapes,
    ClassifierTrainConfig, Condition, Denoiser, DenoiserModel, DenoiserParams, DenoiserShapes, ModelKind,
    OptimizerKind, TabularClassifier, TabularDenoiser, TrainConfig,
};
use udlm::sampler::{generate, write_samples, FinalDecode, SampleRequest};
use udlm::verify::{continuous_nelbo_oracle, run_suite, Suite};
use udlm::{NoiseSchedule, Token, Vocabulary};

use crate::config::{key, with_keys, Key, Resolved};
use crate::CliError;

static TRAIN_KEYS: [Key; 21] = [
    key("train_data", None, "Training sequences, one per line"),
    key("train_labels", None, "Aligned integer labels"),
    key("out", None, "Checkpoint to write"),
    key("model", Some("uniform"), "uniform | absorbing"),
    key("architecture", Some("mlp"), "mlp | tabular"),
    key("vocab_size", None, "Number of data symbols a, b, ...; alternative to --vocab"),
    key("vocab", None, "Vocabulary JSON file"),
    key("seq_len", None, "Sequence length [default: length of the first line]"),
    key("classes", None, "Number of classes [default: largest label + 1]"),
    key("conditional", None, "Train a class-conditional denoiser [default: true when labels are given]"),
    key("objective", None, "udlm | mdlm | sedd | nelbo [default: udlm for uniform, mdlm for absorbing]"),
    key("steps", Some("100"), "T of the discrete objective"),
    key("d_embed", Some("16"), "Embedding width"),
    key("d_hidden", Some("32"), "Hidden width"),
    key("epochs", Some("10"), "Training epochs"),
    key("batch", Some("64"), "Minibatch size"),
    key("lr", Some("0.01"), "Learning rate"),
    key("optimizer", Some("adam"), "adam | sgd"),
    key("condition_dropout", Some("0.1"), "Probability of training on the dropped condition"),
    key("classifier", Some("none"), "none | mlp | tabular"),
    key("seed", Some("0"), "Random seed"),
];

static SAMPLE_KEYS: [Key; 10] = [
    key("checkpoint", None, "Checkpoint to sample from"),
    key("out", None, "Output file; metadata goes to <out>.meta.json"),
    key("num", Some("16"), "Number of sequences"),
    key("steps", Some("100"), "Number of reverse steps T"),
    key("guidance", Some("none"), "none | cfg | cbg | cbg-taylor"),
    key("gamma", Some("1"), "Guidance strength"),
    key("label", None, "Target class"),
    key("final_decode", Some("sample"), "sample | argmax"),
    key("classifier_time", Some("destination"), "Time at which the classifier is evaluated: destination | source"),
    key("seed", Some("0"), "Random seed"),
];

static EVAL_KEYS: [Key; 7] = [
    key("checkpoint", None, "Checkpoint to evaluate"),
    key("data", None, "Sequences, one per line"),
    key("labels", None, "Aligned labels; used when --conditional is true"),
    key("conditional", Some("false"), "Condition on the labels"),
    key("mode", Some("exact"), "exact (enumerate latents) | mc"),
    key("steps", Some("100"), "T of the discrete bound; 0 selects the continuous-time bound"),
    key("samples", Some("64"), "Monte Carlo draws per sequence"),
];

static METRICS_KEYS: [Key; 10] = [
    key("samples", None, "Generated sequences"),
    key("reference", None, "Reference sequences"),
    key("checkpoint", None, "Checkpoint whose vocabulary to use"),
    key("vocab_size", None, "Number of data symbols a, b, ...; alternative to --checkpoint"),
    key("k", Some("2"), "k-mer length"),
    key("label", None, "Class requested for every sample"),
    key("requested_labels", None, "Per-sample requested classes, one per line"),
    key("rule", Some("majority_token"), "majority_token | prefix_class"),
    key("classes", None, "Number of classes for prefix_class"),
    key("train", None, "Training sequences for novelty [default: --reference]"),
];

static VERIFY_KEYS: [Key; 3] = [
    key("suite", Some("all"), "posteriors | limits | bound | equivalence | guidance | ctmc | gradients | all"),
    key("seed", Some("0"), "Random seed"),
    key("json", None, "Write the report as JSON to this file"),
];

pub fn subcommands() -> Vec<Command> {
    vec![
        with_keys(Command::new("train").about("Train a denoiser and optionally a classifier"), &TRAIN_KEYS),
        with_keys(Command::new("sample").about("Generate sequences from a checkpoint"), &SAMPLE_KEYS),
        with_keys(Command::new("eval").about("Report NELBO, perplexity and bits per character"), &EVAL_KEYS),
        with_keys(Command::new("metrics").about("k-mer divergence, control accuracy and novelty"), &METRICS_KEYS),
        with_keys(Command::new("verify").about("Run identity and oracle suites"), &VERIFY_KEYS),
    ]
}

pub fn dispatch(m: &ArgMatches) -> Result<(), CliError> {
    let (name, sub) = m.subcommand().expect("subcommand is required");
    let keys: &'static [Key] = match name {
        "train" => &TRAIN_KEYS,
        "sample" => &SAMPLE_KEYS,
        "eval" => &EVAL_KEYS,
        "metrics" => &METRICS_KEYS,
        _ => &VERIFY_KEYS,
    };
    let r = Resolved::from_matches(sub, keys)?;
    eprint!("# udlm {name}\n{}", r.echo());
    match name {
        "train" => train(&r),
        "sample" => sample(&r),
        "eval" => eval(&r),
        "metrics" => metrics(&r),
        _ => verify(&r),
    }
}

fn parse_bool(r: &Resolved, key: &str) -> Result<Option<bool>, CliError> {
    r.opt::<bool>(key)
}

fn first_line_len(path: &Path, vocab: &Vocabulary) -> Result<usize, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    let line = text.lines().next().ok_or_else(|| CliError::Usage(format!("{} is empty", path.display())))?;
    Ok(tokenize(line, vocab)?.len())
}

fn load(path: &str, vocab: &Vocabulary, len: Option<usize>, labels: Option<&str>, classes: Option<usize>) -> Result<Dataset, CliError> {
    let path = Path::new(path);
    let len = match len {
        Some(l) => l,
        None => first_line_len(path, vocab)?,
    };
    Ok(load_text_dataset(path, vocab, len, labels.map(Path::new), classes)?)
}

fn train_vocab(r: &Resolved, kind: ModelKind) -> Result<Vocabulary, CliError> {
    match (r.raw("vocab"), r.opt::<usize>("vocab_size")?) {
        (Some(_), Some(_)) => Err(CliError::Usage("give either --vocab or --vocab-size, not both".into())),
        (None, None) => Err(CliError::Usage("missing required --vocab or --vocab-size".into())),
        (Some(p), None) => Ok(Vocabulary::from_json(&fs::read_to_string(p)?)?),
        (None, Some(n)) => Ok(match kind {
            ModelKind::Uniform => Vocabulary::alphabetic(n)?,
            ModelKind::Absorbing => Vocabulary::alphabetic_with_mask(n)?,
        }),
    }
}

fn objective(r: &Resolved, kind: ModelKind) -> Result<Objective, CliError> {
    let default = match kind {
        ModelKind::Uniform => "udlm",
        ModelKind::Absorbing => "mdlm",
    };
    Ok(match r.raw("objective").unwrap_or(default) {
        "udlm" => Objective::UdlmContinuous,
        "mdlm" => Objective::MdlmContinuous,
        "sedd" => Objective::SeddForm,
        "nelbo" => Objective::NelboDiscrete { steps: r.get("steps")? },
        other => return Err(CliError::Usage(format!("unknown objective {other:?}"))),
    })
}

fn train(r: &Resolved) -> Result<(), CliError> {
    let kind = ModelKind::parse(r.require("model")?)?;
    let vocab = train_vocab(r, kind)?;
    let prior = kind.prior(&vocab)?;
    let out = r.require("out")?;
    let data = load(r.require("train_data")?, &vocab, r.opt("seq_len")?, r.raw("train_labels"), r.opt("classes")?)?;
    let conditional = parse_bool(r, "conditional")?.unwrap_or(data.labels.is_some());
    if conditional && data.labels.is_none() {
        return Err(CliError::Usage("--conditional true needs --train-labels".into()));
    }
    let seed: u64 = r.get("seed")?;
    let schedule = NoiseSchedule::default();
    let optimizer = match r.require("optimizer")? {
        "adam" => OptimizerKind::adam(),
        "sgd" => OptimizerKind::sgd(),
        other => return Err(CliError::Usage(format!("unknown optimizer {other:?}"))),
    };
    let (epochs, batch, lr): (usize, usize, f64) = (r.get("epochs")?, r.get("batch")?, r.get("lr")?);
    let (embed, hidden): (usize, usize) = (r.get("d_embed")?, r.get("d_hidden")?);
    let objective = objective(r, kind)?;
    objective.check_prior(&prior)?;
    let classes = if conditional { data.num_classes } else { 0 };

    let denoiser = match r.require("architecture")? {
        "mlp" => {
            let shapes = DenoiserShapes {
                vocab: vocab.size(),
                seq_len: data.seq_len(),
                embed,
                hidden,
                classes,
                mask: vocab.mask_index(),
            };
            let init = DenoiserParams::init(shapes, schedule, &mut ChaCha8Rng::seed_from_u64(seed))?;
            let config = TrainConfig {
                objective,
                epochs,
                batch_size: batch,
                lr,
                optimizer,
                condition_dropout: r.get("condition_dropout")?,
                seed,
            };
            let report = train_denoiser(&data, &prior, init, &config)?;
            let last = report.loss_trace.last().copied().unwrap_or(f64::NAN);
            println!("trained denoiser: {} steps, final epoch loss {last:.6} nats/sequence", report.steps);
            DenoiserModel::Mlp(report.params)
        }
        "tabular" => {
            let labels = if conditional { data.labels.clone() } else { None };
            let seqs = data.sequences.iter().map(|s| s.tokens().to_vec()).collect();
            println!("built tabular denoiser over {} sequences", data.len());
            DenoiserModel::Tabular(TabularDenoiser::new(seqs, labels, classes, prior.clone(), schedule)?)
        }
        other => return Err(CliError::Usage(format!("unknown architecture {other:?}"))),
    };

    let classifier = match r.require("classifier")? {
        "none" => None,
        c @ ("mlp" | "tabular") if data.labels.is_none() => {
            return Err(CliError::Usage(format!("a {c} classifier needs --train-labels")));
        }
        "mlp" => {
            let shapes =
                ClassifierShapes { vocab: vocab.size(), seq_len: data.seq_len(), embed, hidden, classes: data.num_classes };
            let init = ClassifierParams::init(shapes, schedule, &mut ChaCha8Rng::seed_from_u64(seed ^ 1))?;
            let config = ClassifierTrainConfig { epochs, batch_size: batch, lr, optimizer, seed };
            let report = train_classifier(&data, &prior, init, &config)?;
            let last = report.loss_trace.last().copied().unwrap_or(f64::NAN);
            println!("trained classifier: {} steps, final epoch cross-entropy {last:.6}", report.steps);
            Some(ClassifierModel::Mlp(report.params))
        }
        "tabular" => Some(ClassifierModel::Tabular(TabularClassifier::from_dataset(&data, prior.clone(), schedule)?)),
        other => return Err(CliError::Usage(format!("unknown classifier {other:?}"))),
    };

    Checkpoint::new(kind, vocab, denoiser, classifier)?.save(Path::new(out))?;
    println!("wrote {out}");
    Ok(())
}

fn sample(r: &Resolved) -> Result<(), CliError> {
    let ck = Checkpoint::load(Path::new(r.require("checkpoint")?))?;
    let out = r.require("out")?;
    let mode = GuidanceMode::parse(r.require("guidance")?)?;
    let classifier_time = match r.require("classifier_time")? {
        "destination" => ClassifierTime::Destination,
        "source" => ClassifierTime::Source,
        other => return Err(CliError::Usage(format!("unknown classifier time {other:?}"))),
    };
    let guidance = GuidanceConfig { classifier_time, ..GuidanceConfig::new(mode, r.get("gamma")?, r.opt("label")?) };
    let final_decode = match r.require("final_decode")? {
        "sample" => FinalDecode::Sample,
        "argmax" => FinalDecode::Argmax,
        other => return Err(CliError::Usage(format!("unknown final decode {other:?}"))),
    };
    let request = SampleRequest {
        final_decode,
        ..SampleRequest::new(r.get("num")?, ck.denoiser.seq_len(), r.get("steps")?, r.get("seed")?).with_guidance(guidance)
    };
    let prior = ck.prior()?;
    let samples = generate(&request, &ck.denoiser, &prior, ck.classifier.as_ref())?;
    write_samples(Path::new(out), &samples, &ck.vocab, &request)?;
    let edits: usize = samples.iter().map(|g| g.diagnostics.total_edits()).sum();
    println!(
        "wrote {} sequences to {out}; mean edits per sequence {:.3}",
        samples.len(),
        edits as f64 / samples.len().max(1) as f64
    );
    Ok(())
}

fn eval(r: &Resolved) -> Result<(), CliError> {
    let ck = Checkpoint::load(Path::new(r.require("checkpoint")?))?;
    let conditional: bool = r.get("conditional")?;
    let labels = r.raw("labels");
    if conditional && labels.is_none() {
        return Err(CliError::Usage("--conditional true needs --labels".into()));
    }
    let data = load(r.require("data")?, &ck.vocab, Some(ck.denoiser.seq_len()), labels, None)?;
    let prior = ck.prior()?;
    let steps: usize = r.get("steps")?;
    let samples: usize = r.get("samples")?;
    let cond = |i: usize| if conditional { Condition::from_label(data.label(i)) } else { Condition::Dropped };
    let mode = r.require("mode")?;
    let per_seq: Vec<(f64, f64)> = match mode {
        "exact" => (0..data.len())
            .map(|i| {
                let x = data.sequences[i].tokens();
                let v = if steps == 0 {
                    if ck.model_kind != ModelKind::Uniform {
                        return Err(CliError::Usage("the exact continuous bound is implemented for uniform models".into()));
                    }
                    continuous_nelbo_oracle(&ck.denoiser, x, cond(i))?
                } else {
                    nelbo_discrete_exact(x, &ck.denoiser, cond(i), steps, &prior)?
                };
                Ok((v, 0.0))
            })
            .collect::<Result<_, CliError>>()?,
        "mc" => {
            let objective = match (steps, ck.model_kind) {
                (0, ModelKind::Uniform) => Objective::UdlmContinuous,
                (0, ModelKind::Absorbing) => Objective::MdlmContinuous,
                (t, _) => Objective::NelboDiscrete { steps: t },
            };
            (0..data.len())
                .into_par_iter()
                .map(|i| {
                    let mut rng = ChaCha8Rng::seed_from_u64(0);
                    rng.set_stream(i as u64);
                    let est = mc_loss(objective, data.sequences[i].tokens(), &ck.denoiser, cond(i), &prior, &mut rng, samples)?;
                    Ok((est.mean, est.std_err * est.std_err))
                })
                .collect::<Result<_, CliError>>()?
        }
        other => return Err(CliError::Usage(format!("unknown mode {other:?}"))),
    };
    let n = per_seq.len() as f64;
    let nelbo = per_seq.iter().map(|p| p.0).sum::<f64>() / n;
    let std_err = per_seq.iter().map(|p| p.1).sum::<f64>().sqrt() / n;
    if !nelbo.is_finite() {
        return Err(CliError::Numeric(format!("non-finite NELBO {nelbo}")));
    }
    let len = ck.denoiser.seq_len();
    let report = json!({
        "sequences": data.len(),
        "mode": mode,
        "steps": steps,
        "nelbo_nats": nelbo,
        "nelbo_std_err": std_err,
        "ppl": ppl(nelbo, len),
        "bpc": bpc(nelbo, len),
    });
    println!("{report}");
    Ok(())
}

fn read_lines(path: &str, vocab: &Vocabulary) -> Result<Vec<Vec<Token>>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{path}: {e}")))?;
    text.lines()
        .enumerate()
        .map(|(i, l)| {
            tokenize(l, vocab)
                .map(|s| s.into_tokens())
                .map_err(|e| CliError::Usage(format!("{path} line {}: {e}", i + 1)))
        })
        .collect()
}

fn metrics(r: &Resolved) -> Result<(), CliError> {
    let vocab = match (r.raw("checkpoint"), r.opt::<usize>("vocab_size")?) {
        (Some(p), None) => Checkpoint::load(Path::new(p))?.vocab,
        (None, Some(n)) => Vocabulary::alphabetic(n)?,
        _ => return Err(CliError::Usage("give exactly one of --checkpoint and --vocab-size".into())),
    };
    let samples = read_lines(r.require("samples")?, &vocab)?;
    let reference = read_lines(r.require("reference")?, &vocab)?;
    let train = match r.raw("train") {
        Some(p) => read_lines(p, &vocab)?,
        None => reference.clone(),
    };
    let k: usize = r.get("k")?;
    let mut report = json!({
        "samples": samples.len(),
        "kmer_js": kmer_js(&samples, &reference, k)?,
        "k": k,
    });
    let n = vocab.data_size();
    let rule = match r.require("rule")? {
        "majority_token" => LabelRule::MajorityToken,
        "prefix_class" => LabelRule::PrefixClass { classes: r.get("classes")? },
        other => return Err(CliError::Usage(format!("unknown rule {other:?}"))),
    };
    let requested: Option<Vec<usize>> = match (r.opt::<usize>("label")?, r.raw("requested_labels")) {
        (Some(_), Some(_)) => return Err(CliError::Usage("give --label or --requested-labels, not both".into())),
        (Some(y), None) => Some(vec![y; samples.len()]),
        (None, Some(p)) => Some(
            fs::read_to_string(p)?
                .lines()
                .map(|l| l.trim().parse::<usize>().map_err(|e| CliError::Usage(format!("{p}: {e}"))))
                .collect::<Result<_, _>>()?,
        ),
        (None, None) => None,
    };
    if let Some(requested) = requested {
        let c = control_accuracy(&samples, &requested, rule.num_classes(n), |s: &[Token]| rule.label(s, n))?;
        report["control_accuracy"] = json!(c.accuracy);
        report["macro_recall"] = json!(c.macro_recall);
        report["confusion"] = json!(c.confusion);
    }
    let nov = validity_novelty_property(&samples, |_| true, &train, |_| 0.0);
    report["num_novel"] = json!(nov.num_novel);
    println!("{report}");
    Ok(())
}

fn verify(r: &Resolved) -> Result<(), CliError> {
    let suite = Suite::parse(r.require("suite")?)?;
    let report = run_suite(suite, r.get("seed")?);
    print!("{}", report.render());
    if let Some(p) = r.raw("json") {
        fs::write(p, report.to_json()?)?;
    }
    let failed = report.failures().count();
    if failed > 0 {
        return Err(CliError::Verification(format!("{failed} check(s) failed")));
    }
    Ok(())
}
