//! End-to-end protocol: corpus, paired subsets, three training arms,
//! evaluation, language probes and cumulative SHAP differences, repeated
//! over seeds and aggregated.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::corpus::{
    generate_examples, load_jsonl, load_jsonl_with_vocab, write_jsonl, CorpusSpec, Example, Vocab,
};
use crate::error::{Error, Result};
use crate::explain::{cumulative_diff, Category, CumulativeDiffReport, EngineConfig, LabelMode};
use crate::model::{self, ModelParams};
use crate::probe::{cross_validate, extract_features, ProbeConfig, ProbeReport};
use crate::rng;
use crate::sampler::{id_set, plan_counts, preset, sample_paired, split_eval, JointSpec, Preset};
use crate::stats;
use crate::training::{
    evaluate, neg_entropy, train, EvalMetrics, TrainConfig, TrainReport, Weighting,
};

/// Where the datapoints come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusSource {
    Synthetic {
        #[serde(default)]
        spec: CorpusSpec,
        /// Examples per (language, label) cell; derived from the subset
        /// sizes when absent.
        #[serde(default)]
        n_per_cell: Option<usize>,
    },
    Jsonl {
        path: PathBuf,
        #[serde(default)]
        vocab: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JointSource {
    Preset(Preset),
    Table(Vec<Vec<f64>>),
}

impl JointSource {
    pub fn resolve(&self, n_languages: usize, n_classes: usize) -> Result<JointSpec> {
        match self {
            JointSource::Preset(p) => preset(*p, n_languages, n_classes),
            JointSource::Table(t) => {
                let spec = JointSpec::new(t.clone(), false)?;
                if spec.n_languages() != n_languages || spec.n_classes() != n_classes {
                    return Err(Error::JointSpec(format!(
                        "table is {}×{} but the corpus has {n_languages} languages and {n_classes} labels",
                        spec.n_languages(),
                        spec.n_classes()
                    )));
                }
                Ok(spec)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExplainSettings {
    pub threshold: f64,
    pub engine: EngineConfig,
    /// Labels to explain every test datapoint for; all labels when absent.
    pub target_labels: Option<Vec<usize>>,
    /// Explain only the first this many test datapoints of each cell.
    pub max_per_cell: Option<usize>,
}

impl Default for ExplainSettings {
    fn default() -> Self {
        ExplainSettings {
            threshold: crate::explain::DEFAULT_THRESHOLD,
            engine: EngineConfig::default(),
            target_labels: None,
            max_per_cell: None,
        }
    }
}

/// Held-out corpus with a uniform joint and different content rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticProbeCorpus {
    pub n_per_language: usize,
    pub signal_rate: f64,
    pub noise_rate: f64,
    pub min_tokens: usize,
    pub max_tokens: usize,
}

impl Default for SyntheticProbeCorpus {
    fn default() -> Self {
        SyntheticProbeCorpus {
            n_per_language: 500,
            signal_rate: 0.1,
            noise_rate: 0.1,
            min_tokens: 8,
            max_tokens: 12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeSettings {
    #[serde(flatten)]
    pub config: ProbeConfig,
    /// `None` disables the synthetic probe corpus.
    pub synthetic: Option<SyntheticProbeCorpus>,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        ProbeSettings {
            config: ProbeConfig::default(),
            synthetic: Some(SyntheticProbeCorpus::default()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub corpus: CorpusSource,
    pub joint: JointSource,
    pub train_size: usize,
    pub val_size: usize,
    pub test_size: usize,
    /// Shared by every arm; `seed`, `weighting` and `mask_entropy_coeff`
    /// are set per arm.
    pub train: TrainConfig,
    /// When set, two extra arms (balanced and imbalanced) are trained with
    /// this masked-entropy coefficient.
    pub mask_entropy_coeff: Option<f64>,
    pub explain: ExplainSettings,
    pub probe: ProbeSettings,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            corpus: CorpusSource::Synthetic {
                spec: CorpusSpec::default(),
                n_per_cell: None,
            },
            joint: JointSource::Preset(Preset::XnliSkew),
            train_size: 6000,
            val_size: 600,
            test_size: 600,
            train: TrainConfig::default(),
            mask_entropy_coeff: None,
            explain: ExplainSettings::default(),
            probe: ProbeSettings::default(),
            seeds: vec![0, 1, 2, 3, 4],
            output_dir: PathBuf::from("pbl-out"),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must not be empty".into()));
        }
        let unique: HashSet<_> = self.seeds.iter().collect();
        if unique.len() != self.seeds.len() {
            return Err(Error::Config("seeds must be distinct".into()));
        }
        if self.train_size == 0 || self.val_size == 0 || self.test_size == 0 {
            return Err(Error::Config("subset sizes must be positive".into()));
        }
        if let Some(l) = self.mask_entropy_coeff {
            if !(l > 0.0 && l.is_finite()) {
                return Err(Error::Config(
                    "mask_entropy_coeff must be positive when set".into(),
                ));
            }
        }
        if self.explain.threshold.is_nan() || self.explain.threshold <= 0.0 {
            return Err(Error::Config("explain.threshold must be positive".into()));
        }
        self.train.validate()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let config: ExperimentConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        rng::sha256_hex(text.as_bytes())
    }
}

/// Names of the training arms, in run order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    Balanced,
    Imbalanced,
    ImbalancedCw,
    BalancedMe,
    ImbalancedMe,
}

impl Arm {
    pub fn name(self) -> &'static str {
        match self {
            Arm::Balanced => "balanced",
            Arm::Imbalanced => "imbalanced",
            Arm::ImbalancedCw => "imbalanced_cw",
            Arm::BalancedMe => "balanced_me",
            Arm::ImbalancedMe => "imbalanced_me",
        }
    }

    fn uses_balanced_subset(self) -> bool {
        matches!(self, Arm::Balanced | Arm::BalancedMe)
    }
}

/// Pairs of arms compared by the cumulative SHAP difference, as
/// `(name, reference, compared)`.
fn comparisons(with_me: bool) -> Vec<(&'static str, Arm, Arm)> {
    let mut out = vec![
        ("imbalanced", Arm::Balanced, Arm::Imbalanced),
        ("imbalanced_cw", Arm::Balanced, Arm::ImbalancedCw),
    ];
    if with_me {
        out.push(("imbalanced_me", Arm::BalancedMe, Arm::ImbalancedMe));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub seed: Option<u64>,
    /// Paths relative to the manifest's directory.
    pub artifacts: Vec<String>,
    pub versions: Value,
    /// Seconds spent per stage.
    pub wall_clock: Vec<(String, f64)>,
    pub status: String,
    pub error: Option<String>,
}

impl RunManifest {
    pub fn new(config_hash: String, seed: Option<u64>) -> Self {
        RunManifest {
            config_hash,
            seed,
            artifacts: Vec::new(),
            versions: json!({
                "pbl-core": env!("CARGO_PKG_VERSION"),
                "checkpoint": model::CHECKPOINT_VERSION,
            }),
            wall_clock: Vec::new(),
            status: "ok".into(),
            error: None,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }
}

/// Everything measured for one arm within one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub arm: Arm,
    pub eval: EvalMetrics,
    pub train: TrainReport,
    /// Entropy of the prediction for an all-mask input, in nats.
    pub mask_entropy: f64,
    /// Spearman correlation between the per-language predicted-label
    /// frequencies and the training joint of the imbalanced subset.
    pub prediction_skew: f64,
    pub probe_original: ProbeReport,
    pub probe_synthetic: Option<ProbeReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub overlap: usize,
    pub arms: Vec<ArmResult>,
    /// `(comparison, report)` pairs.
    pub shap: Vec<(String, CumulativeDiffReport)>,
    /// For each label, the language holding the largest and the smallest
    /// share of it in the imbalanced joint.
    pub over_under: Vec<(usize, usize)>,
}

impl SeedResult {
    pub fn arm(&self, arm: Arm) -> Option<&ArmResult> {
        self.arms.iter().find(|a| a.arm == arm)
    }

    pub fn shap(&self, comparison: &str) -> Option<&CumulativeDiffReport> {
        self.shap
            .iter()
            .find(|(n, _)| n == comparison)
            .map(|(_, r)| r)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedFailure {
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    fn of(xs: &[f64]) -> Self {
        MeanStd {
            mean: stats::mean(xs),
            std: if xs.len() > 1 {
                stats::std_dev(xs)
            } else {
                0.0
            },
            n: xs.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub config_hash: String,
    pub seeds: Vec<SeedResult>,
    pub failures: Vec<SeedFailure>,
    pub accuracy: Vec<(String, MeanStd)>,
    pub lid: Vec<(String, String, MeanStd)>,
    pub mask_entropy: Vec<(String, MeanStd)>,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Loads or generates the pool for one seed.
fn build_pool(
    config: &ExperimentConfig,
    seed: u64,
) -> Result<(Vocab, Vec<Example>, Option<CorpusSpec>)> {
    match &config.corpus {
        CorpusSource::Jsonl { path, vocab } => {
            let (vocab, examples) = match vocab {
                Some(vp) => {
                    let v = Vocab::load_json(vp)?;
                    let ex = load_jsonl_with_vocab(path, &v)?;
                    (v, ex)
                }
                None => load_jsonl(path)?,
            };
            Ok((vocab, examples, None))
        }
        CorpusSource::Synthetic { spec, n_per_cell } => {
            let spec = CorpusSpec {
                seed: rng::derive_seed(seed, "corpus"),
                ..spec.clone()
            };
            spec.validate()?;
            let vocab = crate::corpus::synthetic_vocab(&spec)?;
            let n_per_cell = match n_per_cell {
                Some(n) => *n,
                None => required_per_cell(config, vocab.n_languages(), vocab.n_classes())?,
            };
            let examples = generate_examples(&vocab, &spec, n_per_cell, spec.seed, "")?;
            Ok((vocab, examples, Some(spec)))
        }
    }
}

/// Smallest cell size that fits the paired training subsets, the paired
/// validation subsets and the balanced test split.
pub fn required_per_cell(
    config: &ExperimentConfig,
    n_languages: usize,
    n_classes: usize,
) -> Result<usize> {
    let joint = config.joint.resolve(n_languages, n_classes)?;
    let uniform = JointSpec::uniform(n_languages, n_classes)?;
    let largest = |n: usize| -> Result<usize> {
        let a = plan_counts(&joint, n)?;
        let b = plan_counts(&uniform, n)?;
        Ok(a.counts
            .iter()
            .chain(&b.counts)
            .flatten()
            .copied()
            .max()
            .unwrap_or(0))
    };
    Ok(largest(config.train_size)?
        + largest(config.val_size)?
        + config.test_size.div_ceil(n_languages * n_classes))
}

fn without(pool: &[Example], used: &HashSet<String>) -> Vec<Example> {
    pool.iter()
        .filter(|e| !used.contains(&e.id))
        .cloned()
        .collect()
}

/// Ranks cells by the imbalanced joint and by predicted frequency, flattened
/// over languages and labels.
fn prediction_skew(eval: &EvalMetrics, joint: &JointSpec) -> f64 {
    let predicted: Vec<f64> = eval
        .per_language
        .iter()
        .flat_map(|m| m.predicted_distribution.iter().copied())
        .collect();
    let target: Vec<f64> = joint.probs().iter().flatten().copied().collect();
    stats::spearman(&predicted, &target)
}

fn over_under(joint: &JointSpec) -> Vec<(usize, usize)> {
    (0..joint.n_classes())
        .map(|c| {
            let col: Vec<f64> = joint.probs().iter().map(|r| r[c]).collect();
            let mut over = 0;
            let mut under = 0;
            for (l, p) in col.iter().enumerate() {
                if *p > col[over] {
                    over = l;
                }
                if *p < col[under] {
                    under = l;
                }
            }
            (over, under)
        })
        .collect()
}

fn probe_csv(rows: &[(&str, &str, &ProbeReport)]) -> String {
    let mut out = String::from("model,corpus,fold,accuracy\n");
    for (model, corpus, report) in rows {
        for (f, acc) in report.fold_accuracies.iter().enumerate() {
            out.push_str(&format!("{model},{corpus},{f},{acc:.6}\n"));
        }
    }
    out
}

fn first_per_cell(data: &[Example], n_classes: usize, limit: Option<usize>) -> Vec<Example> {
    let Some(limit) = limit else {
        return data.to_vec();
    };
    let mut taken = std::collections::HashMap::new();
    data.iter()
        .filter(|e| {
            let k = taken
                .entry(e.language * n_classes + e.label)
                .or_insert(0usize);
            *k += 1;
            *k <= limit
        })
        .cloned()
        .collect()
}

struct Stopwatch<'a> {
    manifest: &'a mut RunManifest,
    started: Instant,
}

impl<'a> Stopwatch<'a> {
    fn new(manifest: &'a mut RunManifest) -> Self {
        Stopwatch {
            manifest,
            started: Instant::now(),
        }
    }

    fn lap(&mut self, stage: &str) {
        let now = Instant::now();
        self.manifest
            .wall_clock
            .push((stage.to_string(), (now - self.started).as_secs_f64()));
        self.started = now;
    }
}

/// Runs every stage for one seed inside `dir`.
pub fn run_seed(config: &ExperimentConfig, seed: u64, dir: &Path) -> Result<SeedResult> {
    create_dir(&dir.join("subsets"))?;
    create_dir(&dir.join("checkpoints"))?;
    create_dir(&dir.join("metrics"))?;
    let mut manifest = RunManifest::new(config.hash(), Some(seed));
    let result = run_seed_inner(config, seed, dir, &mut manifest);
    if let Err(e) = &result {
        manifest.status = "failed".into();
        manifest.error = Some(e.to_string());
    }
    manifest.write(&dir.join("manifest.json"))?;
    result
}

fn run_seed_inner(
    config: &ExperimentConfig,
    seed: u64,
    dir: &Path,
    manifest: &mut RunManifest,
) -> Result<SeedResult> {
    let mut artifacts = Vec::new();
    let mut clock = Stopwatch::new(manifest);

    let (vocab, pool, spec) = build_pool(config, seed)?;
    let (n_languages, n_classes) = (vocab.n_languages(), vocab.n_classes());
    let joint = config.joint.resolve(n_languages, n_classes)?;
    vocab.save_json(&dir.join("vocab.json"))?;
    artifacts.push("vocab.json".to_string());
    if spec.is_some() {
        write_jsonl(&dir.join("corpus.jsonl"), &vocab, &pool)?;
        artifacts.push("corpus.jsonl".to_string());
    }
    clock.lap("corpus");

    let (bal, imbal, overlap) = sample_paired(
        &pool,
        &joint,
        config.train_size,
        rng::derive_seed(seed, "sampler/train"),
    )?;
    let mut used = id_set(&bal);
    used.extend(id_set(&imbal));
    let rest = without(&pool, &used);
    let (val_bal, val_imbal, _) = sample_paired(
        &rest,
        &joint,
        config.val_size,
        rng::derive_seed(seed, "sampler/val"),
    )?;
    used.extend(id_set(&val_bal));
    used.extend(id_set(&val_imbal));
    let rest = without(&pool, &used);
    let (_, test) = split_eval(
        &rest,
        &used,
        n_languages,
        n_classes,
        0,
        config.test_size,
        rng::derive_seed(seed, "sampler/test"),
    )?;
    for (name, data) in [
        ("balanced", &bal),
        ("imbalanced", &imbal),
        ("val_balanced", &val_bal),
        ("val_imbalanced", &val_imbal),
        ("test", &test),
    ] {
        let rel = format!("subsets/{name}.jsonl");
        write_jsonl(&dir.join(&rel), &vocab, data)?;
        artifacts.push(rel);
    }
    write_json(&dir.join("overlap.json"), &overlap)?;
    artifacts.push("overlap.json".to_string());
    clock.lap("sample");

    let probe_corpus = match (&config.probe.synthetic, &spec) {
        (Some(p), Some(spec)) => {
            let probe_spec = CorpusSpec {
                signal_rate: p.signal_rate,
                noise_rate: p.noise_rate,
                min_tokens: p.min_tokens,
                max_tokens: p.max_tokens,
                seed: rng::derive_seed(seed, "probe/corpus"),
                ..spec.clone()
            };
            probe_spec.validate()?;
            let per_cell = p.n_per_language.div_ceil(n_classes);
            Some(generate_examples(
                &vocab,
                &probe_spec,
                per_cell,
                probe_spec.seed,
                "probe:",
            )?)
        }
        _ => None,
    };

    let mut arms = vec![Arm::Balanced, Arm::Imbalanced, Arm::ImbalancedCw];
    if config.mask_entropy_coeff.is_some() {
        arms.extend([Arm::BalancedMe, Arm::ImbalancedMe]);
    }
    // every arm starts from the same initialization
    let train_seed = rng::derive_seed(seed, "train");
    let fold_seed = rng::derive_seed(seed, "probe/folds");
    let mut trained: Vec<(Arm, ModelParams)> = Vec::new();
    let mut results = Vec::new();
    let mut accuracy_csv = String::from("arm,language,accuracy\n");
    let mut probe_rows_orig = Vec::new();
    let mut probe_rows_syn = Vec::new();
    for arm in arms {
        let (data, val) = if arm.uses_balanced_subset() {
            (&bal, &val_bal)
        } else {
            (&imbal, &val_imbal)
        };
        let train_config = TrainConfig {
            seed: train_seed,
            weighting: if arm == Arm::ImbalancedCw {
                Weighting::PerLanguage
            } else {
                Weighting::None
            },
            mask_entropy_coeff: match arm {
                Arm::BalancedMe | Arm::ImbalancedMe => config.mask_entropy_coeff.unwrap_or(0.0),
                _ => 0.0,
            },
            ..config.train.clone()
        };
        let (params, report) = train(&vocab, data, val, &train_config)?;
        let ckpt = format!("checkpoints/{}.pbl", arm.name());
        model::save(
            &params,
            &vocab.hash(),
            &json!({ "arm": arm.name(), "seed": seed, "train": train_config }),
            &dir.join(&ckpt),
        )?;
        artifacts.push(ckpt);
        clock.lap(&format!("train/{}", arm.name()));

        let eval = evaluate(&params, &test, n_languages)?;
        accuracy_csv.push_str(&format!("{},all,{:.6}\n", arm.name(), eval.accuracy));
        for (l, m) in eval.per_language.iter().enumerate() {
            accuracy_csv.push_str(&format!(
                "{},{},{:.6}\n",
                arm.name(),
                vocab.languages()[l],
                m.accuracy
            ));
        }
        let rel = format!("metrics/predictions_{}.csv", arm.name());
        write_text(&dir.join(&rel), &eval.distribution_csv(&vocab))?;
        artifacts.push(rel);
        let probs = params.forward_all_mask().probs;
        let mask_entropy = -neg_entropy(&probs);

        let probe_original = cross_validate(
            &extract_features(&params, &test)?,
            &config.probe.config,
            fold_seed,
        )?;
        let probe_synthetic = match &probe_corpus {
            Some(corpus) => Some(cross_validate(
                &extract_features(&params, corpus)?,
                &config.probe.config,
                fold_seed,
            )?),
            None => None,
        };
        clock.lap(&format!("eval/{}", arm.name()));

        let result = ArmResult {
            arm,
            prediction_skew: prediction_skew(&eval, &joint),
            eval,
            train: report,
            mask_entropy,
            probe_original,
            probe_synthetic,
        };
        let rel = format!("metrics/{}.json", arm.name());
        write_json(&dir.join(&rel), &result)?;
        artifacts.push(rel);
        trained.push((arm, params));
        results.push(result);
    }
    for r in &results {
        probe_rows_orig.push((r.arm.name(), "original", &r.probe_original));
        if let Some(s) = &r.probe_synthetic {
            probe_rows_syn.push((r.arm.name(), "synthetic", s));
        }
    }
    write_text(&dir.join("metrics/accuracy.csv"), &accuracy_csv)?;
    artifacts.push("metrics/accuracy.csv".into());
    write_text(
        &dir.join("probe_original.csv"),
        &probe_csv(&probe_rows_orig),
    )?;
    artifacts.push("probe_original.csv".into());
    if !probe_rows_syn.is_empty() {
        write_text(
            &dir.join("probe_synthetic.csv"),
            &probe_csv(&probe_rows_syn),
        )?;
        artifacts.push("probe_synthetic.csv".into());
    }

    let params_of = |arm: Arm| {
        &trained
            .iter()
            .find(|(a, _)| *a == arm)
            .expect("arm trained")
            .1
    };
    let labels = config
        .explain
        .target_labels
        .clone()
        .unwrap_or_else(|| (0..n_classes).collect());
    let engine = EngineConfig {
        seed: rng::derive_seed(seed, "explain"),
        ..config.explain.engine.clone()
    };
    let explained = first_per_cell(&test, n_classes, config.explain.max_per_cell);
    let mut shap = Vec::new();
    for (name, reference, compared) in comparisons(config.mask_entropy_coeff.is_some()) {
        let report = cumulative_diff(
            params_of(reference),
            params_of(compared),
            &explained,
            n_languages,
            &LabelMode::Fixed(labels.clone()),
            config.explain.threshold,
            &engine,
        )?;
        let csv = format!("shapdiff_{name}.csv");
        write_text(
            &dir.join(&csv),
            &report.to_csv(vocab.languages(), vocab.labels()),
        )?;
        let sidecar = format!("shapdiff_{name}.json");
        write_json(&dir.join(&sidecar), &report)?;
        artifacts.extend([csv, sidecar]);
        shap.push((name.to_string(), report));
        clock.lap(&format!("shap/{name}"));
    }

    manifest.artifacts = artifacts;
    manifest.artifacts.push("manifest.json".into());
    Ok(SeedResult {
        seed,
        overlap: overlap.overlap,
        arms: results,
        shap,
        over_under: over_under(&joint),
    })
}

fn summarize(
    config_hash: String,
    seeds: Vec<SeedResult>,
    failures: Vec<SeedFailure>,
) -> ExperimentSummary {
    let arm_names: Vec<Arm> = seeds
        .first()
        .map(|s| s.arms.iter().map(|a| a.arm).collect())
        .unwrap_or_default();
    let per_arm = |f: &dyn Fn(&ArmResult) -> Option<f64>| -> Vec<(String, MeanStd)> {
        arm_names
            .iter()
            .map(|&arm| {
                let xs: Vec<f64> = seeds
                    .iter()
                    .filter_map(|s| s.arm(arm).and_then(f))
                    .collect();
                (arm.name().to_string(), MeanStd::of(&xs))
            })
            .collect()
    };
    let accuracy = per_arm(&|a| Some(a.eval.accuracy));
    let mask_entropy = per_arm(&|a| Some(a.mask_entropy));
    let mut lid = Vec::new();
    for (corpus, rows) in [
        (
            "original",
            per_arm(&|a| Some(a.probe_original.mean_accuracy)),
        ),
        (
            "synthetic",
            per_arm(&|a| a.probe_synthetic.as_ref().map(|p| p.mean_accuracy)),
        ),
    ] {
        for (arm, ms) in rows {
            if ms.n > 0 {
                lid.push((arm, corpus.to_string(), ms));
            }
        }
    }
    ExperimentSummary {
        config_hash,
        seeds,
        failures,
        accuracy,
        lid,
        mask_entropy,
    }
}

fn summary_tables(
    summary: &ExperimentSummary,
    vocab_names: Option<(Vec<String>, Vec<String>)>,
) -> Vec<(&'static str, String)> {
    let mut acc = String::from("arm,mean_accuracy,std_accuracy,n_seeds\n");
    for (arm, ms) in &summary.accuracy {
        acc.push_str(&format!("{arm},{:.6},{:.6},{}\n", ms.mean, ms.std, ms.n));
    }
    let mut lid = String::from("arm,corpus,mean_accuracy,std_accuracy,n_seeds\n");
    for (arm, corpus, ms) in &summary.lid {
        lid.push_str(&format!(
            "{arm},{corpus},{:.6},{:.6},{}\n",
            ms.mean, ms.std, ms.n
        ));
    }
    let (languages, labels) = vocab_names.unwrap_or_default();
    let name = |names: &[String], i: usize| names.get(i).cloned().unwrap_or_else(|| i.to_string());
    let mut shap =
        String::from("comparison,language,label,category,mean_cum_diff,std_cum_diff,n_seeds\n");
    let mut base =
        String::from("comparison,language,label,mean_abs_base_diff,std_abs_base_diff,n_seeds\n");
    if let Some(first) = summary.seeds.first() {
        for (comparison, report) in &first.shap {
            for row in &report.rows {
                let xs: Vec<f64> = summary
                    .seeds
                    .iter()
                    .filter_map(|s| {
                        s.shap(comparison)?
                            .row(row.language, row.label, row.category)
                    })
                    .map(|r| r.mean_cum_diff)
                    .collect();
                let ms = MeanStd::of(&xs);
                shap.push_str(&format!(
                    "{comparison},{},{},{},{:.6},{:.6},{}\n",
                    name(&languages, row.language),
                    name(&labels, row.label),
                    row.category.name(),
                    ms.mean,
                    ms.std,
                    ms.n
                ));
            }
            for b in &report.base_values {
                let xs: Vec<f64> = summary
                    .seeds
                    .iter()
                    .filter_map(|s| s.shap(comparison)?.base(b.language, b.label))
                    .map(|r| r.mean_abs_base_diff)
                    .collect();
                let ms = MeanStd::of(&xs);
                base.push_str(&format!(
                    "{comparison},{},{},{:.6},{:.6},{}\n",
                    name(&languages, b.language),
                    name(&labels, b.label),
                    ms.mean,
                    ms.std,
                    ms.n
                ));
            }
        }
    }
    vec![
        ("summary_accuracy.csv", acc),
        ("summary_lid.csv", lid),
        ("summary_shapdiff.csv", shap),
        ("summary_base_values.csv", base),
    ]
}

/// Runs all seeds under `config.output_dir`, one `seed-<n>` directory each,
/// then writes the summary JSON and per-table CSVs. A failing seed is
/// recorded and the remaining seeds still run.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentSummary> {
    config.validate()?;
    let root = &config.output_dir;
    create_dir(root)?;
    let hash = config.hash();
    write_json(&root.join("config.json"), config)?;
    let mut manifest = RunManifest::new(hash.clone(), None);
    manifest.artifacts.push("config.json".into());
    let mut done = Vec::new();
    let mut failures = Vec::new();
    let mut names = None;
    for &seed in &config.seeds {
        let started = Instant::now();
        let sub = format!("seed-{seed}");
        let dir = root.join(&sub);
        match run_seed(config, seed, &dir) {
            Ok(r) => {
                if names.is_none() {
                    let v = Vocab::load_json(&dir.join("vocab.json"))?;
                    names = Some((v.languages().to_vec(), v.labels().to_vec()));
                }
                done.push(r);
            }
            Err(e) => failures.push(SeedFailure {
                seed,
                error: e.to_string(),
            }),
        }
        manifest.artifacts.push(format!("{sub}/manifest.json"));
        manifest
            .wall_clock
            .push((sub, started.elapsed().as_secs_f64()));
    }
    if done.is_empty() {
        manifest.status = "failed".into();
        manifest.error = failures.first().map(|f| f.error.clone());
        manifest.write(&root.join("manifest.json"))?;
        let first = failures.into_iter().next().expect("seeds is non-empty");
        return Err(Error::Config(format!(
            "every seed failed; seed {}: {}",
            first.seed, first.error
        )));
    }
    if !failures.is_empty() {
        manifest.status = "partial".into();
    }
    let summary = summarize(hash, done, failures);
    for (file, text) in summary_tables(&summary, names) {
        write_text(&root.join(file), &text)?;
        manifest.artifacts.push(file.into());
    }
    write_json(&root.join("summary.json"), &summary)?;
    manifest.artifacts.push("summary.json".into());
    manifest.artifacts.push("manifest.json".into());
    manifest.write(&root.join("manifest.json"))?;
    Ok(summary)
}

/// JSON Schema of [`ExperimentConfig`].
pub fn config_schema() -> Value {
    let number = json!({"type": "number"});
    json!({
        "$schema": "https://json-schema.org/draft/2020-12/schema",
        "title": "ExperimentConfig",
        "type": "object",
        "additionalProperties": false,
        "properties": {
            "corpus": {
                "oneOf": [
                    {"type": "object", "required": ["synthetic"], "properties": {"synthetic": {
                        "type": "object",
                        "properties": {
                            "spec": {"type": "object", "properties": {
                                "n_languages": {"type": "integer", "minimum": 1, "default": 2},
                                "n_classes": {"type": "integer", "minimum": 2, "default": 3},
                                "min_tokens": {"type": "integer", "minimum": 1, "default": 8},
                                "max_tokens": {"type": "integer", "minimum": 1, "default": 12},
                                "signal_rate": {"type": "number", "exclusiveMinimum": 0, "maximum": 1, "default": 0.2},
                                "noise_rate": {"type": "number", "minimum": 0, "maximum": 1, "default": 0.15},
                                "fillers_per_language": {"type": "integer", "minimum": 1, "default": 200},
                                "signals_per_language_class": {"type": "integer", "minimum": 1, "default": 10},
                                "seed": {"type": "integer", "description": "replaced by a seed derived from each run seed"}
                            }},
                            "n_per_cell": {"type": ["integer", "null"], "description": "derived from the subset sizes when null"}
                        }
                    }}},
                    {"type": "object", "required": ["jsonl"], "properties": {"jsonl": {
                        "type": "object",
                        "required": ["path"],
                        "properties": {
                            "path": {"type": "string"},
                            "vocab": {"type": ["string", "null"]}
                        }
                    }}}
                ]
            },
            "joint": {
                "oneOf": [
                    {"type": "object", "properties": {"preset": {"enum": ["amazon_skew", "xnli_skew", "uniform"]}}},
                    {"type": "object", "properties": {"table": {"type": "array", "items": {"type": "array", "items": number}}}}
                ],
                "default": {"preset": "xnli_skew"}
            },
            "train_size": {"type": "integer", "minimum": 1, "default": 6000},
            "val_size": {"type": "integer", "minimum": 1, "default": 600},
            "test_size": {"type": "integer", "minimum": 1, "default": 600, "description": "multiple of L·C"},
            "train": {"type": "object", "properties": {
                "epochs": {"type": "integer", "minimum": 0, "default": 20},
                "batch_size": {"type": "integer", "minimum": 1, "default": 32},
                "learning_rate": {"type": "number", "exclusiveMinimum": 0, "default": 0.1},
                "validate_every": {"type": "integer", "minimum": 1, "default": 1},
                "model": {"type": "object", "properties": {
                    "embed_dim": {"type": "integer", "minimum": 1, "default": 32},
                    "hidden_dim": {"type": "integer", "minimum": 1, "default": 32},
                    "embed_init_std": {"type": "number", "minimum": 0, "default": 0.01},
                    "zero_mask_init": {"type": "boolean", "default": true}
                }}
            }},
            "mask_entropy_coeff": {"type": ["number", "null"], "exclusiveMinimum": 0, "description": "adds balanced_me and imbalanced_me arms"},
            "explain": {"type": "object", "properties": {
                "threshold": {"type": "number", "exclusiveMinimum": 0, "default": 0.01},
                "engine": {"type": "object", "properties": {
                    "exact_limit": {"type": "integer", "default": 12},
                    "n_permutations": {"type": "integer", "minimum": 1, "default": 2000}
                }},
                "target_labels": {"type": ["array", "null"], "items": {"type": "integer", "minimum": 0}},
                "max_per_cell": {"type": ["integer", "null"], "minimum": 1}
            }},
            "probe": {"type": "object", "properties": {
                "folds": {"type": "integer", "minimum": 2, "default": 5},
                "l2": {"type": "number", "minimum": 0, "default": 1.0},
                "max_iters": {"type": "integer", "minimum": 1, "default": 1000},
                "tolerance": {"type": "number", "exclusiveMinimum": 0, "default": 1e-6},
                "synthetic": {"type": ["object", "null"], "properties": {
                    "n_per_language": {"type": "integer", "default": 500},
                    "signal_rate": {"type": "number", "default": 0.1},
                    "noise_rate": {"type": "number", "default": 0.1},
                    "min_tokens": {"type": "integer", "default": 8},
                    "max_tokens": {"type": "integer", "default": 12}
                }}
            }},
            "seeds": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1, "uniqueItems": true},
            "output_dir": {"type": "string"}
        }
    })
}

/// Neutral-category mean difference for one (language, label).
pub fn neutral_mean(report: &CumulativeDiffReport, language: usize, label: usize) -> Option<f64> {
    report
        .row(language, label, Category::Neutral)
        .map(|r| r.mean_cum_diff)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(dir: &Path) -> ExperimentConfig {
        ExperimentConfig {
            corpus: CorpusSource::Synthetic {
                spec: CorpusSpec {
                    fillers_per_language: 20,
                    signals_per_language_class: 2,
                    min_tokens: 4,
                    max_tokens: 6,
                    ..CorpusSpec::default()
                },
                n_per_cell: None,
            },
            train_size: 120,
            val_size: 60,
            test_size: 60,
            train: TrainConfig {
                epochs: 2,
                model: crate::model::ModelConfig {
                    embed_dim: 8,
                    hidden_dim: 8,
                    ..Default::default()
                },
                ..TrainConfig::default()
            },
            explain: ExplainSettings {
                max_per_cell: Some(2),
                ..ExplainSettings::default()
            },
            probe: ProbeSettings {
                synthetic: Some(SyntheticProbeCorpus {
                    n_per_language: 30,
                    ..SyntheticProbeCorpus::default()
                }),
                ..ProbeSettings::default()
            },
            seeds: vec![3],
            output_dir: dir.to_path_buf(),
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn config_round_trips_through_json() {
        let c = tiny(Path::new("x"));
        let text = serde_json::to_string(&c).unwrap();
        let back: ExperimentConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        let minimal: ExperimentConfig = serde_json::from_str(r#"{"seeds": [1]}"#).unwrap();
        assert_eq!(minimal.train_size, 6000);
        assert!(
            serde_json::from_str::<ExperimentConfig>(r#"{"joint": {"preset": "nope"}}"#).is_err()
        );
    }

    #[test]
    fn empty_seed_list_is_rejected() {
        let c = ExperimentConfig {
            seeds: vec![],
            ..ExperimentConfig::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn pool_size_covers_every_subset() {
        let c = ExperimentConfig::default();
        // 6000 · 1/4 + 600 · 1/4 + 600 / 6
        assert_eq!(required_per_cell(&c, 2, 3).unwrap(), 1500 + 150 + 100);
    }

    #[test]
    fn over_and_under_represented_languages() {
        let joint = preset(Preset::XnliSkew, 2, 3).unwrap();
        assert_eq!(over_under(&joint), vec![(0, 1), (0, 0), (1, 0)]);
    }

    #[test]
    fn smoke_run_emits_every_artifact() {
        let dir = tempfile::tempdir().unwrap();
        let c = tiny(dir.path());
        let summary = run_experiment(&c).unwrap();
        assert!(summary.failures.is_empty());
        let seed_dir = dir.path().join("seed-3");
        for f in [
            "checkpoints/balanced.pbl",
            "checkpoints/imbalanced.pbl",
            "checkpoints/imbalanced_cw.pbl",
            "probe_original.csv",
            "probe_synthetic.csv",
            "shapdiff_imbalanced.csv",
            "shapdiff_imbalanced_cw.csv",
            "manifest.json",
        ] {
            assert!(seed_dir.join(f).exists(), "{f}");
        }
        assert!(dir.path().join("summary.json").exists());
        let m: RunManifest =
            serde_json::from_str(&fs::read_to_string(seed_dir.join("manifest.json")).unwrap())
                .unwrap();
        for a in &m.artifacts {
            assert!(seed_dir.join(a).exists(), "{a}");
        }
        assert_eq!(m.config_hash, c.hash());

        // the arms train on exactly the sampled ids
        let vocab = Vocab::load_json(&seed_dir.join("vocab.json")).unwrap();
        let bal = load_jsonl_with_vocab(&seed_dir.join("subsets/balanced.jsonl"), &vocab).unwrap();
        let imbal =
            load_jsonl_with_vocab(&seed_dir.join("subsets/imbalanced.jsonl"), &vocab).unwrap();
        let shared = id_set(&bal).intersection(&id_set(&imbal)).count();
        assert_eq!(shared, summary.seeds[0].overlap);
        assert_eq!(shared, 100);

        let acc = &summary.accuracy[0].1;
        assert_eq!(acc.mean, summary.seeds[0].arms[0].eval.accuracy);
    }

    #[test]
    fn failing_seed_is_recorded() {
        let dir = tempfile::tempdir().unwrap();
        let c = ExperimentConfig {
            corpus: CorpusSource::Synthetic {
                spec: CorpusSpec::default(),
                n_per_cell: Some(5),
            },
            ..tiny(dir.path())
        };
        let err = run_experiment(&c).unwrap_err();
        assert!(err.to_string().contains("seed 3"));
        let m: RunManifest = serde_json::from_str(
            &fs::read_to_string(dir.path().join("seed-3/manifest.json")).unwrap(),
        )
        .unwrap();
        assert_eq!(m.status, "failed");
    }
}
