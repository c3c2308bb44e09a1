use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use pbl_core::corpus::{
    generate_corpus, load_jsonl, load_jsonl_with_vocab, write_jsonl, CorpusSpec, Example, Vocab,
};
use pbl_core::experiment::{config_schema, run_experiment, ExperimentConfig, RunManifest};
use pbl_core::explain::{cumulative_diff, EngineConfig, LabelMode};
use pbl_core::model::{self, ModelConfig};
use pbl_core::probe::{cross_validate, extract_features, ProbeConfig};
use pbl_core::rng::sha256_hex;
use pbl_core::sampler::{preset, sample_paired, JointSpec, Preset};
use pbl_core::training::{evaluate, train, TrainConfig, Weighting};
use pbl_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(
    name = "pbl",
    version,
    about = "Language-specific class imbalance laboratory"
)]
struct Cli {
    /// Root seed for every random draw.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true, env = "PBL_OUT", default_value = "pbl-out")]
    out: PathBuf,

    /// JSON config file (experiment config, or training config for `train`).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Print the experiment config JSON schema and exit.
    #[arg(long)]
    print_schema: bool,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic corpus with known informative tokens.
    GenCorpus(GenArgs),
    /// Draw paired balanced and imbalanced subsets from a corpus.
    Sample(SampleArgs),
    /// Train a classifier.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a test set.
    Eval(EvalArgs),
    /// Cross-validated language-identification probe on a checkpoint.
    Probe(ProbeArgs),
    /// Cumulative SHAP difference between two checkpoints.
    ShapDiff(ShapArgs),
    /// Run the full multi-seed protocol from `--config`.
    Experiment,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long, default_value_t = 500)]
    n_per_cell: usize,
    #[arg(long, default_value_t = 2)]
    languages: usize,
    #[arg(long, default_value_t = 3)]
    classes: usize,
    #[arg(long, default_value_t = 8)]
    min_tokens: usize,
    #[arg(long, default_value_t = 12)]
    max_tokens: usize,
    #[arg(long, default_value_t = 0.2)]
    signal_rate: f64,
    #[arg(long, default_value_t = 0.15)]
    noise_rate: f64,
    #[arg(long, default_value_t = 200)]
    fillers: usize,
    #[arg(long, default_value_t = 10)]
    signals: usize,
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Vocabulary JSON; built from the first data file when absent.
    #[arg(long)]
    vocab: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SampleArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[command(flatten)]
    data: DataArgs,
    /// Built-in joint distribution.
    #[arg(long, value_enum, default_value_t = PresetArg::XnliSkew, conflicts_with = "joint_table")]
    joint: PresetArg,
    /// JSON file holding an explicit L×C joint table.
    #[arg(long)]
    joint_table: Option<PathBuf>,
    /// Subset size.
    #[arg(long)]
    n: usize,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum PresetArg {
    AmazonSkew,
    XnliSkew,
    Uniform,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::AmazonSkew => Preset::AmazonSkew,
            PresetArg::XnliSkew => Preset::XnliSkew,
            PresetArg::Uniform => Preset::Uniform,
        }
    }
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum WeightingArg {
    None,
    PerLanguage,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    train: PathBuf,
    /// Validation set; required unless `--epochs 0`.
    #[arg(long)]
    val: Option<PathBuf>,
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long, value_enum)]
    weighting: Option<WeightingArg>,
    #[arg(long)]
    mask_entropy_coeff: Option<f64>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    hidden_dim: Option<usize>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
}

#[derive(Args, Debug)]
struct ProbeArgs {
    #[arg(long)]
    model: PathBuf,
    /// Probe corpus (JSONL).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    #[arg(long, default_value_t = 1.0)]
    l2: f64,
    #[arg(long, default_value_t = 1000)]
    max_iters: usize,
    /// Name used in the CSV `corpus` column.
    #[arg(long, default_value = "original")]
    corpus_name: String,
}

#[derive(Args, Debug)]
struct ShapArgs {
    /// Balanced (reference) checkpoint.
    #[arg(long)]
    reference: PathBuf,
    /// Checkpoint compared against the reference.
    #[arg(long)]
    compared: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Target label index; repeat for several. Defaults to every label.
    #[arg(long = "label", conflicts_with = "true_label")]
    labels: Vec<usize>,
    /// Explain each datapoint for its own label.
    #[arg(long)]
    true_label: bool,
    #[arg(long, default_value_t = pbl_core::explain::DEFAULT_THRESHOLD)]
    threshold: f64,
    #[arg(long, default_value_t = pbl_core::explain::DEFAULT_EXACT_LIMIT)]
    exact_limit: usize,
    #[arg(long, default_value_t = pbl_core::explain::DEFAULT_PERMUTATIONS)]
    permutations: usize,
}

/// Collects artifacts and timings for one command's manifest.
struct Run {
    out: PathBuf,
    manifest: RunManifest,
    started: Instant,
}

impl Run {
    fn new(out: &Path, invocation: &Value, seed: Option<u64>) -> Result<Self> {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let hash = sha256_hex(invocation.to_string().as_bytes());
        Ok(Run {
            out: out.to_path_buf(),
            manifest: RunManifest::new(hash, seed),
            started: Instant::now(),
        })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.manifest.artifacts.push(name.to_string());
        self.out.join(name)
    }

    fn write_text(&mut self, name: &str, text: &str) -> Result<()> {
        let path = self.path(name);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    fn write_json(&mut self, name: &str, value: &impl serde::Serialize) -> Result<()> {
        let text = serde_json::to_string_pretty(value)? + "\n";
        self.write_text(name, &text)
    }

    fn finish(mut self, stage: &str) -> Result<()> {
        self.manifest
            .wall_clock
            .push((stage.to_string(), self.started.elapsed().as_secs_f64()));
        self.manifest.artifacts.push("manifest.json".into());
        self.manifest.write(&self.out.join("manifest.json"))
    }
}

fn load_data(path: &Path, vocab: Option<&Path>) -> Result<(Vocab, Vec<Example>)> {
    match vocab {
        Some(v) => {
            let vocab = Vocab::load_json(v)?;
            let ex = load_jsonl_with_vocab(path, &vocab)?;
            Ok((vocab, ex))
        }
        None => load_jsonl(path),
    }
}

fn cmd_gen(cli: &Cli, a: &GenArgs) -> Result<()> {
    let spec = CorpusSpec {
        n_languages: a.languages,
        n_classes: a.classes,
        min_tokens: a.min_tokens,
        max_tokens: a.max_tokens,
        signal_rate: a.signal_rate,
        noise_rate: a.noise_rate,
        fillers_per_language: a.fillers,
        signals_per_language_class: a.signals,
        seed: cli.seed.unwrap_or(0),
    };
    let (vocab, examples) = generate_corpus(&spec, a.n_per_cell)?;
    let mut run = Run::new(
        &cli.out,
        &json!({"cmd": "gen-corpus", "spec": spec, "n_per_cell": a.n_per_cell}),
        cli.seed,
    )?;
    write_jsonl(&run.path("corpus.jsonl"), &vocab, &examples)?;
    vocab.save_json(&run.path("vocab.json"))?;
    run.write_json("spec.json", &spec)?;
    run.finish("gen-corpus")
}

fn cmd_sample(cli: &Cli, a: &SampleArgs) -> Result<()> {
    let (vocab, pool) = load_data(&a.corpus, a.data.vocab.as_deref())?;
    let joint = match &a.joint_table {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            JointSpec::new(serde_json::from_str(&text)?, false)?
        }
        None => preset(a.joint.into(), vocab.n_languages(), vocab.n_classes())?,
    };
    let seed = cli.seed.unwrap_or(0);
    let (bal, imbal, report) = sample_paired(&pool, &joint, a.n, seed)?;
    let invocation = json!({"cmd": "sample", "corpus": a.corpus, "joint": joint.probs(), "n": a.n});
    let mut run = Run::new(&cli.out, &invocation, Some(seed))?;
    write_jsonl(&run.path("balanced.jsonl"), &vocab, &bal)?;
    write_jsonl(&run.path("imbalanced.jsonl"), &vocab, &imbal)?;
    vocab.save_json(&run.path("vocab.json"))?;
    run.write_json("overlap.json", &report)?;
    run.finish("sample")
}

fn cmd_train(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let mut config = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            serde_json::from_str::<TrainConfig>(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        }
        None => TrainConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(v) = a.epochs {
        config.epochs = v;
    }
    if let Some(v) = a.batch_size {
        config.batch_size = v;
    }
    if let Some(v) = a.learning_rate {
        config.learning_rate = v;
    }
    if let Some(v) = a.weighting {
        config.weighting = match v {
            WeightingArg::None => Weighting::None,
            WeightingArg::PerLanguage => Weighting::PerLanguage,
        };
    }
    if let Some(v) = a.mask_entropy_coeff {
        config.mask_entropy_coeff = v;
    }
    config.model = ModelConfig {
        embed_dim: a.embed_dim.unwrap_or(config.model.embed_dim),
        hidden_dim: a.hidden_dim.unwrap_or(config.model.hidden_dim),
        ..config.model
    };

    let (vocab, data) = load_data(&a.train, a.data.vocab.as_deref())?;
    let val = match &a.val {
        Some(p) => load_jsonl_with_vocab(p, &vocab)?,
        None if config.epochs == 0 => Vec::new(),
        None => {
            return Err(Error::Config(
                "--val is required when training for one or more epochs".into(),
            ))
        }
    };
    let (params, report) = train(&vocab, &data, &val, &config)?;
    let invocation = json!({"cmd": "train", "train": a.train, "val": a.val, "config": config});
    let mut run = Run::new(&cli.out, &invocation, Some(config.seed))?;
    model::save(
        &params,
        &vocab.hash(),
        &json!({"train": config}),
        &run.path("model.pbl"),
    )?;
    vocab.save_json(&run.path("vocab.json"))?;
    run.write_json("train_report.json", &report)?;
    run.finish("train")
}

fn cmd_eval(cli: &Cli, a: &EvalArgs) -> Result<()> {
    let vocab = Vocab::load_json(&a.vocab)?;
    let ckpt = model::load(&a.model, &vocab)?;
    let test = load_jsonl_with_vocab(&a.test, &vocab)?;
    let metrics = evaluate(&ckpt.params, &test, vocab.n_languages())?;
    let mut run = Run::new(
        &cli.out,
        &json!({"cmd": "eval", "model": a.model, "test": a.test}),
        cli.seed,
    )?;
    run.write_json("metrics.json", &metrics)?;
    run.write_text("predictions.csv", &metrics.distribution_csv(&vocab))?;
    run.finish("eval")
}

fn cmd_probe(cli: &Cli, a: &ProbeArgs) -> Result<()> {
    let vocab = Vocab::load_json(&a.vocab)?;
    let ckpt = model::load(&a.model, &vocab)?;
    let data = load_jsonl_with_vocab(&a.data, &vocab)?;
    let config = ProbeConfig {
        folds: a.folds,
        l2: a.l2,
        max_iters: a.max_iters,
        ..ProbeConfig::default()
    };
    let seed = cli.seed.unwrap_or(0);
    let report = cross_validate(&extract_features(&ckpt.params, &data)?, &config, seed)?;
    let model_name = a
        .model
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("model");
    let mut csv = String::from("model,corpus,fold,accuracy\n");
    for (f, acc) in report.fold_accuracies.iter().enumerate() {
        csv.push_str(&format!("{model_name},{},{f},{acc:.6}\n", a.corpus_name));
    }
    let invocation = json!({"cmd": "probe", "model": a.model, "data": a.data, "config": config});
    let mut run = Run::new(&cli.out, &invocation, Some(seed))?;
    run.write_json("probe.json", &report)?;
    run.write_text("probe.csv", &csv)?;
    run.finish("probe")
}

fn cmd_shap(cli: &Cli, a: &ShapArgs) -> Result<()> {
    let vocab = Vocab::load_json(&a.vocab)?;
    let reference = model::load(&a.reference, &vocab)?;
    let compared = model::load(&a.compared, &vocab)?;
    let data = load_jsonl_with_vocab(&a.data, &vocab)?;
    let mode = if a.true_label {
        LabelMode::True
    } else if a.labels.is_empty() {
        LabelMode::Fixed((0..vocab.n_classes()).collect())
    } else {
        LabelMode::Fixed(a.labels.clone())
    };
    let engine = EngineConfig {
        exact_limit: a.exact_limit,
        n_permutations: a.permutations,
        seed: cli.seed.unwrap_or(0),
    };
    let report = cumulative_diff(
        &reference.params,
        &compared.params,
        &data,
        vocab.n_languages(),
        &mode,
        a.threshold,
        &engine,
    )?;
    let invocation = json!({
        "cmd": "shap-diff", "reference": a.reference, "compared": a.compared,
        "data": a.data, "mode": mode, "threshold": a.threshold, "engine": engine,
    });
    let mut run = Run::new(&cli.out, &invocation, Some(engine.seed))?;
    run.write_text(
        "shapdiff.csv",
        &report.to_csv(vocab.languages(), vocab.labels()),
    )?;
    run.write_json("shapdiff.json", &report)?;
    run.finish("shap-diff")
}

fn cmd_experiment(cli: &Cli, out_given: bool) -> Result<()> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("experiment needs --config".into()))?;
    let mut config = ExperimentConfig::load(path)?;
    if out_given {
        config.output_dir = cli.out.clone();
    }
    if let Some(seed) = cli.seed {
        config.seeds = vec![seed];
    }
    let summary = run_experiment(&config)?;
    if !summary.failures.is_empty() {
        eprintln!(
            "{} of {} seeds failed; see {}",
            summary.failures.len(),
            config.seeds.len(),
            config.output_dir.join("manifest.json").display()
        );
    }
    Ok(())
}

fn error_record(e: &Error) -> Value {
    json!({
        "error": {
            "kind": e.kind(),
            "message": e.to_string(),
            "path": e.path(),
        }
    })
}

fn main() -> ExitCode {
    let matches = <Cli as clap::CommandFactory>::command().get_matches();
    let out_given = matches.value_source("out") != Some(clap::parser::ValueSource::DefaultValue);
    let cli =
        <Cli as clap::FromArgMatches>::from_arg_matches(&matches).unwrap_or_else(|e| e.exit());

    if cli.print_schema {
        println!(
            "{}",
            serde_json::to_string_pretty(&config_schema()).expect("schema serializes")
        );
        return ExitCode::SUCCESS;
    }
    let Some(command) = &cli.command else {
        let _ = <Cli as clap::CommandFactory>::command().print_help();
        return ExitCode::from(2);
    };
    let result = match command {
        Command::GenCorpus(a) => cmd_gen(&cli, a),
        Command::Sample(a) => cmd_sample(&cli, a),
        Command::Train(a) => cmd_train(&cli, a),
        Command::Eval(a) => cmd_eval(&cli, a),
        Command::Probe(a) => cmd_probe(&cli, a),
        Command::ShapDiff(a) => cmd_shap(&cli, a),
        Command::Experiment => cmd_experiment(&cli, out_given),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_record(&e));
            ExitCode::from(1)
        }
    }
}
