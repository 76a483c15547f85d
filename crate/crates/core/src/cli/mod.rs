//! The `medseq` command line: one subcommand per pipeline stage.
//!
//! Settings come from an optional flat config file (`--config`, lines of
//! `section.key = value`), then `--set key=value`, then dedicated flags. Each
//! run writes the resolved settings next to its outputs.
//!
//! Exit codes: 0 success, 1 I/O or data error, 2 usage error, 3 numeric failure.

mod config;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

pub use config::{RunConfig, KNOWN_KEYS};

use crate::baselines::{boc_dataset, train_boc, BocConfig, BocForecaster, BocModel, Lstm, LstmConfig};
use crate::evalmetrics::{evaluate_with, EvalError, EvalReport, Forecaster, LmForecaster, ModelRow, ReportContext};
use crate::model::{Family, ModelConfig, ModelError, Transformer, Variant};
use crate::probe::{format_mcq, mcq_rank, saliency, McqCase, ProbeError, SaliencyMode, SaliencyTarget};
use crate::service::{serve, ServiceConfig, ServiceError};
use crate::synthcohort::{boc_ceiling, generate_cohort, GeneratorConfig, GeneratorModel, OracleForecaster, SynthError};
use crate::timeline::{
    prepare_corpus, read_records, read_split, read_timelines, read_vocab, split_cohort, write_records, write_split,
    write_timelines, write_vocab, Timeline, TimelineError, TimelineOptions, TokenKind, TokenLine, Vocab,
};
use crate::training::{train, Checkpoint, TrainConfig, TrainError};

pub const TIMELINES_FILE: &str = "timelines.jsonl";
pub const VOCAB_FILE: &str = "vocab.tsv";
pub const SPLIT_FILE: &str = "split.json";
pub const CONFIG_ECHO_FILE: &str = "resolved_config.txt";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.to_path_buf(), source }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 2,
            Self::Io { .. } | Self::Data(_) => 1,
            Self::Numeric(_) => 3,
        }
    }
}

impl From<TimelineError> for CliError {
    fn from(e: TimelineError) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::InvalidConfig(_) => Self::Usage(e.to_string()),
            _ => Self::Data(e.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Config(_) => Self::Usage(e.to_string()),
            ModelError::Numerics(_) => Self::Numeric(e.to_string()),
            _ => Self::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => Self::Usage(e.to_string()),
            TrainError::Diverged { .. } => Self::Numeric(e.to_string()),
            TrainError::Model(m) => m.into(),
            _ if e.is_numeric() => Self::Numeric(e.to_string()),
            _ => Self::Data(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<ProbeError> for CliError {
    fn from(e: ProbeError) -> Self {
        match e {
            ProbeError::Numerics(_) => Self::Numeric(e.to_string()),
            _ => Self::Data(e.to_string()),
        }
    }
}

impl From<crate::baselines::BaselineError> for CliError {
    fn from(e: crate::baselines::BaselineError) -> Self {
        match e {
            crate::baselines::BaselineError::Config(_) => Self::Usage(e.to_string()),
            crate::baselines::BaselineError::Numerics(_) => Self::Numeric(e.to_string()),
            _ => Self::Data(e.to_string()),
        }
    }
}

impl From<ServiceError> for CliError {
    fn from(e: ServiceError) -> Self {
        Self::Data(e.to_string())
    }
}

#[derive(Debug, Parser)]
#[command(name = "medseq", version, about = "Medical concept sequence forecasting")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Flat `section.key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one config key (`section.key=value`); repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct ModelFlags {
    /// transformer, lstm or boc.
    #[arg(long)]
    pub family: Option<String>,
    /// Transformer variant, e.g. `base`, `rotary`, `glu+rotary`.
    #[arg(long)]
    pub variant: Option<String>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long = "d-model")]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub wd: Option<f64>,
    #[arg(long = "batch-size")]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub warmup: Option<u64>,
    #[arg(long = "eval-every")]
    pub eval_every: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic cohort and its generator model.
    SynthGen {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        patients: Option<usize>,
        #[arg(long)]
        concepts: Option<usize>,
        #[arg(long)]
        order: Option<usize>,
        #[arg(long)]
        determinism: Option<f64>,
        /// Cohort JSON-lines file; the generator model is written beside it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Build timelines, vocabulary and split from patient records.
    BuildData {
        #[command(flatten)]
        common: Common,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long = "min-freq")]
        min_freq: Option<u64>,
        #[arg(long = "max-tokens")]
        max_tokens: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on the training split.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelFlags,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate checkpoints on a split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint directory; repeatable.
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        /// Generator model file; adds the oracle row and the order-blind ceiling.
        #[arg(long)]
        generator: Option<PathBuf>,
        /// Report JSON; `.txt` and `.csv` siblings are written too.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate a list of transformer variants.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelFlags,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated variants; defaults to the standard list.
        #[arg(long)]
        variants: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rank multiple-choice options for each case of a JSON-lines file.
    Probe {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        cases: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Gradient saliency of a forecast over its context tokens.
    Saliency {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated `AGE:49` / `CONCEPT:C001` tokens.
        #[arg(long)]
        tokens: String,
        /// Concept code; defaults to the most probable concept.
        #[arg(long)]
        target: Option<String>,
        /// Multiply gradients by the input embeddings.
        #[arg(long = "times-input")]
        times_input: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve the HTTP API over a transformer checkpoint.
    Serve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        bind: Option<String>,
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long = "static")]
        static_dir: Option<PathBuf>,
    },
}

/// Parses `argv` (including the program name) and runs; returns the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn base_config(common: &Common) -> Result<RunConfig, CliError> {
    let mut c = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    c.overrides(&common.set)?;
    Ok(c)
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// `cohort.jsonl` → `cohort.<suffix>`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}.{suffix}"))
}

fn execute(command: Command) -> Result<(), CliError> {
    match command {
        Command::SynthGen { common, seed, patients, concepts, order, determinism, out } => {
            let mut c = base_config(&common)?;
            c.flag("generator.seed", seed)?;
            c.flag("generator.patients", patients)?;
            c.flag("generator.concepts", concepts)?;
            c.flag("generator.order", order)?;
            c.flag("generator.determinism", determinism)?;
            let gen = generator_config(&mut c)?;
            let (records, model) = generate_cohort(&gen)?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                create_dir(dir)?;
            }
            write_records(&out, &records)?;
            let model_path = sibling(&out, "generator.json");
            model.save(&model_path)?;
            write_file(&sibling(&out, "config.txt"), &c.echo())?;
            println!("wrote {} patients to {} and the generator to {}", records.len(), out.display(), model_path.display());
            Ok(())
        }
        Command::BuildData { common, input, min_freq, max_tokens, seed, out } => {
            let mut c = base_config(&common)?;
            c.flag("data.min_frequency", min_freq)?;
            c.flag("data.max_tokens", max_tokens)?;
            c.flag("data.split_seed", seed)?;
            let min_frequency = c.get("data.min_frequency", 100u64)?;
            let defaults = TimelineOptions::default();
            let options = TimelineOptions {
                min_confirmations: c.get("data.min_confirmations", defaults.min_confirmations)?,
                max_tokens: c.get("data.max_tokens", defaults.max_tokens)?,
                min_tokens: c.get("data.min_tokens", defaults.min_tokens)?,
            };
            let split_seed = c.get("data.split_seed", 42u64)?;
            let records = read_records(&input)?;
            let (vocab, timelines) = prepare_corpus(&records, min_frequency, &options)?;
            let ids: Vec<String> = timelines.iter().map(|t| t.patient_id.clone()).collect();
            let split = split_cohort(&ids, split_seed)?;
            create_dir(&out)?;
            write_timelines(&out.join(TIMELINES_FILE), &timelines, &vocab)?;
            write_vocab(&out.join(VOCAB_FILE), &vocab)?;
            write_split(&out.join(SPLIT_FILE), &split)?;
            write_file(&out.join(CONFIG_ECHO_FILE), &c.echo())?;
            println!(
                "{} timelines ({} skipped), {} concepts; split {}/{}/{}",
                timelines.len(),
                records.len() - timelines.len(),
                vocab.n_concepts(),
                split.train.len(),
                split.validation.len(),
                split.test.len()
            );
            Ok(())
        }
        Command::Train { common, model, data, out } => {
            let mut c = base_config(&common)?;
            apply_model_flags(&mut c, &model)?;
            let ds = Dataset::load(&data)?;
            create_dir(&out)?;
            let trained = train_family(&mut c, &ds, Some(&out.join(TRAIN_LOG_FILE)))?;
            let dir = out.join(CHECKPOINT_DIR);
            trained.checkpoint.save(&dir)?;
            write_file(&out.join(CONFIG_ECHO_FILE), &c.echo())?;
            println!("{}: step {} selected, checkpoint at {}", trained.name, trained.checkpoint.manifest.step, dir.display());
            Ok(())
        }
        Command::Eval { common, data, checkpoints, generator, out } => {
            let mut c = base_config(&common)?;
            let ds = Dataset::load(&data)?;
            let (split_name, timelines) = eval_split(&mut c, &ds)?;
            let n_list = c.get_list("eval.n", &crate::evalmetrics::DEFAULT_N)?;
            let k_list = c.get_list("eval.k", &crate::evalmetrics::DEFAULT_K)?;
            let mut rows = Vec::new();
            let mut footer = String::new();
            if let Some(path) = &generator {
                let g = GeneratorModel::load(path)?;
                rows.push(evaluate_with(&OracleForecaster { model: &g, vocab: &ds.vocab }, timelines, &n_list, &k_list)?);
                if g.order == 2 {
                    let ceiling = boc_ceiling(&g, &ds.vocab, timelines)?;
                    footer = format!("order-blind P@1 ceiling {:.4} over {} points\n", ceiling.overall, ceiling.points);
                }
            }
            for path in &checkpoints {
                let ckpt = Checkpoint::load(path, Some(&ds.vocab.hash()))?;
                let loaded = Loaded::from_checkpoint(&ckpt)?;
                let mut row = evaluate_with(loaded.forecaster(&ds.vocab).as_ref(), timelines, &n_list, &k_list)?;
                row.model = run_name(path, &loaded);
                rows.push(row);
            }
            let report = EvalReport::new(ds.context(), rows)?;
            write_report(&report, &out, &footer)?;
            write_file(&sibling(&out, "config.txt"), &c.echo())?;
            print!("{}{footer}", report.to_text());
            println!("({split_name} split)");
            Ok(())
        }
        Command::Ablate { common, model, data, variants, out } => {
            let mut c = base_config(&common)?;
            apply_model_flags(&mut c, &model)?;
            c.set("model.family", "transformer")?;
            let ds = Dataset::load(&data)?;
            let (_, timelines) = eval_split(&mut c, &ds)?;
            let timelines = timelines.to_vec();
            let n_list = c.get_list("eval.n", &crate::evalmetrics::DEFAULT_N)?;
            let k_list = c.get_list("eval.k", &crate::evalmetrics::DEFAULT_K)?;
            let names: Vec<String> = match variants {
                Some(v) => v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect(),
                None => Variant::STANDARD.iter().map(|s| s.to_string()).collect(),
            };
            let mut rows = Vec::new();
            for name in &names {
                let variant = Variant::parse(name)?;
                c.set("model.variant", variant.key())?;
                let trained = train_family(&mut c, &ds, None)?;
                let loaded = Loaded::from_checkpoint(&trained.checkpoint)?;
                let mut row: ModelRow =
                    evaluate_with(loaded.forecaster(&ds.vocab).as_ref(), &timelines, &n_list, &k_list)?;
                row.model = variant.label();
                eprintln!("{}: P@1 {:.3}", row.model, row.precision.values().next().copied().unwrap_or(0.0));
                rows.push(row);
            }
            let report = EvalReport::new(ds.context(), rows)?;
            write_report(&report, &out, "")?;
            write_file(&sibling(&out, "config.txt"), &c.echo())?;
            print!("{}", report.to_text());
            Ok(())
        }
        Command::Probe { common, data, checkpoint, cases, out } => {
            let c = base_config(&common)?;
            let vocab = read_vocab(&data.join(VOCAB_FILE))?;
            let ckpt = Checkpoint::load(&checkpoint, Some(&vocab.hash()))?;
            let loaded = Loaded::from_checkpoint(&ckpt)?;
            let text = std::fs::read_to_string(&cases).map_err(|e| CliError::io(&cases, e))?;
            let mut lines = String::new();
            for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                let case: McqCase = serde_json::from_str(line)
                    .map_err(|e| CliError::Data(format!("{}:{}: {e}", cases.display(), n + 1)))?;
                let (history, options) = case.resolve(&vocab)?;
                let ranked = loaded.mcq(vocab.n_concepts(), &history, &options)?;
                let named: Vec<(String, f64)> = ranked.iter().map(|&(id, p)| (vocab.entry(id).value.clone(), p)).collect();
                println!("case {}:", n + 1);
                print!("{}", format_mcq(&named));
                let options: Vec<serde_json::Value> =
                    named.iter().map(|(code, p)| serde_json::json!({"concept": code, "probability": p})).collect();
                let mut row = serde_json::json!({"case": n + 1, "options": options});
                if let Some(label) = &case.label {
                    row["label"] = serde_json::json!(label);
                    row["correct"] = serde_json::json!(named.first().is_some_and(|(c, _)| c == label));
                }
                lines.push_str(&(row.to_string() + "\n"));
            }
            if let Some(path) = &out {
                write_file(path, &lines)?;
                write_file(&sibling(path, "config.txt"), &c.echo())?;
            }
            Ok(())
        }
        Command::Saliency { common, data, checkpoint, tokens, target, times_input, out } => {
            let c = base_config(&common)?;
            let vocab = read_vocab(&data.join(VOCAB_FILE))?;
            let ckpt = Checkpoint::load(&checkpoint, Some(&vocab.hash()))?;
            let model = Transformer::from_checkpoint(&ckpt, None)?;
            let lines = parse_token_list(&tokens)?;
            let ids = lines
                .iter()
                .map(|t| {
                    vocab.lookup(t.kind, &t.value).ok_or_else(|| CliError::Data(format!("unknown {} token {}", t.kind, t.value)))
                })
                .collect::<Result<Vec<_>, _>>()?;
            let target = match &target {
                Some(code) => SaliencyTarget::Concept(
                    vocab.concept_id(code).ok_or_else(|| CliError::Data(format!("unknown concept {code}")))?,
                ),
                None => SaliencyTarget::Argmax,
            };
            let mode = if times_input { SaliencyMode::GradientTimesInput } else { SaliencyMode::Gradient };
            let r = saliency(&model, vocab.n_concepts(), &ids, target, mode)?;
            let json = serde_json::json!({
                "tokens": lines,
                "weights": r.weights,
                "target": vocab.entry(r.target).value,
            });
            let text = serde_json::to_string_pretty(&json).expect("json serializes") + "\n";
            match &out {
                Some(path) => {
                    write_file(path, &text)?;
                    write_file(&sibling(path, "config.txt"), &c.echo())?;
                }
                None => print!("{text}"),
            }
            Ok(())
        }
        Command::Serve { common, data, checkpoint, bind, labels, static_dir } => {
            let mut c = base_config(&common)?;
            c.flag("serve.bind", bind)?;
            c.flag("serve.labels", labels.map(|p| p.display().to_string()))?;
            c.flag("serve.static_dir", static_dir.map(|p| p.display().to_string()))?;
            let mut config = ServiceConfig::new(checkpoint, data.join(VOCAB_FILE));
            config.bind = c.get("serve.bind", config.bind.clone())?;
            config.max_options = c.get("serve.max_options", config.max_options)?;
            config.max_context = c.get("serve.max_context", config.max_context)?;
            config.body_limit = c.get("serve.body_limit", config.body_limit)?;
            config.labels = c.get_opt("serve.labels").map(PathBuf::from);
            config.static_dir = c.get_opt("serve.static_dir").map(PathBuf::from);
            eprint!("{}", c.echo());
            let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::Data(e.to_string()))?;
            runtime.block_on(serve(config))?;
            Ok(())
        }
    }
}

/// `AGE:49,CONCEPT:C001` → token lines.
pub fn parse_token_list(text: &str) -> Result<Vec<TokenLine>, CliError> {
    text.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            let (kind, value) =
                s.trim().split_once(':').ok_or_else(|| CliError::Usage(format!("token {s:?} is not KIND:VALUE")))?;
            let kind: TokenKind = kind.parse().map_err(|_| CliError::Usage(format!("unknown token kind {kind}")))?;
            Ok(TokenLine { kind, value: value.to_string() })
        })
        .collect()
}

fn generator_config(c: &mut RunConfig) -> Result<GeneratorConfig, CliError> {
    let d = GeneratorConfig::default();
    Ok(GeneratorConfig {
        n_concepts: c.get("generator.concepts", d.n_concepts)?,
        n_patients: c.get("generator.patients", d.n_patients)?,
        seed: c.get("generator.seed", d.seed)?,
        order: c.get("generator.order", d.order)?,
        determinism: c.get("generator.determinism", d.determinism)?,
        age_start_range: (c.get("generator.age_start_min", d.age_start_range.0)?, c.get("generator.age_start_max", d.age_start_range.1)?),
        age_step_range: (c.get("generator.age_step_min", d.age_step_range.0)?, c.get("generator.age_step_max", d.age_step_range.1)?),
        concepts_per_patient: (
            c.get("generator.concepts_min", d.concepts_per_patient.0)?,
            c.get("generator.concepts_max", d.concepts_per_patient.1)?,
        ),
        n_groups: c.get("generator.groups", d.n_groups)?,
    })
}

fn apply_model_flags(c: &mut RunConfig, m: &ModelFlags) -> Result<(), CliError> {
    c.flag("model.family", m.family.clone())?;
    c.flag("model.variant", m.variant.clone())?;
    c.flag("model.layers", m.layers)?;
    c.flag("model.heads", m.heads)?;
    c.flag("model.d_model", m.d_model)?;
    c.flag("train.learning_rate", m.lr)?;
    c.flag("train.weight_decay", m.wd)?;
    c.flag("train.batch_size", m.batch_size)?;
    c.flag("train.max_steps", m.steps)?;
    c.flag("train.warmup_steps", m.warmup)?;
    c.flag("train.eval_every", m.eval_every)?;
    c.flag("train.seed", m.seed)
}

/// A built data directory.
pub struct Dataset {
    pub vocab: Vocab,
    pub timelines: Vec<Timeline>,
    pub split: crate::timeline::CohortSplit,
    pub train: Vec<Timeline>,
    pub validation: Vec<Timeline>,
    pub test: Vec<Timeline>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self, CliError> {
        let vocab = read_vocab(&dir.join(VOCAB_FILE))?;
        let timelines = read_timelines(&dir.join(TIMELINES_FILE), &vocab)?;
        let split = read_split(&dir.join(SPLIT_FILE))?;
        let p = split.partition(&timelines);
        Ok(Self { vocab, timelines, split, train: p.train, validation: p.validation, test: p.test })
    }

    fn context(&self) -> ReportContext {
        ReportContext { seed: self.split.seed, split_hash: self.split.hash(), vocab_hash: self.vocab.hash() }
    }
}

fn eval_split<'a>(c: &mut RunConfig, ds: &'a Dataset) -> Result<(String, &'a [Timeline]), CliError> {
    let name: String = c.get("eval.split", "test".to_string())?;
    let t = match name.as_str() {
        "test" => &ds.test,
        "validation" => &ds.validation,
        "train" => &ds.train,
        other => return Err(CliError::Usage(format!("unknown split {other}"))),
    };
    Ok((name, t))
}

struct Trained {
    name: String,
    checkpoint: Checkpoint,
}

fn train_config(c: &mut RunConfig) -> Result<TrainConfig, CliError> {
    let d = TrainConfig::default();
    Ok(TrainConfig {
        learning_rate: c.get("train.learning_rate", d.learning_rate)?,
        weight_decay: c.get("train.weight_decay", d.weight_decay)?,
        batch_size: c.get("train.batch_size", d.batch_size)?,
        warmup_steps: c.get("train.warmup_steps", d.warmup_steps)?,
        max_steps: c.get("train.max_steps", d.max_steps)?,
        seed: c.get("train.seed", d.seed)?,
        eval_every: c.get("train.eval_every", d.eval_every)?,
        grad_clip: c.get("train.grad_clip", d.grad_clip)?,
        precision: d.precision,
    })
}

fn train_family(c: &mut RunConfig, ds: &Dataset, log: Option<&Path>) -> Result<Trained, CliError> {
    let family: String = c.get("model.family", "transformer".to_string())?;
    let hash = ds.vocab.hash();
    let seqs = |ts: &[Timeline]| ts.iter().map(|t| t.ids()).collect::<Vec<_>>();
    if let Some(p) = log {
        if p.exists() {
            std::fs::remove_file(p).map_err(|e| CliError::io(p, e))?;
        }
    }
    match family.as_str() {
        "transformer" => {
            let variant = Variant::parse(&c.get("model.variant", "base".to_string())?)?;
            let mut base = ModelConfig::new(ds.vocab.len());
            base.n_layers = c.get("model.layers", base.n_layers)?;
            base.n_heads = c.get("model.heads", base.n_heads)?;
            base.d_model = c.get("model.d_model", base.d_model)?;
            base.d_ff = c.get("model.d_ff", 4 * base.d_model)?;
            base.max_seq = c.get("model.max_seq", base.max_seq)?;
            base.dropout = c.get("model.dropout", base.dropout)?;
            let embeddings = c.get_opt("model.embeddings");
            let config = variant.apply(&base, embeddings.as_deref())?;
            let seed = c.get("model.seed", 0u64)?;
            let tc = train_config(c)?;
            let (model, _) = Transformer::init(config, seed, Some(&ds.vocab))?;
            let out = train(model, &tc, &seqs(&ds.train), &seqs(&ds.validation), &hash, log)?;
            let checkpoint = out.best.to_checkpoint(Some(tc), out.best_step, Some(out.best_val_loss), &hash);
            Ok(Trained { name: variant.label(), checkpoint })
        }
        "lstm" => {
            let mut config = LstmConfig::new(ds.vocab.len());
            config.n_layers = c.get("model.layers", config.n_layers)?;
            let width = c.get("model.d_model", config.hidden_size)?;
            (config.embed_dim, config.hidden_size) = (width, width);
            config.max_seq = c.get("model.max_seq", config.max_seq)?;
            let seed = c.get("model.seed", 0u64)?;
            let tc = train_config(c)?;
            let model = Lstm::new_random(config, seed)?;
            let out = train(model, &tc, &seqs(&ds.train), &seqs(&ds.validation), &hash, log)?;
            let checkpoint = out.best.to_checkpoint(Some(tc), out.best_step, Some(out.best_val_loss), &hash);
            Ok(Trained { name: "LSTM".into(), checkpoint })
        }
        "boc" => {
            let d = BocConfig::default();
            let config = BocConfig {
                learning_rate: c.get("boc.learning_rate", d.learning_rate)?,
                weight_decay: c.get("boc.weight_decay", d.weight_decay)?,
                epochs: c.get("boc.epochs", d.epochs)?,
                batch_size: c.get("boc.batch_size", d.batch_size)?,
                seed: c.get("boc.seed", d.seed)?,
            };
            let (x, y) = boc_dataset(&ds.train, &ds.vocab);
            let model = train_boc(&x, &y, &config)?;
            Ok(Trained { name: "BoC linear".into(), checkpoint: model.to_checkpoint(&hash) })
        }
        other => Err(CliError::Usage(format!("unknown model family {other}"))),
    }
}

/// A checkpoint rebuilt as its model family.
pub enum Loaded {
    Transformer(Transformer),
    Lstm(Lstm),
    Boc(BocModel),
}

impl Loaded {
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self, CliError> {
        Ok(match ckpt.manifest.family {
            Family::Transformer => Self::Transformer(Transformer::from_checkpoint(ckpt, None)?),
            Family::Lstm => Self::Lstm(Lstm::from_checkpoint(ckpt)?),
            Family::Boc => Self::Boc(BocModel::from_checkpoint(ckpt)?),
        })
    }

    pub fn forecaster<'a>(&'a self, vocab: &'a Vocab) -> Box<dyn Forecaster + 'a> {
        let n = vocab.n_concepts();
        match self {
            Self::Transformer(m) => Box::new(LmForecaster::new(m, n, "Transformer")),
            Self::Lstm(m) => Box::new(LmForecaster::new(m, n, "LSTM")),
            Self::Boc(m) => Box::new(BocForecaster { model: m, vocab }),
        }
    }

    fn mcq(&self, n_concepts: usize, history: &[usize], options: &[usize]) -> Result<Vec<(usize, f64)>, CliError> {
        Ok(match self {
            Self::Transformer(m) => mcq_rank(m, n_concepts, history, options)?,
            Self::Lstm(m) => mcq_rank(m, n_concepts, history, options)?,
            Self::Boc(_) => return Err(CliError::Usage("MCQ ranking needs a language model checkpoint".into())),
        })
    }
}

/// Report row name: the run directory holding the checkpoint.
fn run_name(path: &Path, loaded: &Loaded) -> String {
    let dir = if path.file_name().is_some_and(|n| n == CHECKPOINT_DIR) { path.parent().unwrap_or(path) } else { path };
    let family = match loaded {
        Loaded::Transformer(_) => "transformer",
        Loaded::Lstm(_) => "lstm",
        Loaded::Boc(_) => "boc",
    };
    match dir.file_name() {
        Some(n) => format!("{} ({family})", n.to_string_lossy()),
        None => family.to_string(),
    }
}

fn write_report(report: &EvalReport, out: &Path, footer: &str) -> Result<(), CliError> {
    write_file(out, &report.to_json())?;
    write_file(&out.with_extension("txt"), &(report.to_text() + footer))?;
    write_file(&out.with_extension("csv"), &report.to_csv())
}
