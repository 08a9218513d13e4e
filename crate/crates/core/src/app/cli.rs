//! Command-line front end.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use super::knowledge::{ingest_and_classify, KnowledgeBase, LabelNames, Query};
use crate::data::{self, InputFormat, LabeledSentence, SplitDataset};
use crate::encoder::{Checkpoint, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tokenizer::Vocabulary;
use crate::trainer::{self, MultiTrainConfig, PruneMode, RunLog, SelectionMetric, SweepField};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "mmtl", version, about = "Train, evaluate and apply small BERT-style sentence classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a WordPiece vocabulary from a corpus.
    BuildVocab(BuildVocabArgs),
    /// Masked-LM pretraining of a fresh encoder.
    Pretrain(PretrainArgs),
    /// Prune, fine-tune one model and keep its best validation checkpoint.
    Finetune(FinetuneArgs),
    /// Fine-tune k candidates for one epoch, then continue the best.
    Multitrain(FinetuneArgs),
    /// Print the metrics of a checkpoint on a labeled file as JSON.
    Evaluate(EvaluateArgs),
    /// Fine-tune once per value of one hyperparameter and print a TSV table.
    Sweep(SweepArgs),
    /// Classify a file and append the results to a knowledgebase.
    Ingest(IngestArgs),
    /// Print knowledgebase records as JSON lines, newest first.
    Query(QueryArgs),
    /// Print the final metrics of a run log as JSON.
    ExportReport(ExportArgs),
}

#[derive(Args, Debug)]
struct BuildVocabArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// cola, simple or text
    #[arg(long, default_value = "text")]
    format: InputFormat,
    #[arg(long, default_value_t = 8000)]
    max_size: usize,
    #[arg(long)]
    out: PathBuf,
}

/// Training hyperparameters. Flags override values from `--config`.
#[derive(Args, Debug, Default)]
struct TrainFlags {
    /// Flat JSON file with training settings.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    warmup_steps: Option<usize>,
    #[arg(long)]
    split_ratio: Option<f64>,
    #[arg(long)]
    validations_per_epoch: Option<usize>,
    #[arg(long)]
    prune_layer: Option<usize>,
    /// Comma-separated head indices; default is every head of the layer.
    #[arg(long, value_delimiter = ',')]
    prune_heads: Option<Vec<usize>>,
    /// Keep every head.
    #[arg(long, conflicts_with = "prune_heads")]
    no_prune: bool,
    /// remove or reinit
    #[arg(long)]
    prune_mode: Option<PruneMode>,
    /// accuracy, mcc, f1 or roc_auc
    #[arg(long)]
    selection_metric: Option<SelectionMetric>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    max_len: Option<usize>,
    /// Number of candidate models.
    #[arg(long)]
    k: Option<usize>,
    /// Train the candidates one after another instead of on threads.
    #[arg(long)]
    sequential: bool,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value = "text")]
    format: InputFormat,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2)]
    layers: usize,
    #[arg(long, default_value_t = 64)]
    hidden: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 128)]
    ff: usize,
    #[arg(long, default_value_t = 64)]
    max_positions: usize,
    #[arg(long, default_value_t = 0.1)]
    dropout: f64,
    /// Stop after this many optimizer steps.
    #[arg(long)]
    max_steps: Option<usize>,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args, Debug)]
struct DataArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Labeled training data, split into train and validation.
    #[arg(long)]
    data: PathBuf,
    /// Use this file for validation instead of splitting `--data`.
    #[arg(long)]
    validation: Option<PathBuf>,
    #[arg(long, default_value = "cola")]
    format: InputFormat,
}

#[derive(Args, Debug)]
struct FinetuneArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    out: PathBuf,
    /// Write the run log (JSON lines) here.
    #[arg(long)]
    log: Option<PathBuf>,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "cola")]
    format: InputFormat,
    #[arg(long)]
    max_len: Option<usize>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[command(flatten)]
    data: DataArgs,
    /// batch_size, epochs, learning_rate, n_val or pruning
    #[arg(long)]
    vary: SweepField,
    /// Comma-separated cell values.
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<String>,
    /// Use candidate selection in every cell.
    #[arg(long)]
    multi: bool,
    /// Write the TSV here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args, Debug)]
struct IngestArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "text")]
    format: InputFormat,
    #[arg(long)]
    store: PathBuf,
    /// Label names as `0=name,1=name`.
    #[arg(long)]
    label_names: Option<String>,
    #[arg(long)]
    max_len: Option<usize>,
}

#[derive(Args, Debug)]
struct QueryArgs {
    #[arg(long)]
    store: PathBuf,
    #[arg(long)]
    label: Option<usize>,
    #[arg(long)]
    keyword: Option<String>,
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args, Debug)]
struct ExportArgs {
    /// Run log written by finetune or multitrain.
    #[arg(long)]
    log: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Keys accepted in a `--config` file.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    epochs: Option<usize>,
    batch_size: Option<usize>,
    learning_rate: Option<f64>,
    epsilon: Option<f64>,
    weight_decay: Option<f64>,
    warmup_steps: Option<usize>,
    split_ratio: Option<f64>,
    validations_per_epoch: Option<usize>,
    prune_layer: Option<usize>,
    prune_heads: Option<Vec<usize>>,
    prune_mode: Option<PruneMode>,
    selection_metric: Option<SelectionMetric>,
    k: Option<usize>,
    seed: Option<u64>,
    max_len: Option<usize>,
    parallel: Option<bool>,
    eval_batch_size: Option<usize>,
    beta1: Option<f64>,
    beta2: Option<f64>,
    bias_correction: Option<bool>,
    max_grad_norm: Option<f64>,
}

macro_rules! set {
    ($dst:expr, $src:expr) => {
        if let Some(v) = $src {
            $dst = v;
        }
    };
}

impl TrainFlags {
    fn resolve(&self) -> Result<MultiTrainConfig> {
        let mut cfg = MultiTrainConfig::default();
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let file: FileConfig = serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
            let t = &mut cfg.train;
            set!(t.epochs, file.epochs);
            set!(t.batch_size, file.batch_size);
            set!(t.learning_rate, file.learning_rate);
            set!(t.epsilon, file.epsilon);
            set!(t.weight_decay, file.weight_decay);
            set!(t.warmup_steps, file.warmup_steps);
            set!(t.split_ratio, file.split_ratio);
            set!(t.validations_per_epoch, file.validations_per_epoch);
            set!(t.prune_layer, file.prune_layer);
            set!(t.prune_mode, file.prune_mode);
            set!(t.selection_metric, file.selection_metric);
            set!(t.seed, file.seed);
            set!(t.max_len, file.max_len);
            set!(t.eval_batch_size, file.eval_batch_size);
            set!(t.beta1, file.beta1);
            set!(t.beta2, file.beta2);
            set!(t.bias_correction, file.bias_correction);
            if file.prune_heads.is_some() {
                t.prune_heads = file.prune_heads;
            }
            if file.max_grad_norm.is_some() {
                t.max_grad_norm = file.max_grad_norm;
            }
            set!(cfg.k, file.k);
            set!(cfg.parallel, file.parallel);
        }
        let t = &mut cfg.train;
        set!(t.epochs, self.epochs);
        set!(t.batch_size, self.batch_size);
        set!(t.learning_rate, self.learning_rate);
        set!(t.epsilon, self.epsilon);
        set!(t.weight_decay, self.weight_decay);
        set!(t.warmup_steps, self.warmup_steps);
        set!(t.split_ratio, self.split_ratio);
        set!(t.validations_per_epoch, self.validations_per_epoch);
        set!(t.prune_layer, self.prune_layer);
        set!(t.prune_mode, self.prune_mode);
        set!(t.selection_metric, self.selection_metric);
        set!(t.seed, self.seed);
        set!(t.max_len, self.max_len);
        if self.prune_heads.is_some() {
            t.prune_heads = self.prune_heads.clone();
        }
        if self.no_prune {
            t.prune_heads = Some(Vec::new());
        }
        set!(cfg.k, self.k);
        if self.sequential {
            cfg.parallel = false;
        }
        cfg.train.validate()?;
        if cfg.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        Ok(cfg)
    }
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn load_split(args: &DataArgs, cfg: &MultiTrainConfig) -> Result<SplitDataset> {
    let records = data::load_records(&args.data, args.format)?;
    match &args.validation {
        Some(path) => Ok(SplitDataset {
            train: records,
            validation: data::load_records(path, args.format)?,
            split_seed: cfg.train.seed,
        }),
        None => data::split(&records, cfg.train.split_ratio, cfg.train.seed),
    }
}

fn default_max_len(config: &ModelConfig, flag: Option<usize>) -> usize {
    flag.unwrap_or(64).min(config.max_positions)
}

fn texts(records: &[LabeledSentence]) -> Vec<&str> {
    records.iter().map(|r| r.text.as_str()).collect()
}

fn execute(command: Command, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let io = |e: std::io::Error| Error::io("<stdout>", e);
    match command {
        Command::BuildVocab(a) => {
            let records = data::load_records(&a.corpus, a.format)?;
            let vocab = Vocabulary::build(&texts(&records), a.max_size)?;
            vocab.save(&a.out)?;
            writeln!(out, "{} tokens", vocab.len()).map_err(io)?;
        }
        Command::Pretrain(a) => {
            let cfg = a.train.resolve()?;
            let vocab = Vocabulary::load(&a.vocab)?;
            let records = data::load_records(&a.corpus, a.format)?;
            let config = ModelConfig {
                num_layers: a.layers,
                hidden_size: a.hidden,
                num_heads: a.heads,
                ff_size: a.ff,
                vocab_size: vocab.len(),
                max_positions: a.max_positions,
                dropout: a.dropout,
                ..ModelConfig::mini(vocab.len())
            };
            let (ckpt, report) = trainer::pretrain_mlm(config, &vocab, &texts(&records), &cfg.train, a.max_steps)?;
            ckpt.save(&a.out)?;
            let last = report.losses.last().copied().unwrap_or(f64::NAN);
            writeln!(out, "{} steps, final loss {last:.6}", report.steps).map_err(io)?;
        }
        Command::Finetune(a) => finetune(a, false, out)?,
        Command::Multitrain(a) => finetune(a, true, out)?,
        Command::Evaluate(a) => {
            let model = Model::load(&a.checkpoint)?;
            let vocab = Vocabulary::load(&a.vocab)?;
            let records = data::load_records(&a.data, a.format)?;
            let examples = trainer::encode_all(&vocab, &records, default_max_len(model.config(), a.max_len))?;
            let report = trainer::evaluate(&model, &examples, 64)?;
            writeln!(out, "{}", report.to_json()).map_err(io)?;
        }
        Command::Sweep(a) => {
            let cfg = a.train.resolve()?;
            let start = Checkpoint::load(&a.data.checkpoint)?;
            let vocab = Vocabulary::load(&a.data.vocab)?;
            let split = load_split(&a.data, &cfg)?;
            let table = trainer::sweep(&start, &vocab, &split, a.vary, &a.values, &cfg, a.multi)?;
            match &a.out {
                Some(path) => write_file(path, &table.to_tsv())?,
                None => write!(out, "{}", table.to_tsv()).map_err(io)?,
            }
        }
        Command::Ingest(a) => {
            let model = Model::load(&a.checkpoint)?;
            let vocab = Vocabulary::load(&a.vocab)?;
            let labels = match &a.label_names {
                Some(names) => LabelNames::parse(names)?,
                None => LabelNames::default(),
            };
            let store = KnowledgeBase::open(&a.store);
            let max_len = default_max_len(model.config(), a.max_len);
            let report = ingest_and_classify(&model, &vocab, &a.input, a.format, &store, &labels, max_len)?;
            for e in &report.errors {
                let _ = writeln!(err, "{}:{}: {}", a.input.display(), e.line, e.message);
            }
            writeln!(out, "stored {} records", report.stored.len()).map_err(io)?;
        }
        Command::Query(a) => {
            let store = KnowledgeBase::open(&a.store);
            let q = Query {
                label: a.label,
                keyword: a.keyword,
                limit: a.limit,
            };
            for r in store.query(&q)? {
                writeln!(out, "{}", serde_json::to_string(&r)?).map_err(io)?;
            }
        }
        Command::ExportReport(a) => {
            let text = fs::read_to_string(&a.log).map_err(|e| Error::io(&a.log, e))?;
            let log = RunLog::from_jsonl(&text)?;
            let (_, report) = log
                .final_report()
                .ok_or_else(|| Error::Input(format!("{} has no final report", a.log.display())))?;
            match &a.out {
                Some(path) => write_file(path, &format!("{}\n", report.to_json()))?,
                None => writeln!(out, "{}", report.to_json()).map_err(io)?,
            }
        }
    }
    Ok(())
}

fn finetune(a: FinetuneArgs, multi: bool, out: &mut dyn Write) -> Result<()> {
    let mut cfg = a.train.resolve()?;
    let start = Checkpoint::load(&a.data.checkpoint)?;
    let vocab = Vocabulary::load(&a.data.vocab)?;
    cfg.train.max_len = cfg.train.max_len.min(start.config.max_positions);
    let split = load_split(&a.data, &cfg)?;
    let (ckpt, log) = if multi {
        trainer::finetune_multi(&start, &vocab, &split, &cfg)?
    } else {
        trainer::finetune_single(&start, &vocab, &split, &cfg.train)?
    };
    ckpt.save(&a.out)?;
    if let Some(path) = &a.log {
        write_file(path, &log.to_jsonl(true))?;
    }
    let (_, report) = log.final_report().expect("every run ends with a final report");
    writeln!(out, "{}", report.to_json()).map_err(|e| Error::io("<stdout>", e))
}

/// Parses `argv` (program name first), runs the command and returns the
/// process exit code: 0 on success, 1 on a usage or configuration error and
/// 2 on any other failure.
pub fn run<I, T>(argv: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let informational = matches!(
                e.kind(),
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
            );
            let rendered = e.render().to_string();
            if informational {
                let _ = write!(out, "{rendered}");
                return EXIT_OK;
            }
            let _ = write!(err, "{rendered}");
            return EXIT_USAGE;
        }
    };
    match execute(cli.command, out, err) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            match e {
                Error::Config(_) => EXIT_USAGE,
                _ => EXIT_RUNTIME,
            }
        }
    }
}
