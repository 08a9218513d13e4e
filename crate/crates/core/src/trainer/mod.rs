//! Fine-tuning loops: single-model training with head pruning and periodic
//! validation, k-candidate training with selection after the first epoch,
//! masked-LM pretraining and hyperparameter sweeps.

mod mlm;
mod runlog;
mod sweep;

use std::collections::BTreeSet;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use mlm::{mask_batch, mlm_eval_loss, pretrain_mlm, PretrainReport, MASK_PROBABILITY};
pub use runlog::{CandidateScore, LogEvent, ModelSummary, RunLog, ValidationEvent};
pub use sweep::{sweep, SweepField, SweepRow, SweepTable};

use crate::data::{self, LabeledSentence, SplitDataset};
use crate::encoder::{Checkpoint, Model};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::optimizer::{AdamW, AdamWConfig, Schedule};
use crate::rng::{self, tag};
use crate::tensor::{self, Tensor};
use crate::tokenizer::{TokenizedExample, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMetric {
    #[default]
    Accuracy,
    Mcc,
    F1,
    RocAuc,
}

impl SelectionMetric {
    pub fn of(self, r: &MetricsReport) -> f64 {
        match self {
            SelectionMetric::Accuracy => r.accuracy,
            SelectionMetric::Mcc => r.mcc,
            SelectionMetric::F1 => r.f1,
            SelectionMetric::RocAuc => r.roc_auc,
        }
    }
}

impl std::str::FromStr for SelectionMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "accuracy" => Ok(SelectionMetric::Accuracy),
            "mcc" => Ok(SelectionMetric::Mcc),
            "f1" => Ok(SelectionMetric::F1),
            "roc_auc" => Ok(SelectionMetric::RocAuc),
            other => Err(Error::Config(format!("unknown selection metric {other:?}"))),
        }
    }
}

/// What happens to the selected heads before fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PruneMode {
    /// Physically remove the heads.
    #[default]
    Remove,
    /// Keep the shapes, redraw the head weights.
    Reinit,
}

impl std::str::FromStr for PruneMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "remove" => Ok(PruneMode::Remove),
            "reinit" => Ok(PruneMode::Reinit),
            other => Err(Error::Config(format!("unknown prune mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub split_ratio: f64,
    pub validations_per_epoch: usize,
    pub prune_layer: usize,
    /// `None` prunes every head of `prune_layer`; an empty list prunes nothing.
    pub prune_heads: Option<Vec<usize>>,
    pub prune_mode: PruneMode,
    pub selection_metric: SelectionMetric,
    pub seed: u64,
    pub max_len: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub bias_correction: bool,
    pub max_grad_norm: Option<f64>,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 3,
            batch_size: 16,
            learning_rate: 2e-5,
            epsilon: 1e-8,
            weight_decay: 0.01,
            warmup_steps: 0,
            split_ratio: 0.8,
            validations_per_epoch: 10,
            prune_layer: 0,
            prune_heads: None,
            prune_mode: PruneMode::Remove,
            selection_metric: SelectionMetric::Accuracy,
            seed: 42,
            max_len: 64,
            beta1: 0.9,
            beta2: 0.999,
            bias_correction: true,
            max_grad_norm: None,
            eval_batch_size: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return bad("batch sizes must be at least 1".into());
        }
        if self.validations_per_epoch == 0 {
            return bad("validations_per_epoch must be at least 1".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad(format!("learning_rate {} is not a non-negative number", self.learning_rate));
        }
        if !(self.epsilon > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("epsilon must be positive and betas must lie in [0, 1)".into());
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay {} is negative", self.weight_decay));
        }
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return bad(format!("split_ratio {} must lie in (0, 1)", self.split_ratio));
        }
        if self.max_len < 2 {
            return bad(format!("max_len {} leaves no room for [CLS] and [SEP]", self.max_len));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.epsilon,
            weight_decay: self.weight_decay,
            bias_correction: self.bias_correction,
            max_grad_norm: self.max_grad_norm,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MultiTrainConfig {
    #[serde(flatten)]
    pub train: TrainConfig,
    pub k: usize,
    /// Train the first-epoch candidates on separate threads.
    pub parallel: bool,
}

impl Default for MultiTrainConfig {
    fn default() -> Self {
        MultiTrainConfig {
            train: TrainConfig::default(),
            k: 3,
            parallel: true,
        }
    }
}

impl MultiTrainConfig {
    /// Data-order seed of candidate `i`.
    pub fn model_seed(&self, i: usize) -> u64 {
        rng::derive_seed(self.train.seed, i as u64)
    }
}

/// 1-based steps within an epoch after which validation runs.
///
/// Events are spaced `⌈steps/n⌉` apart with the last forced onto the final
/// step. When that spacing would overrun the epoch, the events fall at
/// `⌈j·steps/n⌉` instead.
pub fn validation_steps(steps_per_epoch: usize, n_val: usize) -> Vec<usize> {
    if steps_per_epoch == 0 {
        return Vec::new();
    }
    let n = n_val.clamp(1, steps_per_epoch);
    let spacing = steps_per_epoch.div_ceil(n);
    if spacing * (n - 1) < steps_per_epoch {
        (1..n).map(|j| spacing * j).chain([steps_per_epoch]).collect()
    } else {
        (1..=n).map(|j| (j * steps_per_epoch).div_ceil(n)).collect()
    }
}

/// Tokenizes labeled records.
pub fn encode_all(vocab: &Vocabulary, records: &[LabeledSentence], max_len: usize) -> Result<Vec<TokenizedExample>> {
    records
        .iter()
        .map(|r| vocab.encode_labeled(&r.text, r.label, max_len))
        .collect()
}

/// Evaluation-mode logits for `examples`, computed in chunks.
pub fn logits(model: &Model, examples: &[TokenizedExample], batch_size: usize) -> Result<Tensor> {
    let c = model.config().num_labels;
    let mut data = Vec::with_capacity(examples.len() * c);
    for chunk in examples.chunks(batch_size.max(1)) {
        data.extend(model.forward(chunk)?.into_data());
    }
    Tensor::new(vec![examples.len(), c], data)
}

/// Scores `model` on labeled examples. Ties in the argmax go to the lower class.
pub fn evaluate(model: &Model, examples: &[TokenizedExample], batch_size: usize) -> Result<MetricsReport> {
    if examples.is_empty() {
        return Err(Error::Input("validation set is empty".into()));
    }
    let labels: Vec<usize> = examples
        .iter()
        .map(|ex| ex.label.ok_or_else(|| Error::Input("evaluation example without a label".into())))
        .collect::<Result<_>>()?;
    let logits = logits(model, examples, batch_size)?;
    let loss = tensor::cross_entropy(&logits, &labels)?;
    let probs = logits.softmax_rows()?;
    let c = model.config().num_labels;
    let mut preds = Vec::with_capacity(labels.len());
    let mut scores = Vec::with_capacity(labels.len());
    for row in probs.data().chunks_exact(c) {
        let mut best = 0;
        for (j, &p) in row.iter().enumerate() {
            if p > row[best] {
                best = j;
            }
        }
        preds.push(best);
        scores.push(row.get(1).copied().unwrap_or(0.0));
    }
    MetricsReport::evaluate(&preds, &scores, &labels, loss)
}

/// Applies the configured pruning to a copy of `start`.
pub fn prepare_model(start: &Checkpoint, cfg: &TrainConfig) -> Result<Model> {
    let mut model = Model::from_checkpoint(start.clone())?;
    let heads: BTreeSet<usize> = match &cfg.prune_heads {
        Some(list) => list.iter().copied().collect(),
        None => {
            if cfg.prune_layer >= model.config().num_layers {
                return Err(Error::Config(format!(
                    "prune_layer {} out of range for {} layers",
                    cfg.prune_layer,
                    model.config().num_layers
                )));
            }
            model.kept_heads(cfg.prune_layer).into_iter().collect()
        }
    };
    if heads.is_empty() {
        return Ok(model);
    }
    match cfg.prune_mode {
        PruneMode::Remove => model.prune_heads(cfg.prune_layer, &heads)?,
        PruneMode::Reinit => {
            model.reinit_heads(cfg.prune_layer, &heads, rng::derive_seed(cfg.seed, tag::REINIT))?
        }
    }
    Ok(model)
}

struct Best {
    value: f64,
    epoch: usize,
    step: usize,
    model: Model,
}

struct Candidate {
    id: usize,
    seed: u64,
    model: Model,
    opt: AdamW,
    step: usize,
    epochs_trained: usize,
    events: Vec<ValidationEvent>,
    best: Option<Best>,
    seconds: f64,
}

struct Plan<'a> {
    train: &'a [TokenizedExample],
    validation: &'a [TokenizedExample],
    cfg: &'a TrainConfig,
    schedule: Schedule,
    checkpoints: Vec<usize>,
}

impl Candidate {
    fn new(id: usize, seed: u64, model: Model, cfg: &TrainConfig) -> Self {
        Candidate {
            id,
            seed,
            model,
            opt: AdamW::new(cfg.adamw()),
            step: 0,
            epochs_trained: 0,
            events: Vec::new(),
            best: None,
            seconds: 0.0,
        }
    }

    fn order_seed(&self, epoch: usize) -> u64 {
        if epoch == 0 {
            self.seed
        } else {
            rng::derive_seed(self.seed, tag::EPOCH_ORDER + epoch as u64)
        }
    }

    fn run_epoch(&mut self, epoch: usize, plan: &Plan) -> Result<()> {
        let started = Instant::now();
        let order = data::permute(&(0..plan.train.len()).collect::<Vec<_>>(), self.order_seed(epoch));
        let dropout_seed = rng::derive_seed(self.seed, tag::DROPOUT);
        let mut loss_sum = 0.0;
        let mut loss_count = 0usize;
        for (i, chunk) in order.chunks(plan.cfg.batch_size).enumerate() {
            let batch: Vec<TokenizedExample> = chunk.iter().map(|&j| plan.train[j].clone()).collect();
            let mut dropout = rng::stream(rng::derive_seed(dropout_seed, self.step as u64));
            loss_sum += self.model.classification_step(&batch, Some(&mut dropout))?;
            loss_count += 1;
            self.opt.step(&mut self.model, plan.schedule.lr_at(self.step))?;
            self.step += 1;
            if plan.checkpoints.contains(&(i + 1)) {
                let metrics = evaluate(&self.model, plan.validation, plan.cfg.eval_batch_size)?;
                let value = plan.cfg.selection_metric.of(&metrics);
                if self.best.as_ref().is_none_or(|b| value > b.value) {
                    self.best = Some(Best {
                        value,
                        epoch,
                        step: self.step,
                        model: self.model.clone(),
                    });
                }
                self.events.push(ValidationEvent {
                    model_id: self.id,
                    epoch,
                    step: self.step,
                    epoch_step: i + 1,
                    train_loss: loss_sum / loss_count as f64,
                    metrics,
                });
                loss_sum = 0.0;
                loss_count = 0;
            }
        }
        self.epochs_trained += 1;
        self.seconds += started.elapsed().as_secs_f64();
        Ok(())
    }

    fn summary(&self, selected: bool) -> ModelSummary {
        ModelSummary {
            model_id: self.id,
            seed: self.seed,
            optimizer_steps: self.step,
            epochs_trained: self.epochs_trained,
            selected,
        }
    }
}

/// Everything a multi-model run produced, including the candidates' weights.
#[derive(Debug, Clone)]
pub struct MultiOutcome {
    /// The chosen model restored to its best validation point.
    pub checkpoint: Checkpoint,
    pub log: RunLog,
    pub chosen: usize,
    /// Each candidate's weights right after the first epoch.
    pub at_selection: Vec<Checkpoint>,
    /// Each candidate's weights when the run ended, before any restore.
    pub final_states: Vec<Checkpoint>,
}

fn check_inputs(vocab: &Vocabulary, start: &Checkpoint, data: &SplitDataset, cfg: &TrainConfig) -> Result<()> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    if data.validation.is_empty() {
        return Err(Error::Input("validation set is empty".into()));
    }
    if start.config.vocab_size != vocab.len() {
        return Err(Error::Config(format!(
            "checkpoint vocabulary size {} does not match the tokenizer's {}",
            start.config.vocab_size,
            vocab.len()
        )));
    }
    if cfg.max_len > start.config.max_positions {
        return Err(Error::Config(format!(
            "max_len {} exceeds the model's {} positions",
            cfg.max_len, start.config.max_positions
        )));
    }
    Ok(())
}

fn run(
    start: &Checkpoint,
    vocab: &Vocabulary,
    data: &SplitDataset,
    cfg: &TrainConfig,
    seeds: &[u64],
    parallel: bool,
    record_selection: bool,
) -> Result<MultiOutcome> {
    check_inputs(vocab, start, data, cfg)?;
    let started = Instant::now();
    let train = encode_all(vocab, &data.train, cfg.max_len)?;
    let validation = encode_all(vocab, &data.validation, cfg.max_len)?;
    let steps = data::steps_per_epoch(train.len(), cfg.batch_size);
    let plan = Plan {
        train: &train,
        validation: &validation,
        cfg,
        schedule: Schedule::new(cfg.learning_rate, cfg.warmup_steps, cfg.epochs * steps)?,
        checkpoints: validation_steps(steps, cfg.validations_per_epoch),
    };
    let base = prepare_model(start, cfg)?;
    let mut candidates: Vec<Candidate> = seeds
        .iter()
        .enumerate()
        .map(|(i, &s)| Candidate::new(i, s, base.clone(), cfg))
        .collect();

    if parallel && candidates.len() > 1 {
        std::thread::scope(|scope| {
            let handles: Vec<_> = candidates
                .iter_mut()
                .map(|c| scope.spawn(|| c.run_epoch(0, &plan)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|p| std::panic::resume_unwind(p)))
                .collect::<Result<Vec<()>>>()
        })?;
    } else {
        for c in &mut candidates {
            c.run_epoch(0, &plan)?;
        }
    }

    let epoch0: Vec<MetricsReport> = candidates
        .iter()
        .map(|c| c.events.last().expect("an epoch always ends with a validation").metrics)
        .collect();
    let chosen = select(&epoch0, cfg.selection_metric);
    let at_selection: Vec<Checkpoint> = candidates.iter().map(|c| c.model.to_checkpoint()).collect();

    for epoch in 1..cfg.epochs {
        candidates[chosen].run_epoch(epoch, &plan)?;
    }

    let final_states: Vec<Checkpoint> = candidates.iter().map(|c| c.model.to_checkpoint()).collect();
    let winner = &candidates[chosen];
    let best = winner.best.as_ref().expect("at least one validation ran");
    let final_metrics = evaluate(&best.model, &validation, cfg.eval_batch_size)?;

    let mut events = Vec::new();
    for c in &candidates {
        events.extend(c.events.iter().cloned().map(LogEvent::Validation));
    }
    if record_selection {
        events.push(LogEvent::Selection {
            epoch: 0,
            metric: cfg.selection_metric,
            chosen,
            candidates: epoch0
                .iter()
                .enumerate()
                .map(|(model_id, m)| CandidateScore { model_id, metrics: *m })
                .collect(),
        });
    }
    for c in &candidates {
        events.push(LogEvent::Model(c.summary(c.id == chosen)));
    }
    events.push(LogEvent::Final {
        model_id: chosen,
        best_epoch: best.epoch,
        best_step: best.step,
        metrics: final_metrics,
    });
    for c in &candidates {
        events.push(LogEvent::Timing {
            model_id: Some(c.id),
            phase: "train".into(),
            seconds: c.seconds,
        });
    }
    events.push(LogEvent::Timing {
        model_id: None,
        phase: "total".into(),
        seconds: started.elapsed().as_secs_f64(),
    });

    Ok(MultiOutcome {
        checkpoint: best.model.to_checkpoint(),
        log: RunLog { events },
        chosen,
        at_selection,
        final_states,
    })
}

/// Index of the best report: highest metric, then highest MCC, then lowest
/// index.
pub fn select(reports: &[MetricsReport], metric: SelectionMetric) -> usize {
    let mut chosen = 0;
    for (i, r) in reports.iter().enumerate().skip(1) {
        let (v, best) = (metric.of(r), metric.of(&reports[chosen]));
        if v > best || (v == best && r.mcc > reports[chosen].mcc) {
            chosen = i;
        }
    }
    chosen
}

/// Prunes once, trains for `cfg.epochs`, validates on schedule and returns
/// the best checkpoint seen.
pub fn finetune_single(
    start: &Checkpoint,
    vocab: &Vocabulary,
    data: &SplitDataset,
    cfg: &TrainConfig,
) -> Result<(Checkpoint, RunLog)> {
    let out = run(start, vocab, data, cfg, &[cfg.seed], false, false)?;
    Ok((out.checkpoint, out.log))
}

/// Trains `k` identical copies for one epoch on differently ordered data,
/// keeps the best and continues only that one.
pub fn finetune_multi(
    start: &Checkpoint,
    vocab: &Vocabulary,
    data: &SplitDataset,
    cfg: &MultiTrainConfig,
) -> Result<(Checkpoint, RunLog)> {
    let out = finetune_multi_detailed(start, vocab, data, cfg)?;
    Ok((out.checkpoint, out.log))
}

pub fn finetune_multi_detailed(
    start: &Checkpoint,
    vocab: &Vocabulary,
    data: &SplitDataset,
    cfg: &MultiTrainConfig,
) -> Result<MultiOutcome> {
    if cfg.k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    let seeds: Vec<u64> = (0..cfg.k).map(|i| cfg.model_seed(i)).collect();
    run(start, vocab, data, &cfg.train, &seeds, cfg.parallel, true)
}
