//! Masked-LM pretraining.

use rand::Rng;

use super::TrainConfig;
use crate::data;
use crate::encoder::{Checkpoint, MlmTarget, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::optimizer::{AdamW, Schedule};
use crate::rng::{self, tag};
use crate::tokenizer::{TokenizedExample, Vocabulary, CLS_ID, MASK_ID, PAD_ID, SEP_ID, SPECIAL_TOKENS};

pub const MASK_PROBABILITY: f64 = 0.15;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PretrainReport {
    pub steps: usize,
    /// Training loss of every optimizer step.
    pub losses: Vec<f64>,
}

/// Picks masked-LM targets for one batch and applies the 80/10/10
/// replacement. The outcome depends only on `(seed, step)` and the batch.
///
/// Each example gets at least one target when it has any maskable position.
pub fn mask_batch(
    batch: &[TokenizedExample],
    vocab_size: usize,
    seed: u64,
    step: usize,
) -> (Vec<TokenizedExample>, Vec<MlmTarget>) {
    let mut rng = rng::stream(rng::derive_seed(rng::derive_seed(seed, tag::MLM_MASK), step as u64));
    let first_regular = SPECIAL_TOKENS.len();
    let mut out = batch.to_vec();
    let mut targets = Vec::new();
    for (b, ex) in out.iter_mut().enumerate() {
        let maskable: Vec<usize> = (0..ex.len())
            .filter(|&p| ex.attention_mask[p] == 1 && ![PAD_ID, CLS_ID, SEP_ID].contains(&ex.input_ids[p]))
            .collect();
        let mut chosen: Vec<usize> = maskable
            .iter()
            .copied()
            .filter(|_| rng.random::<f64>() < MASK_PROBABILITY)
            .collect();
        if chosen.is_empty() && !maskable.is_empty() {
            chosen.push(maskable[rng.random_range(0..maskable.len())]);
        }
        for p in chosen {
            targets.push((b, p, ex.input_ids[p]));
            let r = rng.random::<f64>();
            if r < 0.8 {
                ex.input_ids[p] = MASK_ID;
            } else if r < 0.9 && vocab_size > first_regular {
                ex.input_ids[p] = rng.random_range(first_regular..vocab_size);
            }
        }
    }
    (out, targets)
}

/// Mean masked-LM loss over `examples` with masks drawn from `seed`, in
/// evaluation mode.
pub fn mlm_eval_loss(model: &Model, examples: &[TokenizedExample], batch_size: usize, seed: u64) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, chunk) in examples.chunks(batch_size.max(1)).enumerate() {
        let (masked, targets) = mask_batch(chunk, model.config().vocab_size, seed, i);
        if targets.is_empty() {
            continue;
        }
        total += model.mlm_loss(&masked, &targets)? * targets.len() as f64;
        count += targets.len();
    }
    if count == 0 {
        return Err(Error::Input("no maskable tokens in the evaluation set".into()));
    }
    Ok(total / count as f64)
}

/// Trains a freshly initialized model on the masked-LM objective.
///
/// Runs `cfg.epochs` passes over `corpus`, stopping early after `max_steps`
/// optimizer steps when given.
pub fn pretrain_mlm<S: AsRef<str>>(
    config: ModelConfig,
    vocab: &Vocabulary,
    corpus: &[S],
    cfg: &TrainConfig,
    max_steps: Option<usize>,
) -> Result<(Checkpoint, PretrainReport)> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Input("pretraining corpus is empty".into()));
    }
    if config.vocab_size != vocab.len() {
        return Err(Error::Config(format!(
            "model vocabulary size {} does not match the tokenizer's {}",
            config.vocab_size,
            vocab.len()
        )));
    }
    if cfg.max_len > config.max_positions {
        return Err(Error::Config(format!(
            "max_len {} exceeds the model's {} positions",
            cfg.max_len, config.max_positions
        )));
    }
    let examples: Vec<TokenizedExample> = corpus
        .iter()
        .map(|s| vocab.encode(s.as_ref(), cfg.max_len))
        .collect::<Result<_>>()?;
    let vocab_size = config.vocab_size;
    let mut model = Model::init(config, cfg.seed)?;
    let per_epoch = data::steps_per_epoch(examples.len(), cfg.batch_size);
    let total = max_steps.map_or(cfg.epochs * per_epoch, |m| m.min(cfg.epochs * per_epoch));
    let schedule = Schedule::new(cfg.learning_rate, cfg.warmup_steps.min(total), total)?;
    let mut opt = AdamW::new(cfg.adamw());
    let dropout_seed = rng::derive_seed(cfg.seed, tag::DROPOUT);
    let mut report = PretrainReport::default();

    'epochs: for epoch in 0..cfg.epochs {
        let order = data::permute(
            &(0..examples.len()).collect::<Vec<_>>(),
            rng::derive_seed(cfg.seed, tag::EPOCH_ORDER + epoch as u64),
        );
        for chunk in order.chunks(cfg.batch_size) {
            if report.steps >= total {
                break 'epochs;
            }
            let batch: Vec<TokenizedExample> = chunk.iter().map(|&i| examples[i].clone()).collect();
            let (masked, targets) = mask_batch(&batch, vocab_size, cfg.seed, report.steps);
            if targets.is_empty() {
                continue;
            }
            let mut dropout = rng::stream(rng::derive_seed(dropout_seed, report.steps as u64));
            let loss = model.mlm_step(&masked, &targets, Some(&mut dropout))?;
            opt.step(&mut model, schedule.lr_at(report.steps))?;
            report.losses.push(loss);
            report.steps += 1;
        }
    }
    Ok((model.to_checkpoint(), report))
}
