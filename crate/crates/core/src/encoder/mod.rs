//! Mini BERT-style sequence classifier.
//!
//! Weights live in a name-keyed map whose shapes are a pure function of the
//! [`ModelConfig`] and the set of pruned heads (see [`expected_shapes`]).
//! Layer norms use population variance, the feed-forward activation is the
//! exact erf GELU, and the masked-LM head reuses the word embedding matrix.

mod checkpoint;

pub use checkpoint::{Checkpoint, FORMAT_VERSION};

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, StreamRng};
use crate::tensor::{AttentionGeometry, Gradients, Tape, Tensor, Var};
use crate::tokenizer::TokenizedExample;

pub type PrunedHeads = BTreeMap<usize, BTreeSet<usize>>;

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_size: usize,
    pub num_heads: usize,
    pub ff_size: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    #[serde(default = "default_type_vocab")]
    pub type_vocab_size: usize,
    #[serde(default = "default_labels")]
    pub num_labels: usize,
    #[serde(default = "default_eps")]
    pub layer_norm_eps: f64,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
}

fn default_type_vocab() -> usize {
    2
}
fn default_labels() -> usize {
    2
}
fn default_eps() -> f64 {
    1e-12
}
fn default_dropout() -> f64 {
    0.1
}

impl ModelConfig {
    /// Small default architecture: 2 layers, 64 hidden, 4 heads.
    pub fn mini(vocab_size: usize) -> Self {
        ModelConfig {
            num_layers: 2,
            hidden_size: 64,
            num_heads: 4,
            ff_size: 128,
            vocab_size,
            max_positions: 64,
            type_vocab_size: 2,
            num_labels: 2,
            layer_norm_eps: 1e-12,
            dropout: 0.1,
        }
    }

    pub fn head_size(&self) -> usize {
        self.hidden_size / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("num_layers", self.num_layers),
            ("hidden_size", self.hidden_size),
            ("num_heads", self.num_heads),
            ("ff_size", self.ff_size),
            ("vocab_size", self.vocab_size),
            ("max_positions", self.max_positions),
            ("type_vocab_size", self.type_vocab_size),
            ("num_labels", self.num_labels),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !self.hidden_size.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "hidden_size {} is not divisible by num_heads {}",
                self.hidden_size, self.num_heads
            )));
        }
        if self.hidden_size < 2 {
            return Err(Error::Config("hidden_size must be at least 2 for layer norm".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.layer_norm_eps >= 0.0 && self.layer_norm_eps.is_finite()) {
            return Err(Error::Config("layer_norm_eps must be finite and non-negative".into()));
        }
        Ok(())
    }
}

fn layer_key(layer: usize, rest: &str) -> String {
    format!("layers.{layer}.{rest}")
}

/// Heads of `layer` still present, as original head indices.
pub fn kept_heads(config: &ModelConfig, pruned: &PrunedHeads, layer: usize) -> Vec<usize> {
    let gone = pruned.get(&layer);
    (0..config.num_heads)
        .filter(|h| gone.is_none_or(|g| !g.contains(h)))
        .collect()
}

/// Every weight name with its shape for a given architecture and pruning.
pub fn expected_shapes(config: &ModelConfig, pruned: &PrunedHeads) -> BTreeMap<String, Vec<usize>> {
    let h = config.hidden_size;
    let mut s = BTreeMap::new();
    s.insert("embeddings.word_embeddings".into(), vec![config.vocab_size, h]);
    s.insert("embeddings.position_embeddings".into(), vec![config.max_positions, h]);
    s.insert("embeddings.token_type_embeddings".into(), vec![config.type_vocab_size, h]);
    s.insert("embeddings.layer_norm.gamma".into(), vec![h]);
    s.insert("embeddings.layer_norm.beta".into(), vec![h]);
    for l in 0..config.num_layers {
        let width = kept_heads(config, pruned, l).len() * config.head_size();
        if width > 0 {
            for proj in ["query", "key", "value"] {
                s.insert(layer_key(l, &format!("attention.{proj}.weight")), vec![width, h]);
                s.insert(layer_key(l, &format!("attention.{proj}.bias")), vec![width]);
            }
            s.insert(layer_key(l, "attention.output.weight"), vec![h, width]);
        }
        s.insert(layer_key(l, "attention.output.bias"), vec![h]);
        s.insert(layer_key(l, "attention.layer_norm.gamma"), vec![h]);
        s.insert(layer_key(l, "attention.layer_norm.beta"), vec![h]);
        s.insert(layer_key(l, "intermediate.weight"), vec![config.ff_size, h]);
        s.insert(layer_key(l, "intermediate.bias"), vec![config.ff_size]);
        s.insert(layer_key(l, "output.weight"), vec![h, config.ff_size]);
        s.insert(layer_key(l, "output.bias"), vec![h]);
        s.insert(layer_key(l, "output.layer_norm.gamma"), vec![h]);
        s.insert(layer_key(l, "output.layer_norm.beta"), vec![h]);
    }
    s.insert("pooler.weight".into(), vec![h, h]);
    s.insert("pooler.bias".into(), vec![h]);
    s.insert("classifier.weight".into(), vec![config.num_labels, h]);
    s.insert("classifier.bias".into(), vec![config.num_labels]);
    s
}

/// Biases and layer-norm parameters are exempt from weight decay.
pub fn decays(name: &str) -> bool {
    !(name.ends_with(".bias") || name.contains("layer_norm"))
}

fn is_random_init(name: &str) -> bool {
    name.ends_with(".weight") || name.ends_with("_embeddings")
}

/// A masked-LM target: `(example index, position, original token id)`.
pub type MlmTarget = (usize, usize, usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    weights: BTreeMap<String, Tensor>,
    pruned_heads: PrunedHeads,
}

impl Model {
    /// Truncated-normal (σ = 0.02) matrices and embeddings, unit layer-norm
    /// gains, zero biases.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::stream(seed);
        let mut weights = BTreeMap::new();
        for (name, shape) in expected_shapes(&config, &PrunedHeads::new()) {
            let mut t = if name.ends_with(".gamma") {
                Tensor::filled(&shape, 1.0)?
            } else {
                Tensor::zeros(&shape)?
            };
            if is_random_init(&name) {
                t.data_mut()
                    .iter_mut()
                    .for_each(|v| *v = rng::truncated_normal(&mut rng, INIT_STD));
            }
            weights.insert(name, t);
        }
        Ok(Model {
            config,
            weights,
            pruned_heads: PrunedHeads::new(),
        })
    }

    pub(crate) fn from_parts(
        config: ModelConfig,
        weights: BTreeMap<String, Tensor>,
        pruned_heads: PrunedHeads,
    ) -> Result<Self> {
        config.validate()?;
        let expected = expected_shapes(&config, &pruned_heads);
        for (name, shape) in &expected {
            match weights.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Format(format!(
                        "tensor {name} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::Format(format!("missing tensor {name}"))),
            }
        }
        if let Some(extra) = weights.keys().find(|k| !expected.contains_key(*k)) {
            return Err(Error::Format(format!("unexpected tensor {extra}")));
        }
        for (&l, heads) in &pruned_heads {
            if l >= config.num_layers || heads.iter().any(|&h| h >= config.num_heads) {
                return Err(Error::Format(format!("pruned heads {heads:?} invalid for layer {l}")));
            }
        }
        Ok(Model {
            config,
            weights,
            pruned_heads,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn pruned_heads(&self) -> &PrunedHeads {
        &self.pruned_heads
    }

    pub fn weights(&self) -> &BTreeMap<String, Tensor> {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.weights
    }

    pub fn weight(&self, name: &str) -> Option<&Tensor> {
        self.weights.get(name)
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.values().map(Tensor::numel).sum()
    }

    pub fn zero_grad(&mut self) {
        self.weights.values_mut().for_each(Tensor::zero_grad);
    }

    pub fn kept_heads(&self, layer: usize) -> Vec<usize> {
        kept_heads(&self.config, &self.pruned_heads, layer)
    }

    /// Physically removes attention heads from one layer.
    ///
    /// The rows of the query/key/value projections and the matching columns of
    /// the output projection are deleted. With every head gone, the attention
    /// sublayer reduces to its output bias.
    pub fn prune_heads(&mut self, layer: usize, heads: &BTreeSet<usize>) -> Result<()> {
        if layer >= self.config.num_layers {
            return Err(Error::Index(format!(
                "layer {layer} out of range for {} layers",
                self.config.num_layers
            )));
        }
        if let Some(&bad) = heads.iter().find(|&&h| h >= self.config.num_heads) {
            return Err(Error::Index(format!(
                "head {bad} out of range for {} heads",
                self.config.num_heads
            )));
        }
        if let Some(done) = self.pruned_heads.get(&layer) {
            if let Some(&again) = heads.intersection(done).next() {
                return Err(Error::State(format!("head {again} of layer {layer} is already pruned")));
            }
        }
        if heads.is_empty() {
            return Ok(());
        }

        let d = self.config.head_size();
        let h = self.config.hidden_size;
        let before = self.kept_heads(layer);
        let keep_slots: Vec<usize> = before
            .iter()
            .enumerate()
            .filter(|(_, head)| !heads.contains(head))
            .map(|(slot, _)| slot)
            .collect();
        let width = keep_slots.len() * d;

        for proj in ["query", "key", "value"] {
            let wkey = layer_key(layer, &format!("attention.{proj}.weight"));
            let bkey = layer_key(layer, &format!("attention.{proj}.bias"));
            let w = self.weights.remove(&wkey).expect("projection weight present");
            let b = self.weights.remove(&bkey).expect("projection bias present");
            if width > 0 {
                let mut wd = Vec::with_capacity(width * h);
                let mut bd = Vec::with_capacity(width);
                for &slot in &keep_slots {
                    wd.extend_from_slice(&w.data()[slot * d * h..(slot + 1) * d * h]);
                    bd.extend_from_slice(&b.data()[slot * d..(slot + 1) * d]);
                }
                self.weights.insert(wkey, Tensor::new(vec![width, h], wd)?);
                self.weights.insert(bkey, Tensor::new(vec![width], bd)?);
            }
        }
        let okey = layer_key(layer, "attention.output.weight");
        let o = self.weights.remove(&okey).expect("output projection present");
        if width > 0 {
            let old_width = before.len() * d;
            let mut od = Vec::with_capacity(h * width);
            for row in o.data().chunks_exact(old_width) {
                for &slot in &keep_slots {
                    od.extend_from_slice(&row[slot * d..(slot + 1) * d]);
                }
            }
            self.weights.insert(okey, Tensor::new(vec![h, width], od)?);
        }
        self.pruned_heads.entry(layer).or_default().extend(heads);
        Ok(())
    }

    /// Redraws the projections of `heads` in `layer` instead of removing them.
    pub fn reinit_heads(&mut self, layer: usize, heads: &BTreeSet<usize>, seed: u64) -> Result<()> {
        if layer >= self.config.num_layers {
            return Err(Error::Index(format!("layer {layer} out of range")));
        }
        let kept = self.kept_heads(layer);
        let d = self.config.head_size();
        let h = self.config.hidden_size;
        let mut rng = rng::stream(seed);
        for &head in heads {
            let Some(slot) = kept.iter().position(|&k| k == head) else {
                return Err(Error::Index(format!("head {head} not present in layer {layer}")));
            };
            for proj in ["query", "key", "value"] {
                let w = self
                    .weights
                    .get_mut(&layer_key(layer, &format!("attention.{proj}.weight")))
                    .expect("projection weight present");
                w.data_mut()[slot * d * h..(slot + 1) * d * h]
                    .iter_mut()
                    .for_each(|v| *v = rng::truncated_normal(&mut rng, INIT_STD));
                let b = self
                    .weights
                    .get_mut(&layer_key(layer, &format!("attention.{proj}.bias")))
                    .expect("projection bias present");
                b.data_mut()[slot * d..(slot + 1) * d].fill(0.0);
            }
            let o = self
                .weights
                .get_mut(&layer_key(layer, "attention.output.weight"))
                .expect("output projection present");
            let width = kept.len() * d;
            for row in o.data_mut().chunks_exact_mut(width) {
                row[slot * d..(slot + 1) * d]
                    .iter_mut()
                    .for_each(|v| *v = rng::truncated_normal(&mut rng, INIT_STD));
            }
        }
        Ok(())
    }

    /// Registers every weight on `tape`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Result<BTreeMap<String, Var>> {
        self.weights
            .iter()
            .map(|(name, t)| {
                let v = if trainable { tape.param(t)? } else { tape.constant(t)? };
                Ok((name.clone(), v))
            })
            .collect()
    }

    /// Adds tape gradients into each weight's gradient buffer.
    pub fn accumulate_grads(&mut self, vars: &BTreeMap<String, Var>, grads: &Gradients) -> Result<()> {
        for (name, var) in vars {
            if let (Some(t), Some(g)) = (self.weights.get_mut(name), grads.get(*var)) {
                t.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    fn check_batch(&self, batch: &[TokenizedExample], seq: usize) -> Result<()> {
        if batch.is_empty() {
            return Err(Error::Input("empty batch".into()));
        }
        if seq > self.config.max_positions {
            return Err(Error::Index(format!(
                "sequence length {seq} exceeds max_positions {}",
                self.config.max_positions
            )));
        }
        for ex in batch {
            if ex.input_ids.len() < seq || ex.attention_mask.len() < seq || ex.token_type_ids.len() < seq {
                return Err(Error::Shape("examples in a batch must share one length".into()));
            }
            if let Some(&bad) = ex.input_ids[..seq].iter().find(|&&id| id >= self.config.vocab_size) {
                return Err(Error::Index(format!(
                    "token id {bad} out of range for vocabulary of {}",
                    self.config.vocab_size
                )));
            }
            if let Some(&bad) = ex.token_type_ids[..seq]
                .iter()
                .find(|&&t| t as usize >= self.config.type_vocab_size)
            {
                return Err(Error::Index(format!("token type {bad} out of range")));
            }
        }
        Ok(())
    }

    /// Final hidden states, `(batch·seq) × hidden`.
    ///
    /// Only the first `seq` positions of each example are read. Dropout is
    /// active exactly when `dropout_rng` is given.
    pub fn encode_on_tape(
        &self,
        tape: &mut Tape,
        vars: &BTreeMap<String, Var>,
        batch: &[TokenizedExample],
        seq: usize,
        mut dropout_rng: Option<&mut StreamRng>,
    ) -> Result<(Var, Vec<Var>)> {
        self.check_batch(batch, seq)?;
        let cfg = &self.config;
        let rate = if dropout_rng.is_some() { cfg.dropout } else { 0.0 };
        let v = |name: &str| -> Var { vars[name] };
        let rows = batch.len() * seq;

        let mut ids = Vec::with_capacity(rows);
        let mut positions = Vec::with_capacity(rows);
        let mut types = Vec::with_capacity(rows);
        let mut key_mask = Vec::with_capacity(rows);
        for ex in batch {
            ids.extend_from_slice(&ex.input_ids[..seq]);
            positions.extend(0..seq);
            types.extend(ex.token_type_ids[..seq].iter().map(|&t| t as usize));
            key_mask.extend(ex.attention_mask[..seq].iter().map(|&m| m == 1));
        }

        let word = tape.gather_rows(v("embeddings.word_embeddings"), &ids)?;
        let pos = tape.gather_rows(v("embeddings.position_embeddings"), &positions)?;
        let typ = tape.gather_rows(v("embeddings.token_type_embeddings"), &types)?;
        let sum = tape.add(word, pos)?;
        let sum = tape.add(sum, typ)?;
        let mut hidden = tape.layer_norm(
            sum,
            v("embeddings.layer_norm.gamma"),
            v("embeddings.layer_norm.beta"),
            cfg.layer_norm_eps,
        )?;
        if let Some(r) = dropout_rng.as_deref_mut() {
            hidden = tape.dropout(hidden, rate, r)?;
        }

        let mut attention_nodes = Vec::with_capacity(cfg.num_layers);
        for l in 0..cfg.num_layers {
            let key = |rest: &str| layer_key(l, rest);
            let heads = self.kept_heads(l).len();
            let attn_out = if heads > 0 {
                let q = tape.linear(hidden, v(&key("attention.query.weight")), Some(v(&key("attention.query.bias"))))?;
                let k = tape.linear(hidden, v(&key("attention.key.weight")), Some(v(&key("attention.key.bias"))))?;
                let val = tape.linear(hidden, v(&key("attention.value.weight")), Some(v(&key("attention.value.bias"))))?;
                let geom = AttentionGeometry {
                    batch: batch.len(),
                    seq,
                    heads,
                    head_dim: cfg.head_size(),
                };
                let ctx = tape.attention(q, k, val, geom, &key_mask)?;
                attention_nodes.push(ctx);
                tape.linear(ctx, v(&key("attention.output.weight")), Some(v(&key("attention.output.bias"))))?
            } else {
                tape.repeat_row(v(&key("attention.output.bias")), rows)?
            };
            let attn_out = match dropout_rng.as_deref_mut() {
                Some(r) => tape.dropout(attn_out, rate, r)?,
                None => attn_out,
            };
            let res = tape.add(hidden, attn_out)?;
            let h1 = tape.layer_norm(
                res,
                v(&key("attention.layer_norm.gamma")),
                v(&key("attention.layer_norm.beta")),
                cfg.layer_norm_eps,
            )?;
            let ff = tape.linear(h1, v(&key("intermediate.weight")), Some(v(&key("intermediate.bias"))))?;
            let ff = tape.gelu(ff)?;
            let ff = tape.linear(ff, v(&key("output.weight")), Some(v(&key("output.bias"))))?;
            let ff = match dropout_rng.as_deref_mut() {
                Some(r) => tape.dropout(ff, rate, r)?,
                None => ff,
            };
            let res = tape.add(h1, ff)?;
            hidden = tape.layer_norm(
                res,
                v(&key("output.layer_norm.gamma")),
                v(&key("output.layer_norm.beta")),
                cfg.layer_norm_eps,
            )?;
        }
        Ok((hidden, attention_nodes))
    }

    /// Classification logits, `batch × num_labels`, from the pooled `[CLS]`
    /// position.
    pub fn logits_on_tape(
        &self,
        tape: &mut Tape,
        vars: &BTreeMap<String, Var>,
        batch: &[TokenizedExample],
        mut dropout_rng: Option<&mut StreamRng>,
    ) -> Result<Var> {
        let seq = active_length(batch);
        let (hidden, _) = self.encode_on_tape(tape, vars, batch, seq, dropout_rng.as_deref_mut())?;
        let cls: Vec<usize> = (0..batch.len()).map(|b| b * seq).collect();
        let first = tape.select_rows(hidden, &cls)?;
        let pooled = tape.linear(first, vars["pooler.weight"], Some(vars["pooler.bias"]))?;
        let mut pooled = tape.tanh(pooled)?;
        if let Some(r) = dropout_rng {
            pooled = tape.dropout(pooled, self.config.dropout, r)?;
        }
        tape.linear(pooled, vars["classifier.weight"], Some(vars["classifier.bias"]))
    }

    /// Evaluation-mode logits, `batch × num_labels`.
    pub fn forward(&self, batch: &[TokenizedExample]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false)?;
        let logits = self.logits_on_tape(&mut tape, &vars, batch, None)?;
        tape.to_tensor(logits, vec![batch.len(), self.config.num_labels])
    }

    /// Softmax class probabilities, one row per example.
    pub fn predict_proba(&self, batch: &[TokenizedExample]) -> Result<Vec<Vec<f64>>> {
        let probs = self.forward(batch)?.softmax_rows()?;
        let c = self.config.num_labels;
        Ok(probs.data().chunks_exact(c).map(<[f64]>::to_vec).collect())
    }

    /// Per-position vocabulary logits, `batch × seq × vocab`, over the full
    /// example length.
    pub fn forward_mlm(&self, batch: &[TokenizedExample]) -> Result<Tensor> {
        let seq = batch.first().map_or(0, TokenizedExample::len);
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false)?;
        let (hidden, _) = self.encode_on_tape(&mut tape, &vars, batch, seq, None)?;
        let logits = tape.linear(hidden, vars["embeddings.word_embeddings"], None)?;
        tape.to_tensor(logits, vec![batch.len(), seq, self.config.vocab_size])
    }

    /// Mean cross-entropy over the masked targets only.
    pub fn mlm_loss_on_tape(
        &self,
        tape: &mut Tape,
        vars: &BTreeMap<String, Var>,
        batch: &[TokenizedExample],
        targets: &[MlmTarget],
        dropout_rng: Option<&mut StreamRng>,
    ) -> Result<Var> {
        if targets.is_empty() {
            return Err(Error::Input("masked-LM batch has no target positions".into()));
        }
        let seq = active_length(batch);
        let (hidden, _) = self.encode_on_tape(tape, vars, batch, seq, dropout_rng)?;
        let mut rows = Vec::with_capacity(targets.len());
        let mut labels = Vec::with_capacity(targets.len());
        for &(b, pos, id) in targets {
            if b >= batch.len() || pos >= seq {
                return Err(Error::Index(format!("masked target ({b}, {pos}) outside the batch")));
            }
            rows.push(b * seq + pos);
            labels.push(id);
        }
        let picked = tape.select_rows(hidden, &rows)?;
        let logits = tape.linear(picked, vars["embeddings.word_embeddings"], None)?;
        tape.cross_entropy(logits, &labels)
    }

    pub fn mlm_loss(&self, batch: &[TokenizedExample], targets: &[MlmTarget]) -> Result<f64> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false)?;
        let loss = self.mlm_loss_on_tape(&mut tape, &vars, batch, targets, None)?;
        Ok(tape.value(loss)[0])
    }

    /// Attention probabilities per layer with heads, each laid out
    /// `[batch][head][query][key]`.
    pub fn attention_probabilities(&self, batch: &[TokenizedExample]) -> Result<Vec<Vec<f64>>> {
        let seq = batch.first().map_or(0, TokenizedExample::len);
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false)?;
        let (_, nodes) = self.encode_on_tape(&mut tape, &vars, batch, seq, None)?;
        Ok(nodes
            .into_iter()
            .filter_map(|n| tape.attention_probs(n).map(<[f64]>::to_vec))
            .collect())
    }

    /// Runs a training forward/backward pass for classification and adds the
    /// gradients into the weights. Returns the batch loss.
    pub fn classification_step(
        &mut self,
        batch: &[TokenizedExample],
        dropout_rng: Option<&mut StreamRng>,
    ) -> Result<f64> {
        let labels: Vec<usize> = batch
            .iter()
            .map(|ex| ex.label.ok_or_else(|| Error::Input("training example without a label".into())))
            .collect::<Result<_>>()?;
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, true)?;
        let logits = self.logits_on_tape(&mut tape, &vars, batch, dropout_rng)?;
        let loss = tape.cross_entropy(logits, &labels)?;
        let value = tape.value(loss)[0];
        let grads = tape.backward(loss)?;
        self.accumulate_grads(&vars, &grads)?;
        Ok(value)
    }

    /// Masked-LM counterpart of [`Model::classification_step`].
    pub fn mlm_step(
        &mut self,
        batch: &[TokenizedExample],
        targets: &[MlmTarget],
        dropout_rng: Option<&mut StreamRng>,
    ) -> Result<f64> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, true)?;
        let loss = self.mlm_loss_on_tape(&mut tape, &vars, batch, targets, dropout_rng)?;
        let value = tape.value(loss)[0];
        let grads = tape.backward(loss)?;
        self.accumulate_grads(&vars, &grads)?;
        Ok(value)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            pruned_heads: self.pruned_heads.clone(),
            weights: self.weights.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: Checkpoint) -> Result<Self> {
        if ckpt.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint version {} is not supported (expected {FORMAT_VERSION})",
                ckpt.format_version
            )));
        }
        Self::from_parts(ckpt.config, ckpt.weights, ckpt.pruned_heads)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(path)?)
    }
}

/// Positions up to and including the last unmasked one in any example.
/// Later columns are padding everywhere and cannot affect the output.
pub fn active_length(batch: &[TokenizedExample]) -> usize {
    batch
        .iter()
        .map(|ex| ex.attention_mask.iter().rposition(|&m| m == 1).map_or(1, |p| p + 1))
        .max()
        .unwrap_or(1)
}
