//! Transformer encoder classifier with frozen base weights and per-layer,
//! per-sample gated PEFT deltas.
//!
//! Gating never changes tensor shapes: Adapter and LoRA outputs are scaled by
//! a `{0,1}` gate, BitFit adds the gated difference between its trainable and
//! frozen biases, and Prompt positions are removed from attention with an
//! additive mask. With a gate of 0 every delta contributes an exact zero.

mod checkpoint;
mod pretrain;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use pretrain::{pretrain_base, PretrainConfig, Pretrained};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::data::{ClassProbabilities, LabeledExample, PAD_ID};

/// Additive attention-mask value for excluded key positions.
const MASKED: f64 = -1e9;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("sample {sample}: routing mask has {got} layers, model has {expected}")]
    MaskLength { sample: usize, expected: usize, got: usize },
    #[error("{masks} routing masks for a batch of {batch}")]
    MaskCount { batch: usize, masks: usize },
    #[error("empty pretraining corpus")]
    EmptyCorpus,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PeftKind {
    Adapter,
    Lora,
    Bitfit,
    Prompt,
    /// Full fine-tuning: no delta, every base weight trainable.
    Full,
}

impl PeftKind {
    pub const ALL: [PeftKind; 5] = [Self::Adapter, Self::Lora, Self::Bitfit, Self::Prompt, Self::Full];

    pub fn name(self) -> &'static str {
        match self {
            Self::Adapter => "adapter",
            Self::Lora => "lora",
            Self::Bitfit => "bitfit",
            Self::Prompt => "prompt",
            Self::Full => "full",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub num_classes: usize,
    pub peft: PeftKind,
    pub adapter_dim: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub prompt_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            hidden: 64,
            heads: 4,
            ffn: 128,
            vocab_size: 256,
            max_seq_len: 64,
            num_classes: 5,
            peft: PeftKind::Adapter,
            adapter_dim: 16,
            lora_rank: 4,
            lora_alpha: 8.0,
            prompt_len: 20,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.num_layers == 0 {
            return fail("num_layers must be ≥ 1");
        }
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return fail("hidden must be a positive multiple of heads");
        }
        if self.num_classes < 2 {
            return fail("num_classes must be ≥ 2");
        }
        if self.ffn == 0 || self.vocab_size <= PAD_ID as usize || self.max_seq_len == 0 {
            return fail("ffn, vocab_size and max_seq_len must be positive");
        }
        match self.peft {
            PeftKind::Adapter if self.adapter_dim == 0 => fail("adapter_dim must be ≥ 1"),
            PeftKind::Lora if self.lora_rank == 0 => fail("lora_rank must be ≥ 1"),
            PeftKind::Prompt if self.prompt_len == 0 => fail("prompt_len must be ≥ 1"),
            _ => Ok(()),
        }
    }

    /// BERT-base dimensions (12 layers, 768 hidden, 12 heads, 3072 FFN,
    /// 30522-token vocabulary, 512 positions). Only useful for parameter
    /// accounting; allocating it is expensive.
    pub fn bert_base(peft: PeftKind, num_classes: usize) -> Self {
        Self {
            num_layers: 12,
            hidden: 768,
            heads: 12,
            ffn: 3072,
            vocab_size: 30522,
            max_seq_len: 512,
            num_classes,
            peft,
            adapter_dim: 16,
            lora_rank: 4,
            lora_alpha: 8.0,
            prompt_len: 20,
        }
    }

    fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    /// Parameter counts implied by this config, without allocating weights.
    pub fn parameter_counts(&self) -> ParameterCounts {
        let (d, f, l) = (self.hidden, self.ffn, self.num_layers);
        let embeddings = self.vocab_size * d + self.max_seq_len * d + 2 * d;
        let per_layer = 4 * (d * d + d) + (d * f + f) + (f * d + d) + 4 * d;
        let base = embeddings + l * per_layer;
        let delta_per_layer = match self.peft {
            PeftKind::Adapter => 2 * (d * self.adapter_dim + self.adapter_dim + self.adapter_dim * d + d),
            PeftKind::Lora => 2 * (d * self.lora_rank + self.lora_rank * d),
            PeftKind::Bitfit => 4 * d + f + d + 2 * d,
            PeftKind::Prompt => self.prompt_len * d,
            PeftKind::Full => 0,
        };
        ParameterCounts { base, delta: l * delta_per_layer, head: d * self.num_classes + self.num_classes }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParameterCounts {
    pub base: usize,
    pub delta: usize,
    pub head: usize,
}

impl ParameterCounts {
    /// Trainable delta share of encoder parameters, `delta / (base + delta)`;
    /// the task head is excluded from both sides.
    pub fn delta_ratio(&self) -> f64 {
        self.delta as f64 / (self.base + self.delta) as f64
    }
}

/// Per-sample, per-layer activation decisions.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct RoutingMask(Vec<bool>);

impl RoutingMask {
    pub fn new(active: Vec<bool>) -> Self {
        Self(active)
    }

    pub fn all(layers: usize, active: bool) -> Self {
        Self(vec![active; layers])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn is_active(&self, layer: usize) -> bool {
        self.0[layer]
    }

    pub fn active_count(&self) -> usize {
        self.0.iter().filter(|&&a| a).count()
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamGroup {
    /// Pretrained encoder weights θ.
    Base,
    /// PEFT delta δ.
    Delta,
    /// Task classifier.
    Head,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor,
}

#[derive(Clone, Copy, Debug)]
struct Linear {
    w: usize,
    b: usize,
}

#[derive(Clone, Copy, Debug)]
struct Norm {
    gamma: usize,
    beta: usize,
}

#[derive(Clone, Debug)]
struct LayerIds {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln1: Norm,
    ffn_in: Linear,
    ffn_out: Linear,
    ln2: Norm,
}

#[derive(Clone, Copy, Debug)]
struct AdapterIds {
    down: Linear,
    up: Linear,
}

/// Trainable copies of every bias in a layer.
#[derive(Clone, Copy, Debug)]
struct BitfitIds {
    q: usize,
    k: usize,
    v: usize,
    o: usize,
    ffn_in: usize,
    ffn_out: usize,
    ln1: usize,
    ln2: usize,
}

#[derive(Clone, Debug)]
enum LayerDelta {
    None,
    Adapter { attn: AdapterIds, ffn: AdapterIds },
    Lora { q_down: usize, q_up: usize, v_down: usize, v_up: usize },
    Bitfit(BitfitIds),
    Prompt { prompt: usize },
}

#[derive(Clone, Debug)]
struct Layout {
    tok_emb: usize,
    pos_emb: usize,
    emb_ln: Norm,
    layers: Vec<LayerIds>,
    deltas: Vec<LayerDelta>,
    head: Linear,
}

struct Builder {
    params: Vec<Param>,
    rng: ChaCha8Rng,
}

impl Builder {
    fn add(&mut self, name: String, group: ParamGroup, value: Tensor) -> usize {
        self.params.push(Param { name, group, value });
        self.params.len() - 1
    }

    fn normal(&mut self, shape: &[usize], std: f64) -> Tensor {
        let dist = Normal::new(0.0, std).expect("valid std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| dist.sample(&mut self.rng)).collect();
        Tensor::new(shape, data).expect("shape matches")
    }

    fn linear(&mut self, name: &str, group: ParamGroup, fan_in: usize, fan_out: usize, zero: bool) -> Linear {
        let w = if zero {
            Tensor::zeros(&[fan_in, fan_out])
        } else {
            self.normal(&[fan_in, fan_out], (1.0 / fan_in as f64).sqrt())
        };
        Linear {
            w: self.add(format!("{name}.w"), group, w),
            b: self.add(format!("{name}.b"), group, Tensor::zeros(&[fan_out])),
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm {
            gamma: self.add(format!("{name}.gamma"), ParamGroup::Base, Tensor::ones(&[d])),
            beta: self.add(format!("{name}.beta"), ParamGroup::Base, Tensor::zeros(&[d])),
        }
    }
}

/// Pretrained encoder weights θ, detached from any task head or delta.
#[derive(Clone, Debug, PartialEq)]
pub struct BaseWeights {
    pub config: ModelConfig,
    params: Vec<Param>,
}

impl BaseWeights {
    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn checksum(&self) -> u64 {
        checksum(self.params.iter())
    }
}

/// FNV-1a over parameter names, shapes and value bits.
fn checksum<'a>(params: impl Iterator<Item = &'a Param>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut feed = |bytes: &[u8]| {
        for &b in bytes {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
    };
    for p in params {
        feed(p.name.as_bytes());
        for &d in p.value.shape() {
            feed(&(d as u64).to_le_bytes());
        }
        for v in p.value.data() {
            feed(&v.to_bits().to_le_bytes());
        }
    }
    h
}

/// Padded token batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub tokens: Vec<usize>,
    pub batch_size: usize,
    pub seq_len: usize,
    /// Non-pad length of each row.
    pub lengths: Vec<usize>,
}

impl Batch {
    /// Pads to the longest sequence, truncating at `max_len`.
    pub fn from_sequences(seqs: &[&[u32]], max_len: usize) -> Self {
        let seq_len = seqs.iter().map(|s| s.len().min(max_len)).max().unwrap_or(0).max(1);
        let mut tokens = Vec::with_capacity(seqs.len() * seq_len);
        let mut lengths = Vec::with_capacity(seqs.len());
        for s in seqs {
            let n = s.len().min(max_len);
            tokens.extend(s[..n].iter().map(|&t| t as usize));
            tokens.extend(std::iter::repeat_n(PAD_ID as usize, seq_len - n));
            lengths.push(n.max(1));
        }
        Self { tokens, batch_size: seqs.len(), seq_len, lengths }
    }

    pub fn from_examples(examples: &[&LabeledExample], max_len: usize) -> Self {
        let seqs: Vec<&[u32]> = examples.iter().map(|e| e.tokens.as_slice()).collect();
        Self::from_sequences(&seqs, max_len)
    }

    /// Additive key mask `[B, 1, 1, T]` hiding pad positions.
    fn pad_mask(&self) -> Vec<f64> {
        let mut m = Vec::with_capacity(self.batch_size * self.seq_len);
        for &len in &self.lengths {
            m.extend((0..self.seq_len).map(|t| if t < len { 0.0 } else { MASKED }));
        }
        m
    }
}

/// Result of a forward pass: logits plus the tape handle of every parameter.
pub struct Forward {
    pub logits: Var,
    pub params: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: Vec<Param>,
    layout: Layout,
}

impl Model {
    /// Randomly initialized base, zero-effect deltas and a fresh head.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut b = Builder { params: Vec::new(), rng: ChaCha8Rng::seed_from_u64(seed) };
        let layout = build_layout(&config, &mut b);
        Ok(Self { config, params: b.params, layout })
    }

    /// Attaches deltas of `peft` and a head seeded by `seed` to pretrained θ.
    pub fn from_base(base: &BaseWeights, peft: PeftKind, num_classes: usize, seed: u64) -> Result<Self> {
        let config = ModelConfig { peft, num_classes, ..base.config.clone() };
        let mut model = Self::new(config, seed)?;
        let base_ids: Vec<usize> = model.base_ids().collect();
        if base_ids.len() != base.params.len() {
            return Err(ModelError::Config("base weights do not match model layout".into()));
        }
        for (id, src) in base_ids.into_iter().zip(&base.params) {
            let dst = &mut model.params[id];
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(ModelError::Config(format!("base parameter {} does not match", src.name)));
            }
            dst.value = src.value.clone();
        }
        model.sync_bitfit_copies();
        Ok(model)
    }

    /// BitFit trainable biases start as copies of the frozen biases.
    fn sync_bitfit_copies(&mut self) {
        for (ids, delta) in self.layout.layers.clone().iter().zip(self.layout.deltas.clone()) {
            if let LayerDelta::Bitfit(bf) = delta {
                let pairs = [
                    (bf.q, ids.q.b),
                    (bf.k, ids.k.b),
                    (bf.v, ids.v.b),
                    (bf.o, ids.o.b),
                    (bf.ffn_in, ids.ffn_in.b),
                    (bf.ffn_out, ids.ffn_out.b),
                    (bf.ln1, ids.ln1.beta),
                    (bf.ln2, ids.ln2.beta),
                ];
                for (copy, frozen) in pairs {
                    self.params[copy].value = self.params[frozen].value.clone();
                }
            }
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn num_layers(&self) -> usize {
        self.config.num_layers
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    fn base_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.params.iter().enumerate().filter(|(_, p)| p.group == ParamGroup::Base).map(|(i, _)| i)
    }

    /// Ids of the parameters updated during fine-tuning: the deltas plus the
    /// head, or everything for full fine-tuning.
    pub fn trainable_parameters(&self) -> Vec<usize> {
        self.params
            .iter()
            .enumerate()
            .filter(|(_, p)| self.config.peft == PeftKind::Full || p.group != ParamGroup::Base)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn parameter_counts(&self) -> ParameterCounts {
        let count = |g: ParamGroup| self.params.iter().filter(|p| p.group == g).map(|p| p.value.numel()).sum();
        ParameterCounts {
            base: count(ParamGroup::Base),
            delta: count(ParamGroup::Delta),
            head: count(ParamGroup::Head),
        }
    }

    pub fn base_weights(&self) -> BaseWeights {
        BaseWeights {
            config: self.config.clone(),
            params: self.params.iter().filter(|p| p.group == ParamGroup::Base).cloned().collect(),
        }
    }

    /// Checksum of θ only.
    pub fn base_checksum(&self) -> u64 {
        checksum(self.params.iter().filter(|p| p.group == ParamGroup::Base))
    }

    pub fn all_on(&self, batch: usize) -> Vec<RoutingMask> {
        vec![RoutingMask::all(self.config.num_layers, true); batch]
    }

    /// Records the full forward on `tape`. Trainable parameters become
    /// differentiable leaves when `with_grad` is set.
    pub fn forward(&self, tape: &mut Tape, batch: &Batch, masks: &[RoutingMask], with_grad: bool) -> Result<Forward> {
        let params = self.bind(tape, with_grad);
        let hidden = self.encode(tape, &params, batch, masks)?;
        let logits = self.classify(tape, &params, batch, hidden)?;
        Ok(Forward { logits, params })
    }

    /// Softmax class probabilities without gradient tracking.
    pub fn predict_proba(&self, batch: &Batch, masks: &[RoutingMask]) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let fwd = self.forward(&mut tape, batch, masks, false)?;
        let logits = tape.value(fwd.logits);
        let c = self.config.num_classes;
        Ok(logits
            .data()
            .chunks(c)
            .map(|row| {
                let mut p = row.to_vec();
                crate::autodiff::softmax_in_place(&mut p);
                p
            })
            .collect())
    }

    fn bind(&self, tape: &mut Tape, with_grad: bool) -> Vec<Var> {
        let trainable = self.trainable_parameters();
        let mut is_trainable = vec![false; self.params.len()];
        for i in trainable {
            is_trainable[i] = true;
        }
        self.params
            .iter()
            .zip(is_trainable)
            .map(|(p, t)| {
                let mut v = p.value.clone();
                v.set_requires_grad(with_grad && t);
                tape.leaf(v)
            })
            .collect()
    }

    pub(crate) fn encode(&self, tape: &mut Tape, params: &[Var], batch: &Batch, masks: &[RoutingMask]) -> Result<Var> {
        let (b, t, d) = (batch.batch_size, batch.seq_len, self.config.hidden);
        if masks.len() != b {
            return Err(ModelError::MaskCount { batch: b, masks: masks.len() });
        }
        for (i, m) in masks.iter().enumerate() {
            if m.len() != self.config.num_layers {
                return Err(ModelError::MaskLength { sample: i, expected: self.config.num_layers, got: m.len() });
            }
        }
        if t > self.config.max_seq_len {
            return Err(ModelError::Config(format!("sequence length {t} exceeds max_seq_len")));
        }
        let lay = &self.layout;
        let tok = tape.embedding(params[lay.tok_emb], &batch.tokens)?;
        let tok = tape.reshape(tok, &[b, t, d])?;
        let positions: Vec<usize> = (0..t).collect();
        let pos = tape.embedding(params[lay.pos_emb], &positions)?;
        let x = tape.add(tok, pos)?;
        let mut h = tape.layer_norm(x, params[lay.emb_ln.gamma], params[lay.emb_ln.beta])?;
        let pad = batch.pad_mask();
        for l in 0..self.config.num_layers {
            let gates: Vec<f64> = masks.iter().map(|m| if m.is_active(l) { 1.0 } else { 0.0 }).collect();
            h = self.layer(tape, params, l, h, &gates, &pad, batch)?;
        }
        Ok(h)
    }

    fn classify(&self, tape: &mut Tape, params: &[Var], batch: &Batch, hidden: Var) -> Result<Var> {
        let (b, t, d) = (batch.batch_size, batch.seq_len, self.config.hidden);
        let mut weights = Vec::with_capacity(b * t);
        for &len in &batch.lengths {
            weights.extend((0..t).map(|i| if i < len { 1.0 / len as f64 } else { 0.0 }));
        }
        let w = tape.constant(Tensor::new(&[b, 1, t], weights)?);
        let pooled = tape.bmm(w, hidden, false)?;
        let pooled = tape.reshape(pooled, &[b, d])?;
        let head = self.layout.head;
        self.linear(tape, params, pooled, head)
    }

    fn linear(&self, tape: &mut Tape, params: &[Var], x: Var, lin: Linear) -> Result<Var> {
        let y = tape.matmul(x, params[lin.w])?;
        Ok(tape.add(y, params[lin.b])?)
    }

    /// `x + gate ⊙ (copy - frozen)`: swaps a frozen bias for its trainable copy.
    fn bitfit_shift(&self, tape: &mut Tape, params: &[Var], x: Var, gate: Var, copy: usize, frozen: usize) -> Result<Var> {
        let diff = tape.sub(params[copy], params[frozen])?;
        let shift = tape.mul(gate, diff)?;
        Ok(tape.add(x, shift)?)
    }

    fn adapter(&self, tape: &mut Tape, params: &[Var], x: Var, ids: AdapterIds, gate: Var) -> Result<Var> {
        let down = self.linear(tape, params, x, ids.down)?;
        let act = tape.gelu(down)?;
        let up = self.linear(tape, params, act, ids.up)?;
        let gated = tape.mul(gate, up)?;
        Ok(tape.add(x, gated)?)
    }

    fn split_heads(&self, tape: &mut Tape, x: Var, b: usize, t: usize) -> Result<Var> {
        let (h, dh) = (self.config.heads, self.config.head_dim());
        let x = tape.reshape(x, &[b, t, h, dh])?;
        let x = tape.permute(x, &[0, 2, 1, 3])?;
        Ok(tape.reshape(x, &[b * h, t, dh])?)
    }

    #[allow(clippy::too_many_arguments)]
    fn layer(
        &self,
        tape: &mut Tape,
        params: &[Var],
        l: usize,
        h: Var,
        gates: &[f64],
        pad: &[f64],
        batch: &Batch,
    ) -> Result<Var> {
        let (b, t, d) = (batch.batch_size, batch.seq_len, self.config.hidden);
        let heads = self.config.heads;
        let ids = self.layout.layers[l].clone();
        let delta = self.layout.deltas[l].clone();
        let gate = tape.constant(Tensor::new(&[b, 1, 1], gates.to_vec())?);

        // Queries come from the tokens; keys and values may also see prompts.
        let mut q = self.linear(tape, params, h, ids.q)?;
        let (kv_in, tk, key_mask) = match &delta {
            LayerDelta::Prompt { prompt } => {
                let p = self.config.prompt_len;
                let zeros = tape.constant(Tensor::zeros(&[b, p, d]));
                let prompts = tape.add(zeros, params[*prompt])?;
                let kv = tape.concat(prompts, h, 1)?;
                let mut mask = Vec::with_capacity(b * (p + t));
                for (i, &g) in gates.iter().enumerate() {
                    mask.extend(std::iter::repeat_n(if g > 0.0 { 0.0 } else { MASKED }, p));
                    mask.extend_from_slice(&pad[i * t..(i + 1) * t]);
                }
                (kv, p + t, mask)
            }
            _ => (h, t, pad.to_vec()),
        };
        let mut k = self.linear(tape, params, kv_in, ids.k)?;
        let mut v = self.linear(tape, params, kv_in, ids.v)?;

        match &delta {
            LayerDelta::Lora { q_down, q_up, v_down, v_up } => {
                let scale = self.config.lora_alpha / self.config.lora_rank as f64;
                for (target, down, up) in [(&mut q, *q_down, *q_up), (&mut v, *v_down, *v_up)] {
                    let a = tape.matmul(h, params[down])?;
                    let a = tape.matmul(a, params[up])?;
                    let a = tape.scale(a, scale)?;
                    let a = tape.mul(gate, a)?;
                    *target = tape.add(*target, a)?;
                }
            }
            LayerDelta::Bitfit(bf) => {
                q = self.bitfit_shift(tape, params, q, gate, bf.q, ids.q.b)?;
                k = self.bitfit_shift(tape, params, k, gate, bf.k, ids.k.b)?;
                v = self.bitfit_shift(tape, params, v, gate, bf.v, ids.v.b)?;
            }
            _ => {}
        }

        let qh = self.split_heads(tape, q, b, t)?;
        let kh = self.split_heads(tape, k, b, tk)?;
        let vh = self.split_heads(tape, v, b, tk)?;
        let scores = tape.bmm(qh, kh, true)?;
        let scores = tape.scale(scores, 1.0 / (self.config.head_dim() as f64).sqrt())?;
        let scores = tape.reshape(scores, &[b, heads, t, tk])?;
        let mask = tape.constant(Tensor::new(&[b, 1, 1, tk], key_mask)?);
        let scores = tape.add(scores, mask)?;
        let attn = tape.softmax(scores)?;
        let attn = tape.reshape(attn, &[b * heads, t, tk])?;
        let ctx = tape.bmm(attn, vh, false)?;
        let ctx = tape.reshape(ctx, &[b, heads, t, self.config.head_dim()])?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[b, t, d])?;
        let mut a = self.linear(tape, params, ctx, ids.o)?;

        match &delta {
            LayerDelta::Adapter { attn, .. } => a = self.adapter(tape, params, a, *attn, gate)?,
            LayerDelta::Bitfit(bf) => a = self.bitfit_shift(tape, params, a, gate, bf.o, ids.o.b)?,
            _ => {}
        }
        let r = tape.add(h, a)?;
        let mut h1 = tape.layer_norm(r, params[ids.ln1.gamma], params[ids.ln1.beta])?;
        if let LayerDelta::Bitfit(bf) = &delta {
            h1 = self.bitfit_shift(tape, params, h1, gate, bf.ln1, ids.ln1.beta)?;
        }

        let mut f = self.linear(tape, params, h1, ids.ffn_in)?;
        if let LayerDelta::Bitfit(bf) = &delta {
            f = self.bitfit_shift(tape, params, f, gate, bf.ffn_in, ids.ffn_in.b)?;
        }
        let f = tape.gelu(f)?;
        let mut f = self.linear(tape, params, f, ids.ffn_out)?;
        match &delta {
            LayerDelta::Adapter { ffn, .. } => f = self.adapter(tape, params, f, *ffn, gate)?,
            LayerDelta::Bitfit(bf) => f = self.bitfit_shift(tape, params, f, gate, bf.ffn_out, ids.ffn_out.b)?,
            _ => {}
        }
        let r = tape.add(h1, f)?;
        let mut h2 = tape.layer_norm(r, params[ids.ln2.gamma], params[ids.ln2.beta])?;
        if let LayerDelta::Bitfit(bf) = &delta {
            h2 = self.bitfit_shift(tape, params, h2, gate, bf.ln2, ids.ln2.beta)?;
        }
        Ok(h2)
    }
}

impl ClassProbabilities for Model {
    fn class_probabilities(&self, examples: &[LabeledExample]) -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(examples.len());
        for chunk in examples.chunks(32) {
            let refs: Vec<&LabeledExample> = chunk.iter().collect();
            let batch = Batch::from_examples(&refs, self.config.max_seq_len);
            let probs = self
                .predict_proba(&batch, &self.all_on(chunk.len()))
                .expect("forward on validated batch");
            out.extend(probs);
        }
        out
    }
}

fn build_layout(config: &ModelConfig, b: &mut Builder) -> Layout {
    let (d, f) = (config.hidden, config.ffn);
    let base = ParamGroup::Base;
    let tok = b.normal(&[config.vocab_size, d], 1.0);
    let tok_emb = b.add("emb.tok".into(), base, tok);
    let pos = b.normal(&[config.max_seq_len, d], 1.0);
    let pos_emb = b.add("emb.pos".into(), base, pos);
    let emb_ln = b.norm("emb.ln", d);
    let mut layers = Vec::with_capacity(config.num_layers);
    for l in 0..config.num_layers {
        let p = format!("layer{l}");
        layers.push(LayerIds {
            q: b.linear(&format!("{p}.attn.q"), base, d, d, false),
            k: b.linear(&format!("{p}.attn.k"), base, d, d, false),
            v: b.linear(&format!("{p}.attn.v"), base, d, d, false),
            o: b.linear(&format!("{p}.attn.o"), base, d, d, false),
            ln1: b.norm(&format!("{p}.ln1"), d),
            ffn_in: b.linear(&format!("{p}.ffn.in"), base, d, f, false),
            ffn_out: b.linear(&format!("{p}.ffn.out"), base, f, d, false),
            ln2: b.norm(&format!("{p}.ln2"), d),
        });
    }
    let delta = ParamGroup::Delta;
    let mut deltas = Vec::with_capacity(config.num_layers);
    for l in 0..config.num_layers {
        let p = format!("layer{l}.delta");
        let item = match config.peft {
            PeftKind::Full => LayerDelta::None,
            PeftKind::Adapter => {
                let r = config.adapter_dim;
                let attn = AdapterIds {
                    down: b.linear(&format!("{p}.adapter_attn.down"), delta, d, r, false),
                    up: b.linear(&format!("{p}.adapter_attn.up"), delta, r, d, true),
                };
                let ffn = AdapterIds {
                    down: b.linear(&format!("{p}.adapter_ffn.down"), delta, d, r, false),
                    up: b.linear(&format!("{p}.adapter_ffn.up"), delta, r, d, true),
                };
                LayerDelta::Adapter { attn, ffn }
            }
            PeftKind::Lora => {
                let r = config.lora_rank;
                let std = (1.0 / d as f64).sqrt();
                let mut pair = |name: &str| {
                    let down = b.normal(&[d, r], std);
                    let down = b.add(format!("{p}.lora_{name}.down"), delta, down);
                    let up = b.add(format!("{p}.lora_{name}.up"), delta, Tensor::zeros(&[r, d]));
                    (down, up)
                };
                let (q_down, q_up) = pair("q");
                let (v_down, v_up) = pair("v");
                LayerDelta::Lora { q_down, q_up, v_down, v_up }
            }
            PeftKind::Bitfit => {
                let mut copy = |name: &str, n: usize| b.add(format!("{p}.bitfit.{name}"), delta, Tensor::zeros(&[n]));
                LayerDelta::Bitfit(BitfitIds {
                    q: copy("q", d),
                    k: copy("k", d),
                    v: copy("v", d),
                    o: copy("o", d),
                    ffn_in: copy("ffn_in", f),
                    ffn_out: copy("ffn_out", d),
                    ln1: copy("ln1", d),
                    ln2: copy("ln2", d),
                })
            }
            PeftKind::Prompt => {
                let init = b.normal(&[config.prompt_len, d], 1.0);
                LayerDelta::Prompt { prompt: b.add(format!("{p}.prompt"), delta, init) }
            }
        };
        deltas.push(item);
    }
    let head = b.linear("head", ParamGroup::Head, d, config.num_classes, false);
    Layout { tok_emb, pos_emb, emb_ln, layers, deltas, head }
}
