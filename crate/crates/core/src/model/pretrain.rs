//! Masked-token pretraining of the base encoder on an unlabeled corpus.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{BaseWeights, Batch, Builder, Linear, Model, ModelConfig, ModelError, ParamGroup, PeftKind, Result};
use crate::autodiff::{Tape, Tensor, Var};
use crate::data::{LabeledExample, MASK_ID, PAD_ID};
use crate::optim::{Adam, AdamConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub mask_prob: f64,
    pub lr: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { steps: 300, batch_size: 32, mask_prob: 0.15, lr: 1e-3, seed: 0 }
    }
}

/// Pretrained encoder plus the token-prediction head used to train it.
#[derive(Clone, Debug)]
pub struct Pretrained {
    pub base: BaseWeights,
    encoder: Model,
    mlm_w: Tensor,
    mlm_b: Tensor,
    /// Masked-token loss at every step.
    pub losses: Vec<f64>,
}

impl Pretrained {
    /// Mean masked-token loss over `examples`, with masks drawn from `seed`.
    pub fn masked_token_loss(&self, examples: &[LabeledExample], batch_size: usize, mask_prob: f64, seed: u64) -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mut total, mut chunks) = (0.0, 0usize);
        for chunk in examples.chunks(batch_size.max(1)) {
            let refs: Vec<&LabeledExample> = chunk.iter().collect();
            let batch = Batch::from_examples(&refs, self.encoder.config.max_seq_len);
            let mut tape = Tape::new();
            let w = tape.constant(self.mlm_w.clone());
            let b = tape.constant(self.mlm_b.clone());
            let params = self.encoder.bind(&mut tape, false);
            let loss = mlm_loss(&self.encoder, &mut tape, &params, w, b, &batch, mask_prob, &mut rng)?;
            total += tape.value(loss).item();
            chunks += 1;
        }
        Ok(total / chunks.max(1) as f64)
    }
}

/// Trains base weights by masked-token prediction over `corpus` tokens.
/// Labels are ignored. Zero steps returns the seeded random initialization.
pub fn pretrain_base(config: &ModelConfig, corpus: &[LabeledExample], pc: &PretrainConfig) -> Result<Pretrained> {
    if corpus.is_empty() {
        return Err(ModelError::EmptyCorpus);
    }
    let config = ModelConfig { peft: PeftKind::Full, ..config.clone() };
    let mut encoder = Model::new(config.clone(), pc.seed)?;
    let mut b = Builder { params: Vec::new(), rng: ChaCha8Rng::seed_from_u64(pc.seed ^ 0x6d6c_6d00) };
    let Linear { w, b: bias } = b.linear("mlm", ParamGroup::Head, config.hidden, config.vocab_size, false);
    let mut mlm_w = b.params[w].value.clone();
    let mut mlm_b = b.params[bias].value.clone();

    let base_ids: Vec<usize> = encoder.base_ids().collect();
    let mut adam = Adam::new(AdamConfig { lr: pc.lr, ..AdamConfig::default() });
    let mut rng = ChaCha8Rng::seed_from_u64(pc.seed.wrapping_add(1));
    let mut losses = Vec::with_capacity(pc.steps);
    for _ in 0..pc.steps {
        let picks: Vec<&LabeledExample> = (0..pc.batch_size.max(1)).map(|_| corpus.choose(&mut rng).expect("nonempty")).collect();
        let batch = Batch::from_examples(&picks, config.max_seq_len);
        let mut tape = Tape::new();
        let params = encoder.bind(&mut tape, true);
        let wv = tape.leaf(mlm_w.clone().with_grad());
        let bv = tape.leaf(mlm_b.clone().with_grad());
        let loss = mlm_loss(&encoder, &mut tape, &params, wv, bv, &batch, pc.mask_prob, &mut rng)?;
        losses.push(tape.value(loss).item());
        let mut grads = tape.backward(loss)?;
        let gw = grads.take(wv).expect("mlm weight grad");
        let gb = grads.take(bv).expect("mlm bias grad");
        let base_grads: Vec<Tensor> = base_ids.iter().map(|&i| grads.take(params[i]).expect("base grad")).collect();
        let n = encoder.params.len();
        let mut updates: Vec<(usize, &mut Tensor, &Tensor)> = encoder
            .params
            .iter_mut()
            .enumerate()
            .filter(|(_, p)| p.group == ParamGroup::Base)
            .zip(&base_grads)
            .map(|((i, p), g)| (i, &mut p.value, g))
            .collect();
        updates.push((n, &mut mlm_w, &gw));
        updates.push((n + 1, &mut mlm_b, &gb));
        adam.step(updates);
    }
    let base = encoder.base_weights();
    Ok(Pretrained { base, encoder, mlm_w, mlm_b, losses })
}

/// Replaces a random subset of real tokens with the mask id and returns the
/// mean cross-entropy of recovering them. At least one token per batch is
/// always masked.
#[allow(clippy::too_many_arguments)]
fn mlm_loss(
    encoder: &Model,
    tape: &mut Tape,
    params: &[Var],
    w: Var,
    b: Var,
    batch: &Batch,
    mask_prob: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    let (bs, t) = (batch.batch_size, batch.seq_len);
    let mut masked = batch.clone();
    let mut weights = vec![0.0; bs * t];
    for (row, &len) in batch.lengths.iter().enumerate() {
        for pos in 0..len {
            let i = row * t + pos;
            if batch.tokens[i] != PAD_ID as usize && rng.random::<f64>() < mask_prob {
                masked.tokens[i] = MASK_ID as usize;
                weights[i] = 1.0;
            }
        }
    }
    if weights.iter().all(|&x| x == 0.0) {
        weights[0] = 1.0;
        masked.tokens[0] = MASK_ID as usize;
    }
    let count: f64 = weights.iter().sum();
    weights.iter_mut().for_each(|x| *x /= count);

    let masks = encoder.all_on(bs);
    let hidden = encoder.encode(tape, params, &masked, &masks)?;
    let logits = tape.matmul(hidden, w)?;
    let logits = tape.add(logits, b)?;
    let logits = tape.reshape(logits, &[bs * t, encoder.config.vocab_size])?;
    let per_token = tape.cross_entropy(logits, &batch.tokens)?;
    let weights = tape.constant(Tensor::new(&[bs * t], weights)?);
    let weighted = tape.mul(per_token, weights)?;
    Ok(tape.sum(weighted)?)
}
