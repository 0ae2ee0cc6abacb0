//! Training loop: warm-up on all-on masks, then per-epoch mixture fits on the
//! previous epoch's losses, routed steps with an ensemble consistency term,
//! and evaluation.
//!
//! Every random choice comes from a substream keyed by sample id, so the
//! trajectory depends only on the config and seed.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{softmax_in_place, Tape, Tensor, Var};
use crate::data::{Dataset, LabeledExample};
use crate::gmm::{fit_em, Component, GmmConfig, LossCache};
use crate::model::{Batch, Model, ModelError, RoutingMask};
use crate::optim::{Adam, AdamConfig};
use crate::router::{inference_mask, sample_mask, substream, RouterError, RoutingPolicy, StreamTag};

/// Version of the metrics record layout.
pub const METRICS_SCHEMA: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFinite { epoch: usize, step: usize },
    #[error("ensemble targets requested before a snapshot exists (epoch {epoch}, warm-up {warmup})")]
    MissingSnapshot { epoch: usize, warmup: usize },
    #[error("training set is empty")]
    EmptyTrain,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Router(#[from] RouterError),
}

impl From<crate::autodiff::AutodiffError> for TrainError {
    fn from(e: crate::autodiff::AutodiffError) -> Self {
        Self::Model(ModelError::Autodiff(e))
    }
}

type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Plain fine-tuning: every epoch is a warm-up epoch.
    Peft,
    Clear,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnsembleMode {
    /// N fresh routed forwards of the epoch-start snapshot.
    Faithful,
    /// Mean of the last N epochs' training-forward predictions.
    Cached,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub method: Method,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub ensemble_forwards: usize,
    pub ensemble: EnsembleMode,
    pub lambda: f64,
    pub avg_window: usize,
    pub eval_batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            method: Method::Clear,
            epochs: 20,
            warmup_epochs: 3,
            batch_size: 32,
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            ensemble_forwards: 5,
            ensemble: EnsembleMode::Faithful,
            lambda: 1.0,
            avg_window: 5,
            eval_batch_size: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.epochs == 0 {
            return fail("epochs must be ≥ 1");
        }
        if self.method == Method::Clear && (self.warmup_epochs == 0 || self.warmup_epochs > self.epochs) {
            return fail("warmup_epochs must be in [1, epochs]");
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return fail("batch sizes must be ≥ 1");
        }
        if self.ensemble_forwards == 0 {
            return fail("ensemble_forwards must be ≥ 1");
        }
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return fail("lambda must be finite and ≥ 0");
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return fail("lr must be positive");
        }
        if self.avg_window == 0 {
            return fail("avg_window must be ≥ 1");
        }
        Ok(())
    }

    /// Number of leading epochs trained with all-on masks and plain CE.
    pub fn effective_warmup(&self) -> usize {
        match self.method {
            Method::Peft => self.epochs,
            Method::Clear => self.warmup_epochs.min(self.epochs),
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, ..AdamConfig::default() }
    }
}

/// Everything the training loop needs besides data and model.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainSetup {
    pub train: TrainConfig,
    pub routing: RoutingPolicy,
    pub gmm: GmmConfig,
}

/// Ensemble predictions of the epoch-start snapshot.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionBuffer {
    pub epoch: usize,
    /// `members[i]` holds one distribution per forward for sample `i`.
    pub members: Vec<Vec<Vec<f64>>>,
}

impl PredictionBuffer {
    pub fn mean(&self, i: usize) -> Vec<f64> {
        let m = &self.members[i];
        let mut out = vec![0.0; m[0].len()];
        for d in m {
            for (o, x) in out.iter_mut().zip(d) {
                *o += x;
            }
        }
        let n = m.len() as f64;
        out.iter_mut().for_each(|o| *o /= n);
        renormalize(&mut out);
        out
    }
}

/// Rescales a distribution that drifted from summing to one by rounding.
fn renormalize(p: &mut [f64]) {
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= s);
}

/// `N` routed forwards of `snapshot` for every example, masks drawn from the
/// `(seed, epoch, id, Ensemble(k))` substreams.
#[allow(clippy::too_many_arguments)]
pub fn ensemble_predict(
    snapshot: &Model,
    examples: &[LabeledExample],
    clean_prob: &[f64],
    policy: &RoutingPolicy,
    n: usize,
    seed: u64,
    epoch: usize,
    chunk: usize,
) -> Result<PredictionBuffer> {
    let layers = snapshot.num_layers();
    let mut members = Vec::with_capacity(examples.len());
    let per_chunk = (chunk / n).max(1);
    for (c, part) in examples.chunks(per_chunk).enumerate() {
        let mut refs = Vec::with_capacity(part.len() * n);
        let mut masks = Vec::with_capacity(part.len() * n);
        for k in 0..n {
            for (j, ex) in part.iter().enumerate() {
                let p = clean_prob[c * per_chunk + j];
                let mut rng = substream(seed, epoch, ex.id, StreamTag::Ensemble(k));
                masks.push(sample_mask(p, layers, policy, &mut rng)?);
                refs.push(ex);
            }
        }
        let batch = Batch::from_examples(&refs, snapshot.config().max_seq_len);
        let probs = snapshot.predict_proba(&batch, &masks)?;
        for j in 0..part.len() {
            members.push((0..n).map(|k| probs[k * part.len() + j].clone()).collect());
        }
    }
    Ok(PredictionBuffer { epoch, members })
}

/// Loss graph for one step: mean CE against given labels plus `λ` times the
/// mean soft CE against constant targets.
pub struct StepGraph {
    pub total: Var,
    pub ce: Var,
    pub consistency: Option<Var>,
    pub logits: Var,
    pub params: Vec<Var>,
}

pub fn clear_loss(
    tape: &mut Tape,
    model: &Model,
    batch: &Batch,
    labels: &[usize],
    masks: &[RoutingMask],
    targets: Option<&Tensor>,
    lambda: f64,
) -> Result<StepGraph> {
    let fwd = model.forward(tape, batch, masks, true)?;
    let b = batch.batch_size as f64;
    let ce = tape.cross_entropy(fwd.logits, labels)?;
    let ce_sum = tape.sum(ce)?;
    let mut total = tape.scale(ce_sum, 1.0 / b)?;
    let mut consistency = None;
    if let Some(t) = targets.filter(|_| lambda > 0.0) {
        let sc = tape.soft_cross_entropy(fwd.logits, t)?;
        let sc_sum = tape.sum(sc)?;
        let term = tape.scale(sc_sum, lambda / b)?;
        total = tape.add(total, term)?;
        consistency = Some(sc);
    }
    Ok(StepGraph { total, ce, consistency, logits: fwd.logits, params: fwd.params })
}

struct StepOutput {
    ce: Vec<f64>,
    consistency: Vec<f64>,
    probs: Vec<Vec<f64>>,
}

/// One optimizer update of the trainable parameters.
#[allow(clippy::too_many_arguments)]
fn train_step(
    model: &mut Model,
    adam: &mut Adam,
    trainable: &[bool],
    batch: &Batch,
    labels: &[usize],
    masks: &[RoutingMask],
    targets: Option<&Tensor>,
    lambda: f64,
) -> Result<StepOutput> {
    let mut tape = Tape::new();
    let g = clear_loss(&mut tape, model, batch, labels, masks, targets, lambda)?;
    let ce = tape.value(g.ce).data().to_vec();
    let consistency = g.consistency.map(|v| tape.value(v).data().to_vec()).unwrap_or_default();
    let probs = softmax_rows(tape.value(g.logits));
    let mut grads = tape.backward(g.total)?;
    let grads: Vec<Option<Tensor>> =
        g.params.iter().zip(trainable).map(|(&v, &t)| if t { grads.take(v) } else { None }).collect();
    let updates = model
        .params_mut()
        .iter_mut()
        .zip(&grads)
        .enumerate()
        .filter_map(|(i, (p, g))| g.as_ref().map(|g| (i, &mut p.value, g)));
    adam.step(updates);
    Ok(StepOutput { ce, consistency, probs })
}

fn softmax_rows(logits: &Tensor) -> Vec<Vec<f64>> {
    let c = *logits.shape().last().expect("rank 2 logits");
    logits
        .data()
        .chunks(c)
        .map(|r| {
            let mut p = r.to_vec();
            softmax_in_place(&mut p);
            p
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SubsetStats {
    pub count: usize,
    /// Percent of samples whose prediction equals the given label.
    pub accuracy: f64,
    pub loss: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Memorization {
    pub clean: SubsetStats,
    pub noisy: SubsetStats,
}

/// Per-sample loss and correctness against given labels under the
/// evaluation mask.
fn evaluate(model: &Model, data: &[LabeledExample], policy: &RoutingPolicy, seed: u64, epoch: usize, chunk: usize) -> Result<Vec<(f64, bool)>> {
    let layers = model.num_layers();
    let mut out = Vec::with_capacity(data.len());
    for part in data.chunks(chunk) {
        let refs: Vec<&LabeledExample> = part.iter().collect();
        let masks: Vec<RoutingMask> = part
            .iter()
            .map(|e| inference_mask(layers, policy, &mut substream(seed, epoch, e.id, StreamTag::Eval)))
            .collect();
        let batch = Batch::from_examples(&refs, model.config().max_seq_len);
        let probs = model.predict_proba(&batch, &masks)?;
        for (e, p) in part.iter().zip(probs) {
            let pred = crate::data::argmax(&p);
            out.push((-p[e.given_label].max(f64::MIN_POSITIVE).ln(), pred == e.given_label));
        }
    }
    Ok(out)
}

fn subset(rows: impl Iterator<Item = (f64, bool)>) -> SubsetStats {
    let (mut n, mut hits, mut loss) = (0usize, 0usize, 0.0);
    for (l, ok) in rows {
        n += 1;
        hits += usize::from(ok);
        loss += l;
    }
    if n == 0 {
        return SubsetStats::default();
    }
    SubsetStats { count: n, accuracy: 100.0 * hits as f64 / n as f64, loss: loss / n as f64 }
}

/// Accuracy and mean loss against the given labels, split by the hidden
/// corruption flag.
pub fn memorization_report(model: &Model, train: &Dataset, policy: &RoutingPolicy, seed: u64, epoch: usize) -> Result<Memorization> {
    let rows = evaluate(model, &train.examples, policy, seed, epoch, 32)?;
    let flags = train.examples.iter().map(|e| e.corrupted);
    let paired: Vec<((f64, bool), bool)> = rows.into_iter().zip(flags).collect();
    Ok(Memorization {
        clean: subset(paired.iter().filter(|(_, c)| !c).map(|(r, _)| *r)),
        noisy: subset(paired.iter().filter(|(_, c)| *c).map(|(r, _)| *r)),
    })
}

/// Area under the ROC curve for ranking clean samples above corrupted ones
/// by `score`; ties count one half. `None` when either class is absent.
pub fn clean_auc(score: &[f64], corrupted: &[bool]) -> Option<f64> {
    let mut idx: Vec<usize> = (0..score.len()).collect();
    idx.sort_by(|&a, &b| score[a].total_cmp(&score[b]));
    let (mut rank_sum, mut i) = (0.0, 0);
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && score[idx[j + 1]] == score[idx[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += (i..=j).filter(|&k| !corrupted[idx[k]]).count() as f64 * avg_rank;
        i = j + 1;
    }
    let n_clean = corrupted.iter().filter(|&&c| !c).count() as f64;
    let n_noisy = corrupted.len() as f64 - n_clean;
    if n_clean == 0.0 || n_noisy == 0.0 {
        return None;
    }
    Some((rank_sum - n_clean * (n_clean + 1.0) / 2.0) / (n_clean * n_noisy))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmRecord {
    /// `None` when the losses were degenerate and every sample got p = 0.5.
    pub components: Option<[Component; 2]>,
    pub converged: bool,
    pub iterations: usize,
    /// Epoch whose cached losses were fitted.
    pub fitted_on_epoch: usize,
    pub clean_auc: Option<f64>,
    pub mean_p_clean: f64,
    pub mean_p_noisy: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RoutingStats {
    pub mean_active: f64,
    pub mean_active_clean: f64,
    pub mean_active_noisy: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForwardCounts {
    /// Per-sample forwards that produced gradients.
    pub training: usize,
    /// Per-sample forwards spent on ensemble targets.
    pub ensemble: usize,
    /// Per-sample forwards spent on evaluation and memorization reports.
    pub eval: usize,
    /// Per-sample forwards spent on mixture fitting; always zero because the
    /// fit reads the loss cache.
    pub gmm: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub routed: bool,
    pub train_ce: f64,
    pub train_consistency: Option<f64>,
    pub test_accuracy: f64,
    pub test_loss: f64,
    pub memorization: Memorization,
    pub routing: Option<RoutingStats>,
    pub gmm: Option<GmmRecord>,
    pub forwards: ForwardCounts,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub epochs: usize,
    pub peak_accuracy: f64,
    pub average_accuracy: f64,
    pub window: usize,
    pub final_clean_accuracy: f64,
    pub final_noisy_accuracy: f64,
    pub base_checksum_before: u64,
    pub base_checksum_after: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub epochs: Vec<EpochRecord>,
    pub summary: Summary,
}

/// Max and last-`window` mean of a percent accuracy sequence.
pub fn peak_and_average(accuracy: &[f64], window: usize) -> (f64, f64) {
    let peak = accuracy.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let k = window.min(accuracy.len()).max(1);
    let tail = &accuracy[accuracy.len() - k..];
    (peak, tail.iter().sum::<f64>() / k as f64)
}

/// Runs the whole schedule on `model`, calling `sink` after every epoch so
/// partial progress survives an error.
pub fn train(
    model: &mut Model,
    train: &Dataset,
    test: &Dataset,
    setup: &TrainSetup,
    sink: &mut dyn FnMut(&EpochRecord),
) -> Result<RunMetrics> {
    let cfg = &setup.train;
    cfg.validate()?;
    setup.routing.validate()?;
    if train.is_empty() {
        return Err(TrainError::EmptyTrain);
    }
    let n = train.len();
    let layers = model.num_layers();
    let warmup = cfg.effective_warmup();
    let checksum_before = model.base_checksum();
    let mut trainable = vec![false; model.params().len()];
    for i in model.trainable_parameters() {
        trainable[i] = true;
    }
    let mut adam = Adam::new(cfg.adam());
    let mut cache: Option<LossCache> = None;
    let mut history: std::collections::VecDeque<Vec<Vec<f64>>> = Default::default();
    let mut records = Vec::with_capacity(cfg.epochs);
    let corrupted: Vec<bool> = train.examples.iter().map(|e| e.corrupted).collect();
    let on = RoutingMask::all(layers, true);

    for epoch in 1..=cfg.epochs {
        let routed = epoch > warmup;
        let mut forwards = ForwardCounts::default();

        let (clean_prob, gmm_record) = if routed {
            let prev = cache.as_ref().ok_or(TrainError::MissingSnapshot { epoch, warmup })?;
            let (p, rec) = fit_clean_probabilities(prev, &corrupted, &setup.gmm);
            (p, Some(rec))
        } else {
            (vec![1.0; n], None)
        };

        let targets: Option<Vec<Vec<f64>>> = if routed && cfg.lambda > 0.0 {
            match cfg.ensemble {
                EnsembleMode::Faithful => {
                    let buf = ensemble_predict(
                        model,
                        &train.examples,
                        &clean_prob,
                        &setup.routing,
                        cfg.ensemble_forwards,
                        cfg.seed,
                        epoch,
                        cfg.eval_batch_size,
                    )?;
                    forwards.ensemble += n * cfg.ensemble_forwards;
                    Some((0..n).map(|i| buf.mean(i)).collect())
                }
                EnsembleMode::Cached => Some(
                    (0..n)
                        .map(|i| {
                            let buf = PredictionBuffer {
                                epoch,
                                members: vec![history.iter().map(|h| h[i].clone()).collect()],
                            };
                            buf.mean(0)
                        })
                        .collect(),
                ),
            }
        } else {
            None
        };

        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut substream(cfg.seed, epoch, u64::MAX, StreamTag::Train));
        let mut losses = LossCache::new(epoch, n);
        let mut epoch_probs = vec![Vec::new(); n];
        let (mut ce_sum, mut cons_sum) = (0.0, 0.0);
        let (mut active, mut active_clean, mut active_noisy) = (0usize, 0usize, 0usize);
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let refs: Vec<&LabeledExample> = idx.iter().map(|&i| &train.examples[i]).collect();
            let labels: Vec<usize> = refs.iter().map(|e| e.given_label).collect();
            let masks: Vec<RoutingMask> = if routed {
                idx.iter()
                    .map(|&i| {
                        let mut rng = substream(cfg.seed, epoch, train.examples[i].id, StreamTag::Train);
                        sample_mask(clean_prob[i], layers, &setup.routing, &mut rng)
                    })
                    .collect::<std::result::Result<_, _>>()?
            } else {
                vec![on.clone(); idx.len()]
            };
            for (&i, m) in idx.iter().zip(&masks) {
                let a = m.active_count();
                active += a;
                if corrupted[i] {
                    active_noisy += a;
                } else {
                    active_clean += a;
                }
            }
            let target_tensor = match &targets {
                Some(t) => {
                    let c = t[0].len();
                    let data: Vec<f64> = idx.iter().flat_map(|&i| t[i].iter().copied()).collect();
                    Some(Tensor::new(&[idx.len(), c], data)?)
                }
                None => None,
            };
            let batch = Batch::from_examples(&refs, model.config().max_seq_len);
            let out = match train_step(model, &mut adam, &trainable, &batch, &labels, &masks, target_tensor.as_ref(), cfg.lambda) {
                Err(TrainError::Model(ModelError::Autodiff(crate::autodiff::AutodiffError::NumericFault { .. }))) => {
                    return Err(TrainError::NonFinite { epoch, step });
                }
                other => other?,
            };
            forwards.training += idx.len();
            for ((&i, l), p) in idx.iter().zip(&out.ce).zip(out.probs) {
                losses.losses[i] = *l;
                epoch_probs[i] = p;
            }
            ce_sum += out.ce.iter().sum::<f64>();
            cons_sum += out.consistency.iter().sum::<f64>();
        }
        if !ce_sum.is_finite() {
            return Err(TrainError::NonFinite { epoch, step: 0 });
        }
        cache = Some(losses);
        history.push_back(epoch_probs);
        while history.len() > cfg.ensemble_forwards {
            history.pop_front();
        }

        let test_rows = evaluate(model, &test.examples, &setup.routing, cfg.seed, epoch, cfg.eval_batch_size)?;
        let test_stats = subset(test_rows.into_iter());
        let memorization = memorization_report(model, train, &setup.routing, cfg.seed, epoch)?;
        forwards.eval += test.len() + n;

        let n_noisy = corrupted.iter().filter(|&&c| c).count();
        let per = |a: usize, k: usize| if k == 0 { 0.0 } else { a as f64 / k as f64 };
        let record = EpochRecord {
            epoch,
            routed,
            train_ce: ce_sum / n as f64,
            train_consistency: targets.as_ref().map(|_| cons_sum / n as f64),
            test_accuracy: test_stats.accuracy,
            test_loss: test_stats.loss,
            memorization,
            routing: routed.then(|| RoutingStats {
                mean_active: per(active, n),
                mean_active_clean: per(active_clean, n - n_noisy),
                mean_active_noisy: per(active_noisy, n_noisy),
            }),
            gmm: gmm_record,
            forwards,
        };
        sink(&record);
        records.push(record);
    }

    let acc: Vec<f64> = records.iter().map(|r| r.test_accuracy).collect();
    let (peak, average) = peak_and_average(&acc, cfg.avg_window);
    let last = records.last().expect("at least one epoch");
    let summary = Summary {
        epochs: cfg.epochs,
        peak_accuracy: peak,
        average_accuracy: average,
        window: cfg.avg_window.min(cfg.epochs),
        final_clean_accuracy: last.memorization.clean.accuracy,
        final_noisy_accuracy: last.memorization.noisy.accuracy,
        base_checksum_before: checksum_before,
        base_checksum_after: model.base_checksum(),
    };
    Ok(RunMetrics { epochs: records, summary })
}

fn fit_clean_probabilities(cache: &LossCache, corrupted: &[bool], config: &GmmConfig) -> (Vec<f64>, GmmRecord) {
    let fit = fit_em(&cache.losses, config).ok();
    let p: Vec<f64> = match &fit {
        Some(f) => cache.losses.iter().map(|&l| f.clean_posterior(l)).collect(),
        None => vec![0.5; cache.len()],
    };
    let mean_where = |want: bool| {
        let v: Vec<f64> = p.iter().zip(corrupted).filter(|(_, &c)| c == want).map(|(&x, _)| x).collect();
        if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 }
    };
    let record = GmmRecord {
        components: fit.as_ref().map(|f| f.components),
        converged: fit.as_ref().is_some_and(|f| f.converged),
        iterations: fit.as_ref().map_or(0, |f| f.iterations),
        fitted_on_epoch: cache.epoch,
        clean_auc: clean_auc(&p, corrupted),
        mean_p_clean: mean_where(false),
        mean_p_noisy: mean_where(true),
    };
    (p, record)
}

#[derive(Serialize)]
#[serde(tag = "record", rename_all = "lowercase")]
enum Line<'a, C: Serialize> {
    Config { schema: u32, config: &'a C },
    Epoch(&'a EpochRecord),
    Summary(&'a Summary),
}

/// JSON line announcing the resolved config of a run.
pub fn config_line<C: Serialize>(config: &C) -> String {
    serde_json::to_string(&Line::Config { schema: METRICS_SCHEMA, config }).expect("serializable config")
}

pub fn epoch_line(record: &EpochRecord) -> String {
    serde_json::to_string(&Line::<()>::Epoch(record)).expect("serializable record")
}

pub fn summary_line(summary: &Summary) -> String {
    serde_json::to_string(&Line::<()>::Summary(summary)).expect("serializable record")
}
