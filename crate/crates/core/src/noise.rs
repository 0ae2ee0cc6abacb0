//! Label corruption: class-conditional transition matrices and
//! instance-dependent flips driven by a probe classifier's confidence margin.
//!
//! A symmetric `rate` is the expected fraction of corrupted labels, so the
//! diagonal holds `1 - rate` and the rest is spread over the other classes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{ClassProbabilities, Dataset, SplitTag};

#[derive(Debug, Error, PartialEq)]
pub enum NoiseError {
    #[error("{kind:?} noise rate {rate} outside [0, {max})")]
    InvalidRate { kind: NoiseKind, rate: f64, max: f64 },
    #[error("noise may only be applied to training data, got the {0:?} split")]
    NotTrainSplit(SplitTag),
    #[error("transition matrix is {matrix}×{matrix} but the dataset has {classes} classes")]
    ClassCount { matrix: usize, classes: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("target rate {target} unreachable; at most {max:.4} of samples can be flipped")]
    Unreachable { target: f64, max: f64 },
    #[error("probe returned {got} distributions for {expected} samples")]
    ProbeOutput { expected: usize, got: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Symmetric,
    Asymmetric,
    #[serde(alias = "instance_dependent")]
    Instance,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub rate: f64,
    pub seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self { kind: NoiseKind::Symmetric, rate: 0.6, seed: 0 }
    }
}

impl NoiseSpec {
    /// Exclusive upper bound on `rate` for `classes` classes.
    pub fn max_rate(kind: NoiseKind, classes: usize) -> f64 {
        match kind {
            NoiseKind::Symmetric => (classes as f64 - 1.0) / classes as f64,
            NoiseKind::Asymmetric | NoiseKind::Instance => 1.0,
        }
    }

    pub fn validate(&self, classes: usize) -> Result<(), NoiseError> {
        check_rate(self.kind, self.rate, classes)
    }
}

fn check_rate(kind: NoiseKind, rate: f64, classes: usize) -> Result<(), NoiseError> {
    let max = NoiseSpec::max_rate(kind, classes);
    if rate.is_finite() && (0.0..max).contains(&rate) {
        Ok(())
    } else {
        Err(NoiseError::InvalidRate { kind, rate, max })
    }
}

/// Row-stochastic `C×C` matrix; row `i` is the distribution of the given
/// label for true class `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionMatrix {
    rows: Vec<Vec<f64>>,
}

impl TransitionMatrix {
    pub fn identity(classes: usize) -> Self {
        let rows = (0..classes).map(|i| (0..classes).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
        Self { rows }
    }

    pub fn classes(&self) -> usize {
        self.rows.len()
    }

    pub fn get(&self, from: usize, to: usize) -> f64 {
        self.rows[from][to]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[i]
    }

    pub fn is_row_stochastic(&self, tol: f64) -> bool {
        self.rows.iter().all(|r| r.iter().all(|&x| x >= 0.0) && (r.iter().sum::<f64>() - 1.0).abs() <= tol)
    }
}

pub fn build_symmetric(classes: usize, rate: f64) -> Result<TransitionMatrix, NoiseError> {
    check_rate(NoiseKind::Symmetric, rate, classes)?;
    let off = rate / (classes as f64 - 1.0);
    let rows = (0..classes).map(|i| (0..classes).map(|j| if i == j { 1.0 - rate } else { off }).collect()).collect();
    Ok(TransitionMatrix { rows })
}

/// Single-flip noise: class `i` goes to `(i + 1) mod C` with probability `rate`.
pub fn build_asymmetric(classes: usize, rate: f64) -> Result<TransitionMatrix, NoiseError> {
    check_rate(NoiseKind::Asymmetric, rate, classes)?;
    let mut m = TransitionMatrix::identity(classes);
    if rate > 0.0 {
        for i in 0..classes {
            m.rows[i][i] = 1.0 - rate;
            m.rows[i][(i + 1) % classes] = rate;
        }
    }
    Ok(m)
}

fn require_train(dataset: &Dataset) -> Result<(), NoiseError> {
    match dataset.split {
        SplitTag::Val | SplitTag::Test => Err(NoiseError::NotTrainSplit(dataset.split)),
        SplitTag::Train | SplitTag::Unsplit => Ok(()),
    }
}

/// Draws each given label from `T[true_label]`.
pub fn apply_matrix_noise(dataset: &Dataset, t: &TransitionMatrix, seed: u64) -> Result<Dataset, NoiseError> {
    require_train(dataset)?;
    if t.classes() != dataset.num_classes {
        return Err(NoiseError::ClassCount { matrix: t.classes(), classes: dataset.num_classes });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = dataset.clone();
    for ex in &mut out.examples {
        if ex.true_label >= t.classes() {
            return Err(NoiseError::LabelOutOfRange { label: ex.true_label, classes: t.classes() });
        }
        let u: f64 = rng.random();
        let row = t.row(ex.true_label);
        let mut acc = 0.0;
        let mut label = row.len() - 1;
        for (j, &p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                label = j;
                break;
            }
        }
        // guard against the tail of a row that sums to slightly under 1
        if row[label] == 0.0 {
            label = ex.true_label;
        }
        ex.relabel(label);
    }
    Ok(out)
}

/// Flip score from the probe's top two probabilities: `-(f_u - f_s)² / 2 + 1/2`.
pub fn tau(f_u: f64, f_s: f64) -> f64 {
    -0.5 * (f_u - f_s).powi(2) + 0.5
}

/// Expected corrupted fraction when sample `i` flips with `min(c·τ_i, 1)`.
pub fn expected_rate(taus: &[f64], c: f64) -> f64 {
    taus.iter().map(|&t| (c * t).min(1.0)).sum::<f64>() / taus.len().max(1) as f64
}

/// Largest reachable expected rate: every sample with `τ > 0` flipped surely.
pub fn max_instance_rate(taus: &[f64]) -> f64 {
    taus.iter().filter(|&&t| t > 0.0).count() as f64 / taus.len().max(1) as f64
}

/// Bisection on the monotone map `c ↦ expected_rate(taus, c)`.
pub fn calibrate_c(taus: &[f64], target: f64) -> Result<f64, NoiseError> {
    if target == 0.0 {
        return Ok(0.0);
    }
    let max = max_instance_rate(taus);
    if target >= max {
        return Err(NoiseError::Unreachable { target, max });
    }
    let mut hi = 1.0;
    while expected_rate(taus, hi) < target {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if expected_rate(taus, mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-12 * hi {
            break;
        }
    }
    Ok(hi)
}

#[derive(Clone, Debug)]
pub struct InstanceNoise {
    pub dataset: Dataset,
    pub c: f64,
    /// Per-sample flip probability `min(c·τ, 1)`, in dataset order.
    pub flip_prob: Vec<f64>,
    /// Per-sample top-two probability margin of the probe.
    pub margin: Vec<f64>,
}

/// Instance-dependent noise. The probe's most and second most confident
/// classes give `τ`; a sample flips with probability `min(c·τ, 1)` to the
/// most confident class other than its true label, which is the second
/// choice whenever the probe is right. `c` is calibrated so the expected
/// corrupted fraction equals `target`.
pub fn apply_instance_noise(
    dataset: &Dataset,
    probe: &dyn ClassProbabilities,
    target: f64,
    seed: u64,
) -> Result<InstanceNoise, NoiseError> {
    require_train(dataset)?;
    check_rate(NoiseKind::Instance, target, dataset.num_classes)?;
    let probs = probe.class_probabilities(&dataset.examples);
    if probs.len() != dataset.len() {
        return Err(NoiseError::ProbeOutput { expected: dataset.len(), got: probs.len() });
    }
    let mut taus = Vec::with_capacity(probs.len());
    let mut margin = Vec::with_capacity(probs.len());
    let mut flip_to = Vec::with_capacity(probs.len());
    for (ex, p) in dataset.examples.iter().zip(&probs) {
        let mut order: Vec<usize> = (0..p.len()).collect();
        order.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
        let (u, s) = (order[0], order[1]);
        taus.push(tau(p[u], p[s]));
        margin.push(p[u] - p[s]);
        flip_to.push(*order.iter().find(|&&k| k != ex.true_label).expect("at least two classes"));
    }
    let c = calibrate_c(&taus, target)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = dataset.clone();
    let mut flip_prob = Vec::with_capacity(taus.len());
    for ((ex, &t), &to) in out.examples.iter_mut().zip(&taus).zip(&flip_to) {
        let prob = (c * t).min(1.0);
        flip_prob.push(prob);
        let label = if rng.random::<f64>() < prob { to } else { ex.true_label };
        ex.relabel(label);
    }
    Ok(InstanceNoise { dataset: out, c, flip_prob, margin })
}
