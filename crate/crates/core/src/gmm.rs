//! Two-component 1-D Gaussian mixture over per-sample training losses.
//! The smaller-mean component is read as "clean".

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GmmError {
    #[error("need at least {min} losses, got {got}")]
    TooFew { min: usize, got: usize },
    #[error("all losses lie within {spread:e} of each other")]
    Degenerate { spread: f64 },
    #[error("loss {value} at index {index} is not a finite non-negative number")]
    BadLoss { index: usize, value: f64 },
}

pub const MIN_SAMPLES: usize = 4;
/// Lower bound on each component's standard deviation.
pub const STD_FLOOR: f64 = 1e-4;
const DEGENERATE_SPREAD: f64 = 1e-9;

/// Per-sample training losses from one epoch, indexed by position in the
/// training set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossCache {
    pub epoch: usize,
    pub losses: Vec<f64>,
}

impl LossCache {
    pub fn new(epoch: usize, n: usize) -> Self {
        Self { epoch, losses: vec![f64::NAN; n] }
    }

    pub fn len(&self) -> usize {
        self.losses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.losses.is_empty()
    }

    /// Whether every slot holds a recorded loss.
    pub fn is_complete(&self) -> bool {
        self.losses.iter().all(|l| l.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub weight: f64,
    pub mean: f64,
    pub std: f64,
}

impl Component {
    fn density(&self, x: f64) -> f64 {
        let z = (x - self.mean) / self.std;
        self.weight * (-0.5 * z * z).exp() / (self.std * (2.0 * std::f64::consts::PI).sqrt())
    }

    fn log_density(&self, x: f64) -> f64 {
        let z = (x - self.mean) / self.std;
        self.weight.ln() - 0.5 * z * z - self.std.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GmmConfig {
    pub max_iter: usize,
    pub tol: f64,
    /// Min-max scale losses to [0, 1] before fitting.
    pub normalize: bool,
}

impl Default for GmmConfig {
    fn default() -> Self {
        Self { max_iter: 100, tol: 1e-6, normalize: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmmFit {
    /// `components[0].mean <= components[1].mean`.
    pub components: [Component; 2],
    pub converged: bool,
    pub iterations: usize,
    /// Total log-likelihood after initialization and after every EM step.
    pub log_likelihood: Vec<f64>,
    /// Affine map applied to raw losses before evaluating the mixture.
    pub shift: f64,
    pub scale: f64,
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn log_likelihood(xs: &[f64], c: &[Component; 2]) -> f64 {
    xs.iter()
        .map(|&x| {
            let (a, b) = (c[0].log_density(x), c[1].log_density(x));
            let m = a.max(b);
            m + ((a - m).exp() + (b - m).exp()).ln()
        })
        .sum()
}

/// Responsibility of component 0 for `x`, computed in log space.
fn responsibility(c: &[Component; 2], x: f64) -> f64 {
    let (a, b) = (c[0].log_density(x), c[1].log_density(x));
    1.0 / (1.0 + (b - a).exp())
}

/// EM from 25th/75th-percentile means, equal weights and a shared std.
pub fn fit_em(losses: &[f64], config: &GmmConfig) -> Result<GmmFit, GmmError> {
    if losses.len() < MIN_SAMPLES {
        return Err(GmmError::TooFew { min: MIN_SAMPLES, got: losses.len() });
    }
    if let Some((index, &value)) = losses.iter().enumerate().find(|(_, l)| !l.is_finite() || **l < 0.0) {
        return Err(GmmError::BadLoss { index, value });
    }
    let mut sorted = losses.to_vec();
    sorted.sort_by(f64::total_cmp);
    let (min, max) = (sorted[0], sorted[sorted.len() - 1]);
    if max - min <= DEGENERATE_SPREAD {
        return Err(GmmError::Degenerate { spread: max - min });
    }
    let (shift, scale) = if config.normalize { (min, max - min) } else { (0.0, 1.0) };
    let xs: Vec<f64> = losses.iter().map(|&l| (l - shift) / scale).collect();
    let sorted: Vec<f64> = sorted.iter().map(|&l| (l - shift) / scale).collect();

    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let std0 = var.sqrt().max(STD_FLOOR);
    let mut comps = [
        Component { weight: 0.5, mean: percentile(&sorted, 0.25), std: std0 },
        Component { weight: 0.5, mean: percentile(&sorted, 0.75), std: std0 },
    ];
    let mut history = vec![log_likelihood(&xs, &comps)];
    let mut converged = false;
    let mut iterations = 0;
    for _ in 0..config.max_iter {
        iterations += 1;
        let resp: Vec<f64> = xs.iter().map(|&x| responsibility(&comps, x)).collect();
        let mut next = comps;
        for (k, comp) in next.iter_mut().enumerate() {
            let r: Vec<f64> = resp.iter().map(|&g| if k == 0 { g } else { 1.0 - g }).collect();
            let nk: f64 = r.iter().sum();
            if nk <= f64::MIN_POSITIVE {
                continue;
            }
            let mu = r.iter().zip(&xs).map(|(g, x)| g * x).sum::<f64>() / nk;
            let var = r.iter().zip(&xs).map(|(g, x)| g * (x - mu).powi(2)).sum::<f64>() / nk;
            *comp = Component { weight: nk / n, mean: mu, std: var.sqrt().max(STD_FLOOR) };
        }
        let w = next[0].weight + next[1].weight;
        next[0].weight /= w;
        next[1].weight = 1.0 - next[0].weight;
        comps = next;
        let ll = log_likelihood(&xs, &comps);
        let prev = *history.last().expect("initial entry");
        history.push(ll);
        if (ll - prev).abs() < config.tol {
            converged = true;
            break;
        }
    }
    if comps[0].mean > comps[1].mean {
        comps.swap(0, 1);
    }
    Ok(GmmFit { components: comps, converged, iterations, log_likelihood: history, shift, scale })
}

impl GmmFit {
    /// Posterior probability that `loss` came from the smaller-mean component.
    pub fn clean_posterior(&self, loss: f64) -> f64 {
        let x = (loss - self.shift) / self.scale;
        let p = responsibility(&self.components, x);
        if p.is_nan() {
            // both densities underflowed to the same log value only at ±inf
            0.5
        } else {
            p
        }
    }

    /// Weighted density of each component at `loss`, for diagnostics.
    pub fn densities(&self, loss: f64) -> [f64; 2] {
        let x = (loss - self.shift) / self.scale;
        [self.components[0].density(x), self.components[1].density(x)]
    }
}

/// Clean probability for every cached loss; `0.5` everywhere when the fit
/// is degenerate.
pub fn clean_probabilities(losses: &[f64], config: &GmmConfig) -> (Option<GmmFit>, Vec<f64>) {
    match fit_em(losses, config) {
        Ok(fit) => {
            let p = losses.iter().map(|&l| fit.clean_posterior(l)).collect();
            (Some(fit), p)
        }
        Err(_) => (None, vec![0.5; losses.len()]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn mixture(seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Normal::new(0.2f64, 0.05).unwrap();
        let b = Normal::new(2.5, 0.05).unwrap();
        let mut xs: Vec<f64> = (0..50).map(|_| a.sample(&mut rng).abs()).collect();
        xs.extend((0..50).map(|_| b.sample(&mut rng)));
        xs
    }

    fn fixed(w: f64, m0: f64, m1: f64, s: f64) -> GmmFit {
        GmmFit {
            components: [Component { weight: w, mean: m0, std: s }, Component { weight: 1.0 - w, mean: m1, std: s }],
            converged: true,
            iterations: 0,
            log_likelihood: vec![],
            shift: 0.0,
            scale: 1.0,
        }
    }

    #[test]
    fn recovers_separated_components() {
        let mut means = [0.0; 2];
        let seeds = 5;
        for seed in 0..seeds {
            let fit = fit_em(&mixture(seed), &GmmConfig::default()).unwrap();
            means[0] += fit.components[0].mean / seeds as f64;
            means[1] += fit.components[1].mean / seeds as f64;
            assert!((fit.components[0].weight - 0.5).abs() < 0.02);
            assert!((fit.components[0].weight + fit.components[1].weight - 1.0).abs() < 1e-9);
            assert!(fit.converged);
        }
        assert!((means[0] - 0.2).abs() < 0.01, "{means:?}");
        assert!((means[1] - 2.5).abs() < 0.125, "{means:?}");
    }

    #[test]
    fn log_likelihood_never_decreases() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = Normal::new(1.0f64, 0.7).unwrap();
            let xs: Vec<f64> = (0..80).map(|_| d.sample(&mut rng).abs()).collect();
            let fit = fit_em(&xs, &GmmConfig::default()).unwrap();
            for w in fit.log_likelihood.windows(2) {
                assert!(w[1] >= w[0] - 1e-9 * w[0].abs().max(1.0), "seed {seed}: {} -> {}", w[0], w[1]);
            }
        }
    }

    #[test]
    fn degenerate_and_tiny_inputs_are_rejected() {
        assert!(matches!(fit_em(&[0.3; 10], &GmmConfig::default()), Err(GmmError::Degenerate { .. })));
        assert_eq!(fit_em(&[0.1, 0.2, 0.3], &GmmConfig::default()).unwrap_err(), GmmError::TooFew { min: 4, got: 3 });
        assert!(matches!(fit_em(&[0.1, f64::NAN, 0.3, 0.4], &GmmConfig::default()), Err(GmmError::BadLoss { index: 1, .. })));
        let (fit, p) = clean_probabilities(&[0.3; 10], &GmmConfig::default());
        assert!(fit.is_none());
        assert!(p.iter().all(|&x| x == 0.5));
    }

    #[test]
    fn identical_components_give_one_half() {
        let fit = fixed(0.5, 1.0, 1.0, 0.3);
        for l in [0.0, 0.5, 1.0, 7.0] {
            assert_eq!(fit.clean_posterior(l), 0.5);
        }
    }

    #[test]
    fn posterior_separation_from_density_ratio() {
        let fit = fixed(0.5, 0.2, 2.5, 0.05);
        // direct ratio w0 N0 / (w0 N0 + w1 N1) with equal stds
        let direct = |x: f64| {
            let n = |m: f64| (-0.5 * ((x - m) / 0.05f64).powi(2)).exp();
            n(0.2) / (n(0.2) + n(2.5))
        };
        assert!(fit.clean_posterior(0.2) > 0.999);
        assert!(fit.clean_posterior(2.5) < 0.001);
        assert!((fit.clean_posterior(1.3) - direct(1.3)).abs() < 1e-12);
        // equal weights and stds cross at the midpoint
        assert!((fit.clean_posterior(1.35) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn normalization_toggle_preserves_ranking() {
        let xs = mixture(3);
        let raw = fit_em(&xs, &GmmConfig::default()).unwrap();
        let norm = fit_em(&xs, &GmmConfig { normalize: true, ..GmmConfig::default() }).unwrap();
        assert!(norm.components[1].mean <= 1.0 + 1e-9);
        for &x in &xs {
            assert_eq!(raw.clean_posterior(x) > 0.5, norm.clean_posterior(x) > 0.5);
        }
    }

    proptest! {
        #[test]
        fn posterior_is_a_probability_and_monotone_between_means(
            m0 in 0.0f64..2.0, gap in 0.1f64..3.0, s in 0.05f64..1.0, w in 0.05f64..0.95,
            a in 0.0f64..1.0, b in 0.0f64..1.0,
        ) {
            let fit = fixed(w, m0, m0 + gap, s);
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let (x, y) = (m0 + lo * gap, m0 + hi * gap);
            let (px, py) = (fit.clean_posterior(x), fit.clean_posterior(y));
            prop_assert!((0.0..=1.0).contains(&px));
            prop_assert!(py <= px + 1e-12);
            prop_assert_eq!(px + (1.0 - px), 1.0);
        }
    }
}
