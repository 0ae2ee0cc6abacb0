//! Turns clean probabilities into per-layer routing masks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::RoutingMask;

#[derive(Debug, Error, PartialEq)]
pub enum RouterError {
    #[error("clean probability {0} outside [0, 1]")]
    Probability(f64),
    #[error("gamma {0} outside [0, 1]")]
    Gamma(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Each layer on with probability `γ·p`.
    Clean,
    /// All layers on when `p ≥ threshold`, else all off.
    Deterministic,
    /// Each layer on with probability 1/2.
    Random,
    /// Each layer on with probability `γ·(1 − p)`.
    Noisy,
    AlwaysOn,
    AlwaysOff,
}

impl Strategy {
    pub const ALL: [Strategy; 6] =
        [Self::Clean, Self::Deterministic, Self::Random, Self::Noisy, Self::AlwaysOn, Self::AlwaysOff];

    pub fn name(self) -> &'static str {
        match self {
            Self::Clean => "clean",
            Self::Deterministic => "deterministic",
            Self::Random => "random",
            Self::Noisy => "noisy",
            Self::AlwaysOn => "always_on",
            Self::AlwaysOff => "always_off",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoutingPolicy {
    pub strategy: Strategy,
    pub gamma: f64,
    pub threshold: f64,
    /// Activation probability used at evaluation time.
    pub eval_gamma: f64,
}

impl Default for RoutingPolicy {
    fn default() -> Self {
        Self { strategy: Strategy::Clean, gamma: 1.0, threshold: 0.5, eval_gamma: 1.0 }
    }
}

impl RoutingPolicy {
    pub fn validate(&self) -> Result<(), RouterError> {
        for g in [self.gamma, self.eval_gamma] {
            if !(0.0..=1.0).contains(&g) {
                return Err(RouterError::Gamma(g));
            }
        }
        Ok(())
    }

    /// Per-layer activation probability for clean probability `p`; `None` for
    /// the deterministic strategy, whose layers are not independent.
    pub fn activation_probability(&self, p: f64) -> Option<f64> {
        match self.strategy {
            Strategy::Clean => Some(self.gamma * p),
            Strategy::Noisy => Some(self.gamma * (1.0 - p)),
            Strategy::Random => Some(0.5),
            Strategy::AlwaysOn => Some(1.0),
            Strategy::AlwaysOff => Some(0.0),
            Strategy::Deterministic => None,
        }
    }
}

/// Draws one mask of `layers` decisions for a sample with clean probability `p`.
pub fn sample_mask(p: f64, layers: usize, policy: &RoutingPolicy, rng: &mut impl Rng) -> Result<RoutingMask, RouterError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(RouterError::Probability(p));
    }
    policy.validate()?;
    let active = match policy.activation_probability(p) {
        Some(prob) => (0..layers).map(|_| rng.random::<f64>() < prob).collect(),
        None => vec![p >= policy.threshold; layers],
    };
    Ok(RoutingMask::new(active))
}

/// Evaluation mask: each layer on with probability `eval_gamma`, which is 1
/// by default and then needs no randomness.
pub fn inference_mask(layers: usize, policy: &RoutingPolicy, rng: &mut impl Rng) -> RoutingMask {
    if policy.eval_gamma >= 1.0 {
        return RoutingMask::all(layers, true);
    }
    RoutingMask::new((0..layers).map(|_| rng.random::<f64>() < policy.eval_gamma).collect())
}

/// Purpose of a random substream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StreamTag {
    /// Routing mask for the training forward.
    Train,
    /// Routing mask for ensemble member `k`.
    Ensemble(usize),
    /// Evaluation-time routing.
    Eval,
}

impl StreamTag {
    fn code(self) -> u64 {
        match self {
            Self::Train => 0,
            Self::Eval => 1,
            Self::Ensemble(k) => 2 + k as u64,
        }
    }
}

/// Independent generator keyed by `(seed, epoch, sample id, purpose)`, so
/// masks do not depend on batch composition or order.
pub fn substream(seed: u64, epoch: usize, sample_id: u64, tag: StreamTag) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(epoch as u64).to_le_bytes());
    key[16..24].copy_from_slice(&sample_id.to_le_bytes());
    key[24..].copy_from_slice(&tag.code().to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, proptest, ProptestConfig};

    fn policy(strategy: Strategy, gamma: f64) -> RoutingPolicy {
        RoutingPolicy { strategy, gamma, ..RoutingPolicy::default() }
    }

    #[test]
    fn gamma_zero_and_certain_probabilities() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for p in [0.0, 0.3, 1.0] {
            let m = sample_mask(p, 12, &policy(Strategy::Clean, 0.0), &mut rng).unwrap();
            assert_eq!(m.active_count(), 0);
        }
        let m = sample_mask(1.0, 12, &policy(Strategy::Clean, 1.0), &mut rng).unwrap();
        assert_eq!(m.active_count(), 12);
    }

    #[test]
    fn out_of_range_inputs_are_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_mask(1.2, 3, &RoutingPolicy::default(), &mut rng).unwrap_err(), RouterError::Probability(1.2));
        assert_eq!(sample_mask(0.5, 3, &policy(Strategy::Clean, 1.5), &mut rng).unwrap_err(), RouterError::Gamma(1.5));
    }

    #[test]
    fn deterministic_masks_are_all_or_nothing() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pol = policy(Strategy::Deterministic, 1.0);
        assert_eq!(sample_mask(0.5, 4, &pol, &mut rng).unwrap().active_count(), 4);
        assert_eq!(sample_mask(0.49, 4, &pol, &mut rng).unwrap().active_count(), 0);
    }

    #[test]
    fn constant_strategies() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(sample_mask(0.0, 5, &policy(Strategy::AlwaysOn, 0.2), &mut rng).unwrap().active_count(), 5);
        assert_eq!(sample_mask(1.0, 5, &policy(Strategy::AlwaysOff, 1.0), &mut rng).unwrap().active_count(), 0);
    }

    #[test]
    fn noisy_strategy_mean_tracks_one_minus_p() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pol = policy(Strategy::Noisy, 1.0);
        let total: usize = (0..20_000).map(|_| sample_mask(0.2, 10, &pol, &mut rng).unwrap().active_count()).sum();
        assert!((total as f64 / 20_000.0 - 8.0).abs() < 0.05);
    }

    #[test]
    fn inference_mask_defaults_to_all_on() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(inference_mask(12, &RoutingPolicy::default(), &mut rng), RoutingMask::all(12, true));
        let half = RoutingPolicy { eval_gamma: 0.5, ..RoutingPolicy::default() };
        let draws: Vec<RoutingMask> = (0..20).map(|_| inference_mask(12, &half, &mut rng)).collect();
        assert!(draws.windows(2).any(|w| w[0] != w[1]));
    }

    #[test]
    fn substreams_are_keyed_and_reproducible() {
        let a: u64 = substream(1, 2, 3, StreamTag::Train).random();
        assert_eq!(a, substream(1, 2, 3, StreamTag::Train).random::<u64>());
        assert_ne!(a, substream(1, 2, 4, StreamTag::Train).random::<u64>());
        assert_ne!(a, substream(1, 3, 3, StreamTag::Train).random::<u64>());
        assert_ne!(a, substream(1, 2, 3, StreamTag::Ensemble(0)).random::<u64>());
        assert_ne!(a, substream(2, 2, 3, StreamTag::Train).random::<u64>());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn expected_activity_is_monotone_in_p(p in 0.0f64..0.9, dp in 0.1f64..0.3, seed in 0u64..1000) {
            let q = (p + dp).min(1.0);
            let count = |pp: f64, strat| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..4000).map(|_| sample_mask(pp, 10, &policy(strat, 1.0), &mut rng).unwrap().active_count()).sum::<usize>()
            };
            // shared random numbers make the comparison pathwise
            prop_assert!(count(q, Strategy::Clean) >= count(p, Strategy::Clean));
            prop_assert!(count(q, Strategy::Noisy) <= count(p, Strategy::Noisy));
        }
    }
}
