//! End-to-end experiment: corpus, pretrained base, label noise, training.
//!
//! The corpus and pretrained base depend only on the config, so they are
//! built once by [`prepare`] and shared by every seed.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{load_tsv, split, synth_generate, DataError, Dataset, SplitFractions, SplitTag, SynthSpec};
use crate::gmm::GmmConfig;
use crate::model::{pretrain_base, BaseWeights, Model, ModelConfig, ModelError, PeftKind, PretrainConfig};
use crate::noise::{apply_instance_noise, apply_matrix_noise, build_asymmetric, build_symmetric, NoiseError, NoiseKind, NoiseSpec};
use crate::router::RoutingPolicy;
use crate::trainer::{train, EpochRecord, Method, RunMetrics, TrainConfig, TrainError, TrainSetup};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Noise(#[from] NoiseError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synth,
    Tsv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    pub synth: SynthSpec,
    /// Fraction of the synthetic corpus held out for testing.
    pub test_fraction: f64,
    pub split_seed: u64,
    pub train_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Synth,
            synth: SynthSpec::default(),
            test_fraction: 1.0 / 6.0,
            split_seed: 0,
            train_path: None,
            test_path: None,
        }
    }
}

/// Full-fine-tuning classifier used to score instances for
/// instance-dependent noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { epochs: 3, lr: 1e-3 }
    }
}

/// Complete description of an experiment. The model's vocabulary size,
/// sequence length and class count are taken from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub name: String,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub noise: NoiseSpec,
    pub probe: ProbeConfig,
    pub train: TrainConfig,
    pub routing: RoutingPolicy,
    pub gmm: GmmConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            seeds: vec![0],
            out: PathBuf::from("runs"),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            pretrain: PretrainConfig::default(),
            noise: NoiseSpec::default(),
            probe: ProbeConfig::default(),
            train: TrainConfig::default(),
            routing: RoutingPolicy::default(),
            gmm: GmmConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Checks everything that can be checked without loading data.
    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |field: &str, e: &dyn std::fmt::Display| ExperimentError::Config(format!("{field}: {e}"));
        if self.seeds.is_empty() {
            return Err(ExperimentError::Config("seeds: at least one seed is required".into()));
        }
        self.train.validate().map_err(|e| bad("train", &e))?;
        self.routing.validate().map_err(|e| bad("routing", &e))?;
        if !(0.0..1.0).contains(&self.noise.rate) {
            return Err(bad("noise.rate", &"must lie in [0, 1)"));
        }
        if self.data.source == DataSource::Tsv && self.data.train_path.is_none() {
            return Err(bad("data.train_path", &"required for tsv data"));
        }
        if self.data.source == DataSource::Synth && !(self.data.test_fraction > 0.0 && self.data.test_fraction < 1.0) {
            return Err(bad("data.test_fraction", &"must lie in (0, 1)"));
        }
        if !(self.gmm.tol > 0.0) {
            return Err(bad("gmm.tol", &"must be positive"));
        }
        Ok(())
    }
}

impl ExperimentConfig {
    /// Sets a dotted key such as `noise.rate` from its textual value. The
    /// text is read as the type the field already has; unknown keys are
    /// rejected with the list of valid ones.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<(), ExperimentError> {
        let mut root = serde_json::to_value(&*self).expect("config serializes");
        let mut node = &mut root;
        let parts: Vec<&str> = key.split('.').collect();
        for (depth, part) in parts.iter().enumerate() {
            let obj = match node {
                serde_json::Value::Object(map) => map,
                _ => return Err(ExperimentError::Config(format!("{key}: {} is not a section", parts[..depth].join(".")))),
            };
            if !obj.contains_key(*part) {
                let prefix = parts[..depth].iter().map(|p| format!("{p}.")).collect::<String>();
                let valid: Vec<String> = obj.keys().map(|k| format!("{prefix}{k}")).collect();
                return Err(ExperimentError::Config(format!("unknown key `{key}`; valid keys: {}", valid.join(", "))));
            }
            node = obj.get_mut(*part).expect("checked");
        }
        if node.is_object() {
            return Err(ExperimentError::Config(format!("{key} is a section, not a value")));
        }
        *node = coerce(node, raw).map_err(|e| ExperimentError::Config(format!("{key}: {e}")))?;
        *self = serde_json::from_value(root).map_err(|e| ExperimentError::Config(format!("{key}: {e}")))?;
        Ok(())
    }
}

/// Reads `raw` as the JSON type of `current`.
fn coerce(current: &serde_json::Value, raw: &str) -> Result<serde_json::Value, String> {
    use serde_json::Value;
    let parsed = || serde_json::from_str::<Value>(raw).map_err(|_| format!("cannot parse `{raw}`"));
    match current {
        Value::String(_) => Ok(Value::String(raw.to_string())),
        Value::Bool(_) => raw.parse::<bool>().map(Value::Bool).map_err(|_| format!("expected true or false, got `{raw}`")),
        Value::Number(_) => match parsed()? {
            v @ Value::Number(_) => Ok(v),
            _ => Err(format!("expected a number, got `{raw}`")),
        },
        Value::Array(_) => {
            // accept both `[1, 2]` and `1,2`
            let text = if raw.trim_start().starts_with('[') { raw.to_string() } else { format!("[{raw}]") };
            serde_json::from_str(&text).map_err(|_| format!("expected a list, got `{raw}`"))
        }
        Value::Null => Ok(parsed().unwrap_or_else(|_| Value::String(raw.to_string()))),
        Value::Object(_) => Err("is a section".into()),
    }
}

/// Seed-independent inputs of an experiment.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub train: Dataset,
    pub test: Dataset,
    pub base: BaseWeights,
    pub pretrain_losses: Vec<f64>,
}

fn load_data(cfg: &DataConfig) -> Result<(Dataset, Dataset), ExperimentError> {
    match cfg.source {
        DataSource::Synth => {
            let ds = synth_generate(&cfg.synth)?;
            let fr = SplitFractions { train: 1.0 - cfg.test_fraction, val: 0.0, test: cfg.test_fraction };
            let s = split(&ds, fr, cfg.split_seed)?;
            Ok((s.train, s.test))
        }
        DataSource::Tsv => {
            let train_path = cfg.train_path.as_deref().expect("validated");
            let corpus = load_tsv(train_path, cfg.test_path.as_deref())?;
            match corpus.test {
                Some(mut test) => {
                    let mut train = corpus.train;
                    train.split = SplitTag::Train;
                    test.split = SplitTag::Test;
                    Ok((train, test))
                }
                None => {
                    let fr = SplitFractions { train: 1.0 - cfg.test_fraction, val: 0.0, test: cfg.test_fraction };
                    let s = split(&corpus.train, fr, cfg.split_seed)?;
                    Ok((s.train, s.test))
                }
            }
        }
    }
}

/// Loads or generates the corpus and pretrains the base on training tokens.
pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared, ExperimentError> {
    cfg.validate()?;
    let (train, test) = load_data(&cfg.data)?;
    let model_cfg = resolved_model(cfg, &train);
    model_cfg.validate()?;
    let pre = pretrain_base(&model_cfg, &train.examples, &cfg.pretrain)?;
    Ok(Prepared { train, test, base: pre.base, pretrain_losses: pre.losses })
}

/// Model config with data-dependent sizes filled in.
pub fn resolved_model(cfg: &ExperimentConfig, train: &Dataset) -> ModelConfig {
    let max_len = train.examples.iter().map(|e| e.tokens.len()).max().unwrap_or(1);
    ModelConfig {
        vocab_size: train.vocab_size,
        num_classes: train.num_classes,
        max_seq_len: cfg.model.max_seq_len.min(max_len).max(1),
        ..cfg.model.clone()
    }
}

/// Corrupts the training labels for run `seed`.
pub fn corrupt(cfg: &ExperimentConfig, prepared: &Prepared, seed: u64) -> Result<Dataset, ExperimentError> {
    let noise_seed = cfg.noise.seed.wrapping_add(seed);
    let c = prepared.train.num_classes;
    let train = &prepared.train;
    if cfg.noise.rate == 0.0 {
        return Ok(train.clone());
    }
    Ok(match cfg.noise.kind {
        NoiseKind::Symmetric => apply_matrix_noise(train, &build_symmetric(c, cfg.noise.rate)?, noise_seed)?,
        NoiseKind::Asymmetric => apply_matrix_noise(train, &build_asymmetric(c, cfg.noise.rate)?, noise_seed)?,
        NoiseKind::Instance => {
            let probe = fit_probe(cfg, prepared, seed)?;
            apply_instance_noise(train, &probe, cfg.noise.rate, noise_seed)?.dataset
        }
    })
}

/// Fully fine-tunes the base on the clean training labels.
pub fn fit_probe(cfg: &ExperimentConfig, prepared: &Prepared, seed: u64) -> Result<Model, ExperimentError> {
    let mut model = Model::from_base(&prepared.base, PeftKind::Full, prepared.train.num_classes, seed)?;
    let setup = TrainSetup {
        train: TrainConfig {
            method: Method::Peft,
            epochs: cfg.probe.epochs.max(1),
            lr: cfg.probe.lr,
            seed,
            ..cfg.train.clone()
        },
        routing: RoutingPolicy::default(),
        gmm: cfg.gmm,
    };
    train(&mut model, &prepared.train, &prepared.test, &setup, &mut |_| {})?;
    Ok(model)
}

/// One seeded run: corrupt labels, attach fresh deltas and head, train.
pub fn run_seed(
    cfg: &ExperimentConfig,
    prepared: &Prepared,
    seed: u64,
    sink: &mut dyn FnMut(&EpochRecord),
) -> Result<RunMetrics, ExperimentError> {
    let train_set = corrupt(cfg, prepared, seed)?;
    let mut model = Model::from_base(&prepared.base, cfg.model.peft, prepared.train.num_classes, seed)?;
    let setup = TrainSetup {
        train: TrainConfig { seed, ..cfg.train.clone() },
        routing: cfg.routing,
        gmm: cfg.gmm,
    };
    Ok(train(&mut model, &train_set, &prepared.test, &setup, sink)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.data.synth = SynthSpec { n: 300, ..SynthSpec::default() };
        cfg.model = ModelConfig { hidden: 16, heads: 2, ffn: 32, ..ModelConfig::default() };
        cfg.pretrain.steps = 5;
        cfg.train.epochs = 3;
        cfg.train.warmup_epochs = 1;
        cfg.train.ensemble_forwards = 2;
        cfg
    }

    #[test]
    fn prepared_sizes_follow_the_data() {
        let cfg = small();
        let p = prepare(&cfg).unwrap();
        assert_eq!(p.train.len() + p.test.len(), 300);
        assert_eq!(p.test.len(), 50);
        assert_eq!(p.test.num_corrupted(), 0);
        assert_eq!(p.pretrain_losses.len(), 5);
    }

    #[test]
    fn seeds_change_noise_and_training() {
        let cfg = small();
        let p = prepare(&cfg).unwrap();
        let a = corrupt(&cfg, &p, 0).unwrap();
        let b = corrupt(&cfg, &p, 1).unwrap();
        assert_ne!(a, b);
        assert!((a.corrupted_fraction() - 0.6).abs() < 0.1);
        let m = run_seed(&cfg, &p, 0, &mut |_| {}).unwrap();
        assert_eq!(m.epochs.len(), 3);
        assert_eq!(m.summary.base_checksum_before, p.base.checksum());
        assert_eq!(m.summary.base_checksum_after, p.base.checksum());
    }

    #[test]
    fn instance_noise_goes_through_a_probe() {
        let mut cfg = small();
        cfg.noise = NoiseSpec { kind: NoiseKind::Instance, rate: 0.2, seed: 1 };
        cfg.probe.epochs = 1;
        let p = prepare(&cfg).unwrap();
        let noisy = corrupt(&cfg, &p, 0).unwrap();
        assert!(noisy.num_corrupted() > 0);
    }

    #[test]
    fn dotted_overrides_follow_field_types() {
        let mut cfg = ExperimentConfig::default();
        cfg.set("noise.rate", "0.4").unwrap();
        cfg.set("noise.kind", "asymmetric").unwrap();
        cfg.set("train.method", "peft").unwrap();
        cfg.set("gmm.normalize", "true").unwrap();
        cfg.set("seeds", "1,2,3").unwrap();
        cfg.set("data.train_path", "x.tsv").unwrap();
        assert_eq!(cfg.noise, NoiseSpec { kind: NoiseKind::Asymmetric, rate: 0.4, seed: 0 });
        assert_eq!(cfg.train.method, Method::Peft);
        assert!(cfg.gmm.normalize);
        assert_eq!(cfg.seeds, vec![1, 2, 3]);
        assert_eq!(cfg.data.train_path, Some(PathBuf::from("x.tsv")));

        let err = cfg.set("noise.flavor", "x").unwrap_err().to_string();
        assert!(err.contains("noise.rate") && err.contains("noise.kind"), "{err}");
        assert!(cfg.set("noise.rate", "high").is_err());
        assert!(cfg.set("noise.kind", "sideways").is_err());
        assert!(cfg.set("noise", "1").is_err());
    }

    #[test]
    fn validation_names_the_field() {
        let mut cfg = small();
        cfg.noise.rate = 1.5;
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("noise.rate"), "{msg}");
        let mut cfg = small();
        cfg.seeds.clear();
        assert!(cfg.validate().unwrap_err().to_string().contains("seeds"));
    }
}
