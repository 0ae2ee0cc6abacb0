//! Loading experiment configs and ablation grids from TOML.

use std::path::{Path, PathBuf};

use clearlab_core::experiment::ExperimentConfig;
use serde::Deserialize;

use crate::CliError;

/// Reads `path` and applies `overrides` (dotted key, raw value) in order.
pub fn load_config(path: &Path, overrides: &[(String, String)]) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let mut cfg = parse_config(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    apply_overrides(&mut cfg, overrides)?;
    cfg.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(cfg)
}

/// Parses a config document; missing keys keep their defaults.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, String> {
    toml::from_str(text).map_err(|e| e.message().trim().to_string())
}

pub fn to_toml(cfg: &ExperimentConfig) -> String {
    toml::to_string(cfg).expect("config serializes to toml")
}

pub fn apply_overrides(cfg: &mut ExperimentConfig, overrides: &[(String, String)]) -> Result<(), CliError> {
    for (k, v) in overrides {
        cfg.set(k, v).map_err(|e| CliError::Config(e.to_string()))?;
    }
    Ok(())
}

/// Splits `key=value`.
pub fn parse_assignment(s: &str) -> Result<(String, String), CliError> {
    match s.split_once('=') {
        Some((k, v)) if !k.trim().is_empty() => Ok((k.trim().to_string(), v.trim().to_string())),
        _ => Err(CliError::Config(format!("expected key=value, got `{s}`"))),
    }
}

/// Ablation grid: a base config, fixed overrides, and axes whose cartesian
/// product forms the cells.
///
/// ```toml
/// name = "routing"
/// base = "desk.toml"
/// [set]
/// "train.epochs" = 20
/// [axes]
/// "routing.strategy" = ["clean", "random", "noisy"]
/// "train.lambda" = [1.0, 0.0]
/// ```
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridFile {
    pub name: Option<String>,
    /// Base config path, relative to the grid file.
    pub base: Option<PathBuf>,
    #[serde(default)]
    pub set: toml::Table,
    #[serde(default)]
    pub axes: toml::Table,
    /// Adds a `train.lr` axis from [`LrPreset`].
    pub lr_preset: Option<LrPreset>,
}

/// Learning-rate sweeps: 1e-4 to 5e-4 for PEFT, 1e-5 to 5e-5 for full
/// fine-tuning.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrPreset {
    Peft,
    Full,
}

impl LrPreset {
    pub fn values(self) -> &'static [f64] {
        match self {
            Self::Peft => &[1e-4, 2e-4, 3e-4, 4e-4, 5e-4],
            Self::Full => &[1e-5, 2e-5, 3e-5, 4e-5, 5e-5],
        }
    }
}

impl std::str::FromStr for LrPreset {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "peft" => Ok(Self::Peft),
            "full" => Ok(Self::Full),
            _ => Err(format!("unknown lr preset `{s}` (expected peft or full)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub index: usize,
    /// (dotted key, raw value) per axis, in axis order.
    pub assignments: Vec<(String, String)>,
}

impl Cell {
    pub fn label(&self) -> String {
        if self.assignments.is_empty() {
            return "base".into();
        }
        self.assignments.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(" ")
    }
}

#[derive(Clone, Debug)]
pub struct Grid {
    pub name: String,
    pub base: ExperimentConfig,
    pub axes: Vec<String>,
    pub cells: Vec<Cell>,
}

/// Loads a grid; `overrides` apply to the base before the cells and
/// `preset` replaces the file's `lr_preset`.
pub fn load_grid(path: &Path, overrides: &[(String, String)], preset: Option<LrPreset>) -> Result<Grid, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let file: GridFile =
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {}", path.display(), e.message().trim())))?;
    let mut base = match &file.base {
        Some(rel) => {
            let full = path.parent().unwrap_or(Path::new(".")).join(rel);
            let text = std::fs::read_to_string(&full).map_err(|e| CliError::Config(format!("{}: {e}", full.display())))?;
            parse_config(&text).map_err(|e| CliError::Config(format!("{}: {e}", full.display())))?
        }
        None => ExperimentConfig::default(),
    };
    let fixed: Vec<(String, String)> =
        file.set.iter().map(|(k, v)| Ok((k.clone(), raw_value(k, v)?))).collect::<Result<_, CliError>>()?;
    apply_overrides(&mut base, &fixed)?;
    apply_overrides(&mut base, overrides)?;
    if let Some(name) = &file.name {
        base.name = name.clone();
    }

    let mut axes = Vec::new();
    let mut levels: Vec<Vec<String>> = Vec::new();
    for (key, value) in &file.axes {
        let toml::Value::Array(items) = value else {
            return Err(CliError::Config(format!("axes.{key}: expected a list of values")));
        };
        if items.is_empty() {
            return Err(CliError::Config(format!("axes.{key}: empty list")));
        }
        axes.push(key.clone());
        levels.push(items.iter().map(|v| raw_value(key, v)).collect::<Result<_, _>>()?);
    }
    if let Some(p) = preset.or(file.lr_preset) {
        if axes.iter().any(|a| a == "train.lr") {
            return Err(CliError::Config("lr_preset conflicts with a train.lr axis".into()));
        }
        axes.push("train.lr".into());
        levels.push(p.values().iter().map(f64::to_string).collect());
    }
    let mut cells = vec![Cell { index: 0, assignments: Vec::new() }];
    for (key, values) in axes.iter().zip(&levels) {
        cells = cells
            .into_iter()
            .flat_map(|c| {
                values.iter().map(move |v| {
                    let mut a = c.assignments.clone();
                    a.push((key.clone(), v.clone()));
                    Cell { index: 0, assignments: a }
                })
            })
            .collect();
    }
    for (i, c) in cells.iter_mut().enumerate() {
        c.index = i;
    }
    Ok(Grid { name: base.name.clone(), base, axes, cells })
}

/// Text form of a scalar TOML value, as accepted by `ExperimentConfig::set`.
fn raw_value(key: &str, v: &toml::Value) -> Result<String, CliError> {
    Ok(match v {
        toml::Value::String(s) => s.clone(),
        toml::Value::Integer(i) => i.to_string(),
        toml::Value::Float(f) => f.to_string(),
        toml::Value::Boolean(b) => b.to_string(),
        toml::Value::Array(items) => {
            items.iter().map(|x| raw_value(key, x)).collect::<Result<Vec<_>, _>>()?.join(",")
        }
        _ => return Err(CliError::Config(format!("{key}: unsupported value {v}"))),
    })
}
