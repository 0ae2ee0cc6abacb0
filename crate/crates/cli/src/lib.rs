//! Config-driven experiment runner.

pub mod config;
pub mod report;
pub mod runner;

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::config::{load_config, load_grid};
use crate::report::{ablation_summary, run_summary, CellRow, Row};
use crate::runner::{execute, Unit};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("run failed: {0}")]
    Run(String),
    #[error("{0}: {1}")]
    Io(PathBuf, std::io::Error),
}

/// Process exit status.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Exit {
    Ok = 0,
    Config = 1,
    RunFailure = 2,
    PartialGrid = 3,
}

impl CliError {
    pub fn exit(&self) -> Exit {
        match self {
            Self::Config(_) => Exit::Config,
            Self::Run(_) | Self::Io(..) => Exit::RunFailure,
        }
    }
}

/// Shared options of both commands.
#[derive(Clone, Debug, Default)]
pub struct Options {
    pub overrides: Vec<(String, String)>,
    pub workers: usize,
    pub out: Option<PathBuf>,
    pub quiet: bool,
    pub lr_preset: Option<config::LrPreset>,
}

impl Options {
    fn log(&self) -> impl Fn(&str) + Sync + '_ {
        move |msg: &str| {
            if !self.quiet {
                eprintln!("{msg}");
            }
        }
    }
}

/// Runs one config over its seeds. Writes `<out>/<name>/seed-<s>.jsonl`,
/// `config.toml` and `summary.csv`, prints the summary table.
pub fn run(config: &Path, opts: &Options) -> Result<Exit, CliError> {
    let mut cfg = load_config(config, &opts.overrides)?;
    if let Some(out) = &opts.out {
        cfg.out = out.clone();
    }
    let dir = cfg.out.join(&cfg.name);
    let units = [Unit { config: cfg.clone(), dir: dir.clone() }];
    let outcomes = execute(&units, opts.workers, &opts.log())?;
    let row = Row::from_outcomes(&outcomes[0]);
    let table = run_summary(&cfg, &row, &dir.join("summary.csv"))?;
    print!("{table}");
    for o in &outcomes[0] {
        if let Err(e) = &o.result {
            eprintln!("seed {}: {e}", o.seed);
        }
    }
    Ok(if row.failed > 0 { Exit::RunFailure } else { Exit::Ok })
}

/// Runs every grid cell over the base seeds. Writes
/// `<out>/<name>/cell-<i>/...` per cell and `ablation.csv`; a failing cell is
/// recorded and the rest continue.
pub fn ablate(grid_path: &Path, opts: &Options) -> Result<Exit, CliError> {
    let mut grid = load_grid(grid_path, &opts.overrides, opts.lr_preset)?;
    if let Some(out) = &opts.out {
        grid.base.out = out.clone();
    }
    let root = grid.base.out.join(&grid.name);
    let mut rows: Vec<CellRow> = Vec::new();
    let mut units = Vec::new();
    let mut unit_of = Vec::new();
    for cell in &grid.cells {
        let values = cell.assignments.iter().map(|(_, v)| v.clone()).collect();
        let mut cfg = grid.base.clone();
        let prepared = config::apply_overrides(&mut cfg, &cell.assignments)
            .and_then(|_| cfg.validate().map_err(|e| CliError::Config(e.to_string())));
        match prepared {
            Ok(()) => {
                cfg.name = format!("{}/cell-{:02}", grid.name, cell.index);
                unit_of.push(Some(units.len()));
                units.push(Unit { config: cfg, dir: root.join(format!("cell-{:02}", cell.index)) });
                rows.push(CellRow { label: cell.label(), values, row: None, error: None });
            }
            Err(e) => {
                unit_of.push(None);
                rows.push(CellRow { label: cell.label(), values, row: None, error: Some(e.to_string()) });
            }
        }
    }
    let outcomes = execute(&units, opts.workers, &opts.log())?;
    for (row, unit) in rows.iter_mut().zip(&unit_of) {
        if let Some(u) = unit {
            let r = Row::from_outcomes(&outcomes[*u]);
            if r.failed > 0 {
                let errs: Vec<String> = outcomes[*u]
                    .iter()
                    .filter_map(|o| o.result.as_ref().err().map(|e| format!("seed {}: {e}", o.seed)))
                    .collect();
                row.error = Some(errs.join("; "));
            }
            if r.failed < r.seeds {
                row.row = Some(r);
            }
        }
    }
    std::fs::create_dir_all(&root).map_err(|e| CliError::Io(root.clone(), e))?;
    let table = ablation_summary(&grid.axes, &rows, &root.join("ablation.csv"))?;
    print!("{table}");
    for r in &rows {
        if let Some(e) = &r.error {
            eprintln!("cell `{}`: {e}", r.label);
        }
    }
    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    Ok(match failed {
        0 => Exit::Ok,
        n if n == rows.len() => Exit::RunFailure,
        _ => Exit::PartialGrid,
    })
}
