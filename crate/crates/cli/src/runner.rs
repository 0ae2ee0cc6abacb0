//! Executes (config, seed) jobs on a worker pool and writes metrics files.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clearlab_core::experiment::{prepare, run_seed, ExperimentConfig, ExperimentError, Prepared};
use clearlab_core::trainer::{config_line, epoch_line, summary_line, RunMetrics, Summary};
use rayon::prelude::*;

use crate::CliError;

/// One config to run over its seeds, writing into `dir`.
#[derive(Clone, Debug)]
pub struct Unit {
    pub config: ExperimentConfig,
    pub dir: PathBuf,
}

#[derive(Clone, Debug)]
pub struct SeedOutcome {
    pub seed: u64,
    pub result: Result<Summary, String>,
}

pub fn metrics_path(dir: &Path, seed: u64) -> PathBuf {
    dir.join(format!("seed-{seed}.jsonl"))
}

/// Metrics file text: the resolved single-seed config, one line per epoch,
/// then the summary.
pub fn metrics_text(cfg: &ExperimentConfig, seed: u64, metrics: &RunMetrics) -> String {
    let echo = ExperimentConfig { seeds: vec![seed], ..cfg.clone() };
    let mut out = config_line(&echo);
    out.push('\n');
    for r in &metrics.epochs {
        out.push_str(&epoch_line(r));
        out.push('\n');
    }
    out.push_str(&summary_line(&metrics.summary));
    out.push('\n');
    out
}

/// Seed-independent part of a config; units sharing it share preparation.
fn prepare_key(cfg: &ExperimentConfig) -> String {
    serde_json::to_string(&(&cfg.data, &cfg.model, &cfg.pretrain)).expect("config serializes")
}

/// Runs every unit over its seeds with at most `workers` threads. Outcomes
/// are returned per unit in seed order; failures do not stop other jobs.
pub fn execute(units: &[Unit], workers: usize, log: &(dyn Fn(&str) + Sync)) -> Result<Vec<Vec<SeedOutcome>>, CliError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| CliError::Run(format!("worker pool: {e}")))?;
    for u in units {
        std::fs::create_dir_all(&u.dir).map_err(|e| CliError::Io(u.dir.clone(), e))?;
        std::fs::write(u.dir.join("config.toml"), crate::config::to_toml(&u.config))
            .map_err(|e| CliError::Io(u.dir.clone(), e))?;
    }

    let mut keys: BTreeMap<String, usize> = BTreeMap::new();
    let mut firsts: Vec<&ExperimentConfig> = Vec::new();
    for u in units {
        let key = prepare_key(&u.config);
        if !keys.contains_key(&key) {
            keys.insert(key, firsts.len());
            firsts.push(&u.config);
        }
    }
    let prepared: Vec<Result<Prepared, String>> = pool.install(|| {
        firsts
            .par_iter()
            .map(|cfg| {
                log(&format!("preparing data and base for `{}`", cfg.name));
                prepare(cfg).map_err(|e| e.to_string())
            })
            .collect()
    });

    let jobs: Vec<(usize, u64)> =
        units.iter().enumerate().flat_map(|(i, u)| u.config.seeds.iter().map(move |&s| (i, s))).collect();
    let results: Vec<(usize, SeedOutcome)> = pool.install(|| {
        jobs.par_iter()
            .map(|&(i, seed)| {
                let u = &units[i];
                let result = match &prepared[keys[&prepare_key(&u.config)]] {
                    Err(e) => Err(format!("preparation failed: {e}")),
                    Ok(p) => run_one(u, p, seed),
                };
                match &result {
                    Ok(s) => log(&format!(
                        "{} seed {seed}: peak {:.2} avg {:.2}",
                        u.dir.display(),
                        s.peak_accuracy,
                        s.average_accuracy
                    )),
                    Err(e) => log(&format!("{} seed {seed}: FAILED: {e}", u.dir.display())),
                }
                (i, SeedOutcome { seed, result })
            })
            .collect()
    });
    let mut out: Vec<Vec<SeedOutcome>> = vec![Vec::new(); units.len()];
    for (i, o) in results {
        out[i].push(o);
    }
    Ok(out)
}

fn run_one(u: &Unit, p: &Prepared, seed: u64) -> Result<Summary, String> {
    let metrics = run_seed(&u.config, p, seed, &mut |_| {}).map_err(|e: ExperimentError| e.to_string())?;
    let path = metrics_path(&u.dir, seed);
    std::fs::write(&path, metrics_text(&u.config, seed, &metrics)).map_err(|e| format!("{}: {e}", path.display()))?;
    Ok(metrics.summary)
}
