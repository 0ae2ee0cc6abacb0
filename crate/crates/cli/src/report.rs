//! Seed aggregation, summary CSVs, and printed tables.

use std::path::Path;

use clearlab_core::experiment::ExperimentConfig;

use crate::runner::SeedOutcome;
use crate::CliError;

/// Mean and sample standard deviation (zero for fewer than two values).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stats {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
}

impl Stats {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len();
        if n == 0 {
            return Self { n, mean: f64::NAN, std: f64::NAN };
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let std = if n < 2 {
            0.0
        } else {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Self { n, mean, std }
    }

    fn cell(&self) -> String {
        if self.n == 0 {
            "-".into()
        } else {
            format!("{:.2} ± {:.2}", self.mean, self.std)
        }
    }
}

/// Peak and average accuracy over the successful seeds.
#[derive(Clone, Debug)]
pub struct Row {
    pub seeds: usize,
    pub failed: usize,
    pub peak: Stats,
    pub avg: Stats,
    pub clean: Stats,
    pub noisy: Stats,
}

impl Row {
    pub fn from_outcomes(outcomes: &[SeedOutcome]) -> Self {
        let ok: Vec<_> = outcomes.iter().filter_map(|o| o.result.as_ref().ok()).collect();
        let col = |f: fn(&clearlab_core::trainer::Summary) -> f64| Stats::of(&ok.iter().map(|s| f(s)).collect::<Vec<_>>());
        Self {
            seeds: outcomes.len(),
            failed: outcomes.len() - ok.len(),
            peak: col(|s| s.peak_accuracy),
            avg: col(|s| s.average_accuracy),
            clean: col(|s| s.final_clean_accuracy),
            noisy: col(|s| s.final_noisy_accuracy),
        }
    }

    fn numbers(&self) -> Vec<String> {
        let mut v = vec![self.seeds.to_string(), self.failed.to_string()];
        for s in [self.peak, self.avg, self.clean, self.noisy] {
            v.push(s.mean.to_string());
            v.push(s.std.to_string());
        }
        v
    }
}

const NUMBER_HEADERS: [&str; 10] = [
    "seeds",
    "failed",
    "peak_mean",
    "peak_std",
    "avg_mean",
    "avg_std",
    "final_clean_mean",
    "final_clean_std",
    "final_noisy_mean",
    "final_noisy_std",
];

fn write_csv(path: &Path, header: Vec<String>, rows: Vec<Vec<String>>) -> Result<(), CliError> {
    let io = |e: csv::Error| CliError::Io(path.to_path_buf(), e.into());
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    w.write_record(&header).map_err(io)?;
    for r in rows {
        w.write_record(&r).map_err(io)?;
    }
    w.flush().map_err(|e| CliError::Io(path.to_path_buf(), e))
}

fn describe(cfg: &ExperimentConfig) -> [String; 4] {
    let method = match cfg.train.method {
        clearlab_core::trainer::Method::Peft => "peft",
        clearlab_core::trainer::Method::Clear => "clear",
    };
    let noise = serde_json::to_value(cfg.noise.kind).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default();
    [cfg.name.clone(), method.into(), cfg.model.peft.name().into(), format!("{noise}-{}", cfg.noise.rate)]
}

/// Writes `summary.csv` for a single config and returns the printed table.
pub fn run_summary(cfg: &ExperimentConfig, row: &Row, path: &Path) -> Result<String, CliError> {
    let mut header: Vec<String> = ["name", "method", "peft", "noise"].map(String::from).to_vec();
    header.extend(NUMBER_HEADERS.map(String::from));
    let mut record = describe(cfg).to_vec();
    record.extend(row.numbers());
    write_csv(path, header, vec![record])?;
    let d = describe(cfg);
    Ok(table(
        &["name", "method", "peft", "noise", "peak", "avg"],
        &[vec![d[0].clone(), d[1].clone(), d[2].clone(), d[3].clone(), row.peak.cell(), row.avg.cell()]],
    ))
}

/// One ablation cell's outcome.
#[derive(Clone, Debug)]
pub struct CellRow {
    pub label: String,
    pub values: Vec<String>,
    pub row: Option<Row>,
    pub error: Option<String>,
}

/// Writes `ablation.csv` (one row per cell) and returns the printed table.
pub fn ablation_summary(axes: &[String], cells: &[CellRow], path: &Path) -> Result<String, CliError> {
    let mut header: Vec<String> = vec!["cell".into()];
    header.extend(axes.iter().cloned());
    header.extend(NUMBER_HEADERS.map(String::from));
    header.push("error".into());
    let mut rows = Vec::new();
    let mut printed = Vec::new();
    for (i, c) in cells.iter().enumerate() {
        let mut r = vec![i.to_string()];
        r.extend(c.values.iter().cloned());
        match &c.row {
            Some(row) => r.extend(row.numbers()),
            None => r.extend(std::iter::repeat_n(String::new(), NUMBER_HEADERS.len())),
        }
        r.push(c.error.clone().unwrap_or_default());
        rows.push(r);
        let mut p = c.values.clone();
        match &c.row {
            Some(row) => {
                p.push(row.peak.cell());
                p.push(row.avg.cell());
            }
            None => {
                p.push("failed".into());
                p.push("-".into());
            }
        }
        printed.push(p);
    }
    write_csv(path, header, rows)?;
    let mut cols: Vec<&str> = axes.iter().map(String::as_str).collect();
    cols.extend(["peak", "avg"]);
    Ok(table(&cols, &printed))
}

fn table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |cells: Vec<&str>| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}", w = *w))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let mut out = line(header.to_vec());
    out.push('\n');
    for r in rows {
        out.push_str(&line(r.iter().map(String::as_str).collect()));
        out.push('\n');
    }
    out
}
