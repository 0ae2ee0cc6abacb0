use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use clearlab::config::{parse_assignment, LrPreset};
use clearlab::{ablate, run, CliError, Exit, Options};

/// Noisy-label PEFT experiments with clean-probability routing.
///
/// Config values can be overridden with `--set key=value` or directly as
/// `--section.key value` (for example `--noise.rate 0.6`).
#[derive(Parser, Debug)]
#[command(name = "clearlab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Parallel (config, seed) jobs.
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    /// Output root; overrides the config's `out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override a config value; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Suppress progress messages on stderr.
    #[arg(long, short, global = true)]
    quiet: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run one config over its seed list.
    Run { config: PathBuf },
    /// Run every cell of an ablation grid.
    Ablate {
        grid: PathBuf,
        /// Sweep the learning rate over a preset (peft or full).
        #[arg(long)]
        lr_preset: Option<LrPreset>,
    },
}

/// Pulls `--a.b value` and `--a.b=value` pairs out of `args`.
fn split_dotted(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>), CliError> {
    let mut rest = Vec::new();
    let mut dotted = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        let Some(flag) = a.strip_prefix("--").filter(|f| f.split('=').next().is_some_and(|k| k.contains('.'))) else {
            rest.push(a);
            continue;
        };
        match flag.split_once('=') {
            Some((k, v)) => dotted.push((k.to_string(), v.to_string())),
            None => {
                let v = it.next().ok_or_else(|| CliError::Config(format!("--{flag} needs a value")))?;
                dotted.push((flag.to_string(), v));
            }
        }
    }
    Ok((rest, dotted))
}

fn main() -> ExitCode {
    let code = match real_main() {
        Ok(exit) => exit,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit()
        }
    };
    ExitCode::from(code as u8)
}

fn real_main() -> Result<Exit, CliError> {
    let (args, dotted) = split_dotted(std::env::args().collect())?;
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return Ok(if e.use_stderr() { Exit::Config } else { Exit::Ok });
        }
    };
    let mut overrides = cli.set.iter().map(|s| parse_assignment(s)).collect::<Result<Vec<_>, _>>()?;
    overrides.extend(dotted);
    let mut opts = Options { overrides, workers: cli.workers, out: cli.out, quiet: cli.quiet, lr_preset: None };
    match &cli.command {
        Command::Run { config } => run(config, &opts),
        Command::Ablate { grid, lr_preset } => {
            opts.lr_preset = *lr_preset;
            ablate(grid, &opts)
        }
    }
}
