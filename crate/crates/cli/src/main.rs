//! `fryum`: optimize, simulate and benchmark fryum-wheel segmentations.
//!
//! Exit codes: 0 success, 2 configuration or parse error, 3 empty result,
//! 4 numeric or output failure.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use fryum::AngularSpec;

use crate::error::CliError;

#[derive(Parser)]
#[command(name = "fryum", version, about = "Equiprobable fryum-wheel segmentation toolkit for spatial-mode QKD")]
struct Cli {
    /// Worker threads (default: all cores). Outputs do not depend on it.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set rules.Nrange=[2,4]`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Exhaustive search for the best angular spec per ring count.
    Optimize {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Also record every evaluated candidate in sweep.json.
        #[arg(long)]
        dump_all: bool,
    },
    /// Frame-level protocol simulation of a segmentation.
    Simulate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Segmentation JSON from `optimize` or `segment`.
        #[arg(long)]
        segmentation: Option<PathBuf>,
        /// Write the binary event log (events.bin).
        #[arg(long)]
        event_log: bool,
    },
    /// Uniform-disk packing comparison of circles, hexagons and fryum annuli.
    Tiling {
        #[arg(long, default_value_t = 12)]
        n_max: usize,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
    },
    /// Border-pixel error of a uniformly illuminated pixel grid.
    BorderError {
        /// CSV of integer macropixel labels, one row per pixel row.
        grid: PathBuf,
        /// Monte Carlo cross-check samples (0 to skip).
        #[arg(long, default_value_t = 1_000_000)]
        samples: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value = "out")]
        out_dir: PathBuf,
    },
    /// Draw photon pairs from the source for inspection.
    Sample {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 10_000)]
        count: usize,
    },
    /// Build one segmentation and rasterize its label map.
    Segment {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Angular spec such as `1,6,8,21`; overrides segmentation.A.
        #[arg(long)]
        spec: Option<String>,
    },
}

fn resolve(cfg: &ConfigArgs) -> Result<config::Resolved, CliError> {
    config::load(cfg.config.as_deref(), &cfg.overrides)?.resolve()
}

fn run(cli: Cli) -> Result<String, CliError> {
    if let Some(w) = cli.workers {
        if w == 0 {
            return Err(CliError::Config("--workers must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(w)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    match cli.command {
        Command::Optimize { cfg, dump_all } => commands::optimize(&resolve(&cfg)?, &cfg.out_dir, dump_all),
        Command::Simulate {
            cfg,
            segmentation,
            event_log,
        } => commands::simulate(&resolve(&cfg)?, segmentation.as_deref(), &cfg.out_dir, event_log),
        Command::Tiling { n_max, out_dir } => commands::tiling(n_max, &out_dir),
        Command::BorderError {
            grid,
            samples,
            seed,
            out_dir,
        } => commands::border_error(&grid, samples, seed, &out_dir),
        Command::Sample { cfg, count } => commands::sample(&resolve(&cfg)?, count, &cfg.out_dir),
        Command::Segment { cfg, spec } => {
            let spec = spec.map(|s| AngularSpec::parse(&s)).transpose()?;
            commands::segment(&resolve(&cfg)?, spec, &cfg.out_dir)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(summary) => {
            print!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
