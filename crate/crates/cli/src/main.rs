use std::path::PathBuf;
use std::process::ExitCode;

use akl_core::experiment::{self, ExperimentConfig};
use akl_core::io::write_image;
use akl_core::parallel;
use akl_core::synth::{gen_synthetic, SyntheticKind, SyntheticParams};
use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "akl", version, about = "Attention-kernel experiments on image grids")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment named in a JSON config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to the config's `output_dir`, else `out/<experiment>`.
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write a seeded synthetic image (.csv, .pgm or .ppm).
    Gen {
        #[arg(long)]
        kind: SyntheticKind,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        channels: usize,
        #[arg(long, default_value_t = 1)]
        rank: usize,
        #[arg(long, default_value_t = 1)]
        cell: usize,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    parallel::init_from_env();
    match execute(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

/// `Ok(false)` means the run completed but a gating check failed.
fn execute(cmd: Command) -> Result<bool> {
    match cmd {
        Command::Run { config, output_dir, seed } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let dir = output_dir
                .or_else(|| cfg.output_dir.clone())
                .unwrap_or_else(|| PathBuf::from("out").join(&cfg.experiment));
            let summary = experiment::run(&cfg, &dir).with_context(|| format!("experiment `{}`", cfg.experiment))?;
            for c in &summary.checks {
                let tag = match (c.pass, c.gating) {
                    (true, _) => "PASS",
                    (false, true) => "FAIL",
                    (false, false) => "NOTE",
                };
                println!("{tag} {}/{}: {} ({})", c.experiment, c.name, c.value, c.threshold);
            }
            println!("{} -> {}", if summary.pass { "pass" } else { "fail" }, dir.display());
            Ok(summary.pass)
        }
        Command::Gen { kind, n, seed, out, channels, rank, cell } => {
            let img = gen_synthetic(kind, n, SyntheticParams { channels, rank, cell }, seed)?;
            write_image(&out, &img).with_context(|| format!("writing {}", out.display()))?;
            Ok(true)
        }
    }
}
