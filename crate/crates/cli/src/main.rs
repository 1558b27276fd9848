use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use drf_cli::config::Split;
use drf_cli::{data, eval, init_threads, render, train, CliError, RunConfig};

#[derive(Parser)]
#[command(name = "drf", about = "Pedestrian occupancy forecasting with discrete residual flow")]
struct Cli {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set train.epochs=3`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train/val/test splits.
    Gen {
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train a head and write checkpoints and the training log.
    Train {
        #[arg(long)]
        head: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint and write the metrics CSV.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        split: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render predictions for one scenario.
    Render {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Scenario id (its seed).
        #[arg(long)]
        scenario: u64,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value = "render")]
        out: PathBuf,
        /// Also write one heatmap per timestep.
        #[arg(long)]
        heatmaps: bool,
        /// Also write PNG copies.
        #[arg(long)]
        png: bool,
    },
}

fn quote(p: &std::path::Path) -> String {
    format!("{:?}", p.display().to_string())
}

fn run(cli: Cli) -> Result<(), CliError> {
    init_threads()?;
    let mut overrides = cli.overrides.clone();
    // Named flags are applied after `--set`, so they win.
    match &cli.command {
        Command::Gen { out } => {
            if let Some(o) = out {
                overrides.push(format!("data.dir={}", quote(o)));
            }
        }
        Command::Train { head, seed, epochs, out } => {
            if let Some(h) = head {
                overrides.push(format!("model.head.kind={h:?}"));
            }
            if let Some(s) = seed {
                overrides.push(format!("train.seed={s}"));
            }
            if let Some(e) = epochs {
                overrides.push(format!("train.epochs={e}"));
            }
            if let Some(o) = out {
                overrides.push(format!("train.out={}", quote(o)));
            }
        }
        Command::Eval { checkpoint, split, .. } => {
            if let Some(c) = checkpoint {
                overrides.push(format!("eval.checkpoint={}", quote(c)));
            }
            if let Some(s) = split {
                overrides.push(format!("eval.split={s:?}"));
            }
        }
        Command::Render { checkpoint, .. } => {
            if let Some(c) = checkpoint {
                overrides.push(format!("eval.checkpoint={}", quote(c)));
            }
        }
    }
    let cfg = RunConfig::load_with_overrides(cli.config.as_deref(), &overrides)?;
    match cli.command {
        Command::Gen { .. } => {
            let manifest = data::generate(&cfg)?;
            for (split, hash) in manifest {
                println!("{split}\t{hash}");
            }
        }
        Command::Train { .. } => {
            let start = Instant::now();
            let outcome = train::run_train(&cfg)?;
            print!("{}", outcome.log);
            println!(
                "best epoch {} val_nll {:.6} log sha256 {}",
                outcome.best_epoch, outcome.best_val, outcome.log_hash
            );
            eprintln!("trained in {:.1} s", start.elapsed().as_secs_f64());
        }
        Command::Eval { out, .. } => {
            let (report, path) = eval::run_eval(&cfg, out.as_deref())?;
            print!("{}", report.to_csv());
            eprintln!("wrote {}", path.display());
        }
        Command::Render {
            scenario,
            split,
            out,
            heatmaps,
            png,
            ..
        } => {
            let split = Split::parse(&split)?;
            let model = eval::load_model(&cfg, &cfg.checkpoint_path())?;
            for path in render::run_render(&cfg, &model, split, scenario, &out, heatmaps, png)? {
                println!("{}", path.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
