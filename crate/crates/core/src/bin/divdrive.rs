//! Command-line harness: dataset collection, behavior-cloning training,
//! closed-loop evaluation, interpretability reports, and the diversity
//! weight sweep.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use divdrive::harness::dataset::{collect, Dataset};
use divdrive::harness::evaluate::{evaluate, EvalSubject};
use divdrive::harness::interpret_run::interpret;
use divdrive::harness::sweep::{parse_grid, sweep, DEFAULT_GRID};
use divdrive::harness::train::train;
use divdrive::harness::RunConfig;
use divdrive::Result;

#[derive(Parser)]
#[command(
    name = "divdrive",
    about = "Diversity-regularized trajectory-guided driving policy harness",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Roll the expert over the configured routes and write the dataset.
    Collect {
        #[command(flatten)]
        common: Common,
    },
    /// Train a policy on a collected dataset.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset file from `collect`.
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Closed-loop benchmark evaluation of a checkpoint (or the expert).
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to evaluate.
        #[arg(long, required_unless_present = "expert")]
        checkpoint: Option<PathBuf>,
        /// Evaluate the privileged expert instead of a checkpoint.
        #[arg(long, conflicts_with = "checkpoint")]
        expert: bool,
        /// Evaluation runs (seeds) per route.
        #[arg(long)]
        runs: Option<u64>,
    },
    /// Interpretability reports for a checkpoint.
    Interpret {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Baseline checkpoint for the comparative correlation table.
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long)]
        runs: Option<u64>,
        /// Export the first N saliency maps as PGM images.
        #[arg(long, value_name = "N")]
        export_saliency: Option<usize>,
    },
    /// Train and evaluate across a diversity-weight grid.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated lambda values (default 5e-1 .. 5e-6 decades).
        #[arg(long, value_name = "CSV-list")]
        lambda_div_grid: Option<String>,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Collect { common } => {
            let cfg = common.load()?;
            std::fs::create_dir_all(&cfg.out_dir)?;
            let outcome = collect(&cfg)?;
            let path = cfg.out_dir.join("dataset.bin");
            outcome.dataset.write_file(&path)?;
            println!(
                "collected {} frames over {} episodes -> {}",
                outcome.dataset.frames.len(),
                outcome.dataset.episodes.len(),
                path.display()
            );
            println!("expert driving score: {:.2}", outcome.expert_ds_mean);
            if outcome.expert_below_floor {
                eprintln!(
                    "warning: expert driving score {:.2} is below the configured floor {:.2}; \
                     the world configuration is suspect",
                    outcome.expert_ds_mean, cfg.expert_ds_floor
                );
            }
            println!("config hash: {}", cfg.hash_hex());
            Ok(())
        }
        Command::Train { common, dataset } => {
            let cfg = common.load()?;
            let ds = Dataset::read_file(&dataset)?;
            let outcome = train(&cfg, &ds, &cfg.out_dir)?;
            println!(
                "trained {} epochs; best validation loss {:.6} at epoch {}",
                cfg.optimizer.epochs, outcome.best_val, outcome.best_epoch
            );
            println!("best checkpoint: {}", outcome.best_path.display());
            println!("last checkpoint: {}", outcome.last_path.display());
            println!("training log:    {}", outcome.log_path.display());
            Ok(())
        }
        Command::Evaluate { common, checkpoint, expert, runs } => {
            let cfg = common.load()?;
            let subject = if expert {
                EvalSubject::Expert
            } else {
                EvalSubject::Checkpoint(checkpoint.expect("clap enforces presence"))
            };
            let outcome = evaluate(&cfg, subject, runs, &cfg.out_dir)?;
            println!(
                "DS {:.2} ± {:.2}   RC {:.2} ± {:.2}   IP {:.3} ± {:.3}   ({} episodes, {:.3} km)",
                outcome.bench.ds_mean,
                outcome.bench.ds_std,
                outcome.bench.rc_mean,
                outcome.bench.rc_std,
                outcome.bench.ip_mean,
                outcome.bench.ip_std,
                outcome.bench.episodes.len(),
                outcome.bench.total_km
            );
            for path in &outcome.report_paths {
                println!("report: {}", path.display());
            }
            Ok(())
        }
        Command::Interpret { common, checkpoint, baseline, runs, export_saliency } => {
            let cfg = common.load()?;
            let outcome = interpret(
                &cfg,
                &checkpoint,
                baseline.as_deref(),
                runs,
                export_saliency,
                &cfg.out_dir,
            )?;
            println!(
                "frames {}  overall GTC {}  rho_ctrl {}  rho_traj {}",
                outcome.main.frames,
                fmt(outcome.main.overall_gtc()),
                fmt(outcome.main.rho_ctrl),
                fmt(outcome.main.rho_traj),
            );
            if let Some(base) = &outcome.baseline {
                println!(
                    "baseline frames {}  overall GTC {}  rho_ctrl {}  rho_traj {}",
                    base.frames,
                    fmt(base.overall_gtc()),
                    fmt(base.rho_ctrl),
                    fmt(base.rho_traj),
                );
            }
            for path in &outcome.report_paths {
                println!("report: {}", path.display());
            }
            Ok(())
        }
        Command::Sweep { common, lambda_div_grid } => {
            let cfg = common.load()?;
            let grid = match lambda_div_grid {
                Some(text) => parse_grid(&text)?,
                None => DEFAULT_GRID.to_vec(),
            };
            let outcome = sweep(&cfg, &grid, &cfg.out_dir)?;
            for row in &outcome.rows {
                match (row.ds_mean, row.ds_std) {
                    (Some(m), Some(s)) => {
                        println!("lambda {:>9.0e}: DS {:.2} ± {:.2}", row.lambda_div, m, s)
                    }
                    _ => println!("lambda {:>9.0e}: {}", row.lambda_div, row.status),
                }
            }
            if let Some(best) = outcome.best_lambda {
                println!("best lambda by mean driving score: {best:e}");
            }
            println!("table: {}", outcome.table_path.display());
            Ok(())
        }
    }
}

fn fmt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "absent".into())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // help/version requests are not usage errors
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0u8,
                _ => 1u8,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
