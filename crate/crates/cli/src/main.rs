use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use infomax::alloc::TrackingAllocator;
use infomax::bench::{BenchMode, BenchSettings};
use infomax::checkpoint::Checkpoint;
use infomax::commands::{self, SweepParam};
use infomax::model::Ablation;
use infomax::par::Execution;
use infomax::Error;

#[global_allocator]
static ALLOC: TrackingAllocator = TrackingAllocator;

#[derive(Parser)]
#[command(name = "infomax", version, about = "Long-horizon forecasting with sparse maximum-entropy attention")]
struct Cli {
    /// Run batch work on one thread instead of the rayon pool.
    #[arg(long, global = true)]
    sequential: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Model configuration (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset CSV; seeded synthetic data is used when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Seed of the synthetic series used when --data is absent.
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Model variant: no-tsd, no-mea or no-distill.
    #[arg(long)]
    ablate: Option<Ablation>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Mea,
    Dense,
    Both,
}

#[derive(Subcommand)]
enum Command {
    /// Train, write a checkpoint, loss logs and a run manifest.
    Train(Common),
    /// Forecast every test window with a checkpoint.
    Predict {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Must match the checkpoint's L_y when given.
        #[arg(long)]
        horizon: Option<usize>,
        /// Report metrics on the original scale instead of the normalized one.
        #[arg(long)]
        denormalize: bool,
    },
    /// Attention forward time against sequence length.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_values_t = [256, 512, 1024, 2048, 4096])]
        lengths: Vec<usize>,
        #[arg(long, value_enum, default_value = "both")]
        mode: ModeArg,
        #[arg(long, default_value_t = 64)]
        d_model: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
    },
    /// Encoder attention histograms and row entropies for one window.
    Stats {
        #[command(flatten)]
        common: Common,
        /// Use trained weights instead of a fresh initialization.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        window: usize,
    },
    /// Train and test once per value of c or U.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        param: SweepParam,
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        values: Vec<f64>,
    },
}

fn require_config(common: &Common) -> infomax::Result<infomax::model::ModelConfig> {
    match &common.config {
        Some(p) => commands::load_config(p),
        None => Err(Error::Config("--config is required".into())),
    }
}

fn data_path(common: &Common) -> Option<&Path> {
    common.data.as_deref()
}

fn run(cli: Cli) -> infomax::Result<()> {
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    };
    match cli.command {
        Command::Train(c) => {
            let cfg = require_config(&c)?;
            let raw = commands::load_series(data_path(&c), &cfg, c.data_seed)?;
            let o = commands::cmd_train(&cfg, &raw, c.seed, c.ablate, &c.out, exec)?;
            println!(
                "trained {} steps (best epoch {}), test mse {:.6} mae {:.6} -> {}",
                o.manifest.steps,
                o.manifest.best_epoch,
                o.manifest.test_mse,
                o.manifest.test_mae,
                c.out.display()
            );
        }
        Command::Predict {
            common,
            checkpoint,
            horizon,
            denormalize,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let raw = commands::load_series(data_path(&common), &ck.config, common.data_seed)?;
            let o = commands::cmd_predict(&ck, &raw, horizon, denormalize, &common.out, exec)?;
            println!(
                "{} windows, {} decoder passes, mse {:.6} mae {:.6}",
                o.windows, o.decoder_passes, o.mse, o.mae
            );
        }
        Command::Bench {
            common,
            lengths,
            mode,
            d_model,
            repeats,
        } => {
            let mut settings = BenchSettings {
                d_model,
                repeats,
                seed: common.seed,
                ..BenchSettings::default()
            };
            if let Some(p) = &common.config {
                let cfg = commands::load_config(p)?;
                settings.mea = cfg.mea;
                settings.distill = cfg.distill;
            }
            let modes = match mode {
                ModeArg::Mea => vec![BenchMode::Mea],
                ModeArg::Dense => vec![BenchMode::Dense],
                ModeArg::Both => vec![BenchMode::Mea, BenchMode::Dense],
            };
            for r in commands::cmd_bench(&lengths, &modes, &settings, &common.out)? {
                match r.slope {
                    Some(s) => println!("{}: log-log slope {s:.3}", r.mode),
                    None => println!("{}: too few successful lengths for a slope", r.mode),
                }
            }
        }
        Command::Stats {
            common,
            checkpoint,
            window,
        } => {
            let ck = checkpoint.as_deref().map(Checkpoint::load).transpose()?;
            let cfg = match (&ck, &common.config) {
                (Some(ck), _) => ck.config.clone(),
                (None, _) => require_config(&common)?,
            };
            let raw = commands::load_series(data_path(&common), &cfg, common.data_seed)?;
            let heads = commands::cmd_attn_stats(&cfg, ck.as_ref(), &raw, window, common.seed, &common.out)?;
            for h in &heads {
                let mean = h.stats.row_entropy.iter().sum::<f64>() / h.stats.row_entropy.len() as f64;
                println!(
                    "layer {} head {}: mean row entropy {mean:.4} (ln L_K = {:.4})",
                    h.layer,
                    h.head,
                    (h.l_k as f64).ln()
                );
            }
        }
        Command::Sweep {
            common,
            param,
            values,
        } => {
            let mut cfg = require_config(&common)?;
            if let Some(a) = common.ablate {
                cfg.ablation = a;
            }
            let raw = commands::load_series(data_path(&common), &cfg, common.data_seed)?;
            for p in commands::cmd_sweep(&cfg, &raw, param, &values, common.seed, &common.out, exec)? {
                println!("{param:?}={}: mse {:.6} mae {:.6}", p.value, p.mse, p.mae);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_usage() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
