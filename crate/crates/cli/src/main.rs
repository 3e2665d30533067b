use std::path::PathBuf;

use anyhow::Result;
use clap::{Parser, Subcommand};

use wsrm_cli::commands::{self, GradcheckOptions, TrainOptions};
use wsrm_cli::ExperimentConfig;

#[derive(Parser)]
#[command(name = "wsrm", version, about = "Weighted sum-rate precoding: WMMSE baseline and an equivariant learned precoder")]
struct Cli {
    /// Experiment config (TOML). Defaults apply when omitted.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,

    /// Override the config's output directory.
    #[arg(short, long, global = true)]
    output: Option<PathBuf>,

    /// Worker threads for per-sample and per-episode work.
    #[arg(short, long, global = true, default_value_t = 1)]
    jobs: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the dataset and cache held-out WMMSE references.
    Gen,
    /// Train the network, resuming a matching interrupted run.
    Train {
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Stop after this many epochs in this invocation.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Held-out metrics and configured sweeps for a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Proportional-fairness episodes and rate CDFs.
    Pf {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Also write per-episode traces as JSON lines.
        #[arg(long)]
        traces: bool,
    },
    /// Null-space dimensions of the equivariance constraint families.
    Oracle {
        #[arg(long)]
        json: bool,
    },
    /// Compare analytic and finite-difference gradients.
    Gradcheck {
        #[arg(long, default_value_t = 4)]
        n: usize,
        #[arg(long, default_value_t = 3)]
        k: usize,
        #[arg(long, default_value_t = 2)]
        channels: usize,
        #[arg(long, default_value_t = 3)]
        points: usize,
        #[arg(long, default_value_t = 1e-6)]
        step: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    wsrm_cli::init_jobs(cli.jobs)?;
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(o) = cli.output {
        cfg.output_dir = o;
    }
    match cli.command {
        Command::Gen => {
            let out = commands::cmd_gen(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&out.manifest)?);
        }
        Command::Train { epochs, learning_rate, batch_size, seed, stop_after } => {
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(lr) = learning_rate {
                cfg.train.learning_rate = lr;
            }
            if let Some(b) = batch_size {
                cfg.train.batch_size = b;
            }
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            cfg.validate()?;
            let out = commands::cmd_train(&cfg, &TrainOptions { stop_after })?;
            println!("checkpoint: {}", out.checkpoint.display());
        }
        Command::Eval { checkpoint } => {
            let m = commands::cmd_eval(&cfg, checkpoint.as_deref())?;
            println!("{}", serde_json::to_string_pretty(&m)?);
        }
        Command::Pf { checkpoint, traces } => {
            let out = commands::cmd_pf(&cfg, checkpoint.as_deref(), traces)?;
            println!("{}", serde_json::to_string_pretty(&out.summary)?);
        }
        Command::Oracle { json } => {
            let rows = commands::cmd_oracle(&cfg)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&rows)?);
            } else {
                print!("{}", commands::oracle_table(&rows));
            }
        }
        Command::Gradcheck { n, k, channels, points, step, seed } => {
            let opts = GradcheckOptions { n, k, channels, points, step, seed, ..GradcheckOptions::default() };
            for (i, r) in commands::cmd_gradcheck(&cfg, &opts)?.iter().enumerate() {
                println!("point {i}: {} parameters, max relative error {:.3e}", r.analytic.len(), r.max_rel_err);
            }
        }
    }
    Ok(())
}
