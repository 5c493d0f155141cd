use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod config;

use config::RunConfig;

/// Generalized zero-shot learning with disentangled features and synthesised pseudo samples.
#[derive(Debug, Parser)]
#[command(name = "tdcss", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Flat TOML run configuration.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Overrides the `bundle` key.
    #[arg(long)]
    bundle: Option<PathBuf>,
    /// Single-threaded execution.
    #[arg(long)]
    sequential: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic ZSLB bundle.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Overrides `data_seed`.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, short)]
        out: PathBuf,
    },
    /// Train a model; writes checkpoints and a metrics JSONL file to the output directory.
    Train {
        #[command(flatten)]
        common: Common,
        /// Overrides `out_dir`.
        #[arg(long, short)]
        out_dir: Option<PathBuf>,
        /// Overrides the training `seed`.
        #[arg(long)]
        seed: Option<u64>,
        /// Remove one component: tfd, eps or cps.
        #[arg(long)]
        ablate: Option<tdcss::trainer::Ablation>,
        /// Keep only k training rows per seen class.
        #[arg(long)]
        fszu_shots: Option<usize>,
        /// Full-size widths and epoch count (file and environment still override).
        #[arg(long)]
        paper_scale: bool,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on the test rows of a bundle.
    Eval {
        #[command(flatten)]
        common: Common,
        checkpoint: PathBuf,
        /// Print one JSON object instead of the table.
        #[arg(long)]
        json: bool,
        /// Also write the metrics JSON here.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Train every (cell, seed) pair of a grid and write a CSV with medians.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated cells: full, no_tfd, no_eps, no_cps, all, a shot
        /// count, or the groups `ablations` and `shots`.
        #[arg(long, default_value = "ablations")]
        grid: String,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        /// CSV destination; standard output when absent.
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
    /// Write 2-D principal-component coordinates of real and synthesised latents as CSV.
    ExportEmbeddings {
        #[command(flatten)]
        common: Common,
        checkpoint: PathBuf,
        #[arg(long, short)]
        out: PathBuf,
    },
}

impl Common {
    fn load(&self, base: RunConfig) -> tdcss::Result<RunConfig> {
        let mut cfg = RunConfig::load(base, self.config.as_deref(), std::env::vars())?;
        if self.bundle.is_some() {
            cfg.run.bundle = self.bundle.clone();
        }
        if self.sequential {
            cfg.run.parallel = false;
        }
        Ok(cfg)
    }
}

fn run(cli: Cli) -> tdcss::Result<()> {
    match cli.command {
        Command::GenData { common, seed, out } => {
            let mut cfg = common.load(RunConfig::default())?;
            if let Some(s) = seed {
                cfg.data.seed = s;
            }
            commands::gen_data(&cfg, &out)
        }
        Command::Train {
            common,
            out_dir,
            seed,
            ablate,
            fszu_shots,
            paper_scale,
            resume,
        } => {
            let base = RunConfig {
                train: if paper_scale {
                    tdcss::trainer::TrainConfig::paper_scale()
                } else {
                    Default::default()
                },
                ..Default::default()
            };
            let mut cfg = common.load(base)?;
            if let Some(d) = out_dir {
                cfg.run.out_dir = d;
            }
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            if let Some(a) = ablate {
                cfg.train = cfg.train.ablate(a);
            }
            commands::train(&cfg, fszu_shots, resume.as_deref())
        }
        Command::Eval {
            common,
            checkpoint,
            json,
            out,
        } => {
            let cfg = common.load(RunConfig::default())?;
            commands::eval(&cfg, &checkpoint, json, out.as_deref())
        }
        Command::Sweep { common, grid, seeds, out } => {
            let cfg = common.load(RunConfig::default())?;
            commands::sweep(&cfg, &grid, &seeds, out.as_deref())
        }
        Command::ExportEmbeddings { common, checkpoint, out } => {
            let cfg = common.load(RunConfig::default())?;
            commands::export_embeddings(&cfg, &checkpoint, &out)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
