use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ssda_cli::config::RunConfig;
use ssda_cli::run;
use ssda_core::{Error, Result};

/// Semi-supervised domain adaptation for semantic segmentation on a
/// self-contained synthetic benchmark.
#[derive(Parser)]
#[command(name = "ssda", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Configuration sources, weakest to strongest: built-in defaults, the
/// SSDA_SEED environment variable, --config file, repeated --set overrides,
/// then the named convenience flags.
#[derive(Args)]
struct CommonOpts {
    /// Flat `key = value` config file applied over the defaults.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override one config key (repeatable), e.g. --set lambda_2=0.4.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Training setting: ssda, uda or ssl.
    #[arg(long)]
    setting: Option<String>,

    /// Seed for data generation, splits and training.
    #[arg(long)]
    seed: Option<u64>,

    /// Number of labeled target images.
    #[arg(long)]
    n_t: Option<usize>,

    /// Directory receiving checkpoints, metrics and reports.
    #[arg(long)]
    run_dir: Option<String>,

    /// Dataset directory; omit to generate the dataset in memory.
    #[arg(long)]
    data_dir: Option<String>,

    /// Drop the consistency term.
    #[arg(long)]
    disable_cr: bool,

    /// Drop the pixel-contrast term.
    #[arg(long)]
    disable_pc: bool,

    /// Use uniform class weights in the supervised losses.
    #[arg(long)]
    disable_class_weights: bool,

    /// Supervise source and target batches in separate forward passes.
    #[arg(long)]
    disable_batch_mix: bool,

    /// Consistency target flavor: auto, onehot or prob.
    #[arg(long, value_name = "VARIANT")]
    cr_variant: Option<String>,

    /// Source styling: none or lab.
    #[arg(long, value_name = "STYLE")]
    styling: Option<String>,

    /// Pixel-contrast scope: target, target+unlabeled or target+source.
    #[arg(long, value_name = "SCOPE")]
    pc_scope: Option<String>,

    /// Keep pseudolabeled images in the batch stream for the whole round.
    #[arg(long)]
    no_pl_drop: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic two-domain dataset to data_dir.
    Generate {
        #[command(flatten)]
        common: CommonOpts,
        /// Overwrite an existing non-empty data_dir.
        #[arg(long)]
        force: bool,
    },
    /// Train the configured setting through all self-training rounds.
    Train {
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Score a checkpoint, or the ensemble of two, on the validation split.
    Eval {
        #[command(flatten)]
        common: CommonOpts,
        /// First (or only) checkpoint.
        #[arg(long, value_name = "CKPT")]
        checkpoint_a: PathBuf,
        /// Optional second checkpoint for a mean-softmax ensemble.
        #[arg(long, value_name = "CKPT")]
        checkpoint_b: Option<PathBuf>,
        /// Report destination.
        #[arg(long, default_value = "eval.txt")]
        out: PathBuf,
    },
    /// Train every label-budget x seed cell and summarize mIoU per cell.
    Sweep {
        #[command(flatten)]
        common: CommonOpts,
        /// Comma-separated label budgets; 0 runs the UDA variant.
        #[arg(long, value_delimiter = ',', required = true)]
        labels: Vec<usize>,
        /// Comma-separated seeds, one sub-run per (budget, seed).
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
    },
    /// Pseudolabel the unlabeled target split with an existing checkpoint.
    Pseudolabel {
        #[command(flatten)]
        common: CommonOpts,
        /// Producing checkpoint.
        #[arg(long, value_name = "CKPT")]
        checkpoint: PathBuf,
        /// Directory receiving the label maps and coverage.txt.
        #[arg(long, value_name = "DIR")]
        out_dir: PathBuf,
    },
}

fn build_config(opts: &CommonOpts) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Ok(seed) = std::env::var("SSDA_SEED") {
        cfg.set("seed", seed.trim())?;
    }
    if let Some(path) = &opts.config {
        cfg.apply_file(path)?;
    }
    for pair in &opts.set {
        let (key, value) = pair.split_once('=').ok_or_else(|| {
            Error::Config(format!("--set expects KEY=VALUE, got {pair:?}"))
        })?;
        cfg.set(key.trim(), value.trim())?;
    }
    if let Some(v) = &opts.setting {
        cfg.set("setting", v)?;
    }
    if let Some(v) = opts.seed {
        cfg.set("seed", &v.to_string())?;
    }
    if let Some(v) = opts.n_t {
        cfg.set("n_t", &v.to_string())?;
    }
    if let Some(v) = &opts.run_dir {
        cfg.set("run_dir", v)?;
    }
    if let Some(v) = &opts.data_dir {
        cfg.set("data_dir", v)?;
    }
    if opts.disable_cr {
        cfg.disable_cr = true;
    }
    if opts.disable_pc {
        cfg.disable_pc = true;
    }
    if opts.disable_class_weights {
        cfg.disable_class_weights = true;
    }
    if opts.disable_batch_mix {
        cfg.disable_batch_mix = true;
    }
    if let Some(v) = &opts.cr_variant {
        cfg.set("cr_variant", v)?;
    }
    if let Some(v) = &opts.styling {
        cfg.set("styling", v)?;
    }
    if let Some(v) = &opts.pc_scope {
        cfg.set("pc_scope", v)?;
    }
    if opts.no_pl_drop {
        cfg.no_pl_drop = true;
    }
    Ok(cfg)
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { common, force } => {
            let cfg = build_config(&common)?;
            print!("{}", run::cmd_generate(&cfg, force)?);
        }
        Command::Train { common } => {
            let cfg = build_config(&common)?;
            let outcome = run::cmd_train(&cfg)?;
            println!("run_dir={}", outcome.run_dir.display());
            for (k, miou) in &outcome.round_mious {
                println!("round{k} student miou={miou:.6}");
            }
            println!("ensemble miou={:.6}", outcome.miou);
        }
        Command::Eval {
            common,
            checkpoint_a,
            checkpoint_b,
            out,
        } => {
            let cfg = build_config(&common)?;
            let report = run::cmd_eval(&cfg, &checkpoint_a, checkpoint_b.as_deref(), &out)?;
            print!("{}", ssda_core::eval::format_report(&report));
        }
        Command::Sweep {
            common,
            labels,
            seeds,
        } => {
            let cfg = build_config(&common)?;
            let (_, cells) = run::cmd_sweep(&cfg, &labels, &seeds)?;
            print!("{}", run::format_summary(&cells));
        }
        Command::Pseudolabel {
            common,
            checkpoint,
            out_dir,
        } => {
            let cfg = build_config(&common)?;
            let coverage = run::cmd_pseudolabel(&cfg, &checkpoint, &out_dir)?;
            println!("mean coverage={coverage:.6}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Usage(_) | Error::Argument(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
