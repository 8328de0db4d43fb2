use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sgdrop_cli::run::{self, SaliencyMethod};
use sgdrop_cli::{Result, RunConfig};
use sgdrop_core::data::Split;

#[derive(Parser)]
#[command(name = "sgdrop", version, about = "Saliency-guided dropout training laboratory")]
struct Cli {
    #[command(flatten)]
    global: Global,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Flat key=value file; `#` starts a comment.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Leave wall-clock fields out of metrics.csv so reruns are byte-identical.
    #[arg(long, global = true)]
    deterministic: bool,

    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train from scratch, logging metrics every epoch.
    Train,
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Export saliency maps, overlays and derived boxes.
    Saliency {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated sample indices.
        #[arg(long, value_delimiter = ',', required = true)]
        indices: Vec<usize>,
        #[arg(long, default_value = "latent")]
        method: String,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Train a fresh classifier on top of a frozen pretrained encoder.
    Transfer {
        #[arg(long)]
        pretrained: PathBuf,
    },
    /// Compare per-step wall time of SGDrop against vanilla training.
    BenchOverhead {
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Write the synthetic shortcut dataset.
    Synth,
}

fn config(g: &Global) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(g.config.as_deref(), &g.set)?;
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &g.out {
        cfg.out = out.clone();
    }
    cfg.deterministic |= g.deterministic;
    Ok(cfg)
}

fn execute(cli: Cli) -> Result<()> {
    let mut cfg = config(&cli.global)?;
    match cli.command {
        Command::Train => {
            let o = run::train(&cfg)?;
            let te = o.final_test();
            println!(
                "epochs={} train_accuracy={} test_accuracy={} area_ratio={} out={}",
                cfg.epochs,
                o.final_train().accuracy,
                te.accuracy,
                te.area_ratio.unwrap_or_default(),
                o.dir.display()
            );
        }
        Command::Eval { checkpoint } => print!("{}", run::eval(&cfg, &checkpoint)?.to_kv()),
        Command::Saliency {
            checkpoint,
            indices,
            method,
            split,
        } => {
            let split: Split = split.parse()?;
            let method: SaliencyMethod = method.parse()?;
            let maps = run::saliency(&cfg, &checkpoint, split, &indices, method)?;
            println!("wrote {} maps to {}", maps.len(), cfg.out.join("saliency").display());
        }
        Command::Transfer { pretrained } => {
            let o = run::transfer(&cfg, &pretrained)?;
            println!(
                "test_accuracy={} encoder_unchanged={}",
                o.final_test().accuracy,
                o.encoder_frozen_intact.unwrap_or(false)
            );
        }
        Command::BenchOverhead { steps } => {
            if let Some(s) = steps {
                cfg.bench_steps = s;
            }
            print!("{}", run::bench_overhead(&cfg)?.to_kv());
        }
        Command::Synth => {
            let (train, test) = run::synth(&cfg)?;
            println!("wrote {} train and {} test samples to {}", train.len(), test.len(), cfg.out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

