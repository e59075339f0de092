use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dt4rec::Result;
use dt4rec_cli::commands;
use dt4rec_cli::config::RunConfig;
use dt4rec_cli::exit_code;

#[derive(Parser)]
#[command(
    name = "dt4rec",
    version,
    about = "Retention-conditioned sequential recommendation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Seed for every random component.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, short)]
    out: Option<PathBuf>,
    /// Dataset bundle directory.
    #[arg(long)]
    bundle: Option<PathBuf>,
    /// Override a config field, e.g. `--set train.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Ablation to apply: no_reward, no_contrastive, no_weight, naive_prompt.
    #[arg(long = "ablate", value_name = "NAME")]
    ablations: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic world and write it as a dataset bundle.
    Synth(#[command(flatten)] Common),
    /// Turn an interaction log into a dataset bundle.
    Ingest {
        #[command(flatten)]
        common: Common,
        /// Interaction log to read.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Train a policy on a bundle's training split.
    Train(#[command(flatten)] Common),
    /// Roll out a trained policy on the test split and score it.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Policy checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Also report metric variance across this many user groups.
        #[arg(long)]
        variance: Option<usize>,
    },
    /// Train on the full training set and on one without low-reward steps.
    Ood {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Train with reduced shares of high-reward steps.
    Bc {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Collect metric reports into one table.
    Report {
        /// Metric files or directories to search.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, short)]
        out: Option<PathBuf>,
    },
}

fn load(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref(), &common.overrides)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out = Some(o.clone());
    }
    if let Some(b) = &common.bundle {
        cfg.data.bundle = Some(b.clone());
    }
    for a in &common.ablations {
        cfg.train.ablations.set(a)?;
    }
    cfg.resolve()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(common) => {
            let cfg = load(&common)?;
            let out = cfg.output_dir("synth");
            let stats = commands::cmd_synth(&cfg, &out)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&stats).unwrap_or_default()
            );
        }
        Command::Ingest { common, log } => {
            let mut cfg = load(&common)?;
            if log.is_some() {
                cfg.data.log = log;
            }
            let out = cfg.output_dir("ingest");
            let stats = commands::cmd_ingest(&cfg, &out)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&stats).unwrap_or_default()
            );
        }
        Command::Train(common) => {
            let cfg = load(&common)?;
            let out = cfg.output_dir("train");
            commands::cmd_train(&cfg, &out)?;
            println!("{}", out.join(commands::POLICY_CHECKPOINT).display());
        }
        Command::Evaluate {
            common,
            checkpoint,
            variance,
        } => {
            let mut cfg = load(&common)?;
            if checkpoint.is_some() {
                cfg.data.checkpoint = checkpoint;
            }
            if variance.is_some() {
                cfg.eval.variance_splits = variance;
            }
            let out = cfg.output_dir("evaluate");
            let report = commands::cmd_evaluate(&cfg, &out)?;
            for (name, v) in &report.metrics {
                println!("{name}\t{v}");
            }
        }
        Command::Ood { common, jobs } => {
            let cfg = load(&common)?;
            let out = cfg.output_dir("ood");
            commands::cmd_ood(&cfg, &out, jobs)?;
            print!(
                "{}",
                std::fs::read_to_string(out.join("ood.csv")).unwrap_or_default()
            );
        }
        Command::Bc { common, jobs } => {
            let cfg = load(&common)?;
            let out = cfg.output_dir("bc");
            commands::cmd_bc(&cfg, &out, jobs)?;
            print!(
                "{}",
                std::fs::read_to_string(out.join("bc.csv")).unwrap_or_default()
            );
        }
        Command::Report { inputs, out } => {
            let out = out.unwrap_or_else(|| RunConfig::default().output_dir("report"));
            print!("{}", commands::cmd_report(&inputs, &out)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
