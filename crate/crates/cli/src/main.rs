use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use fedpft_core::harness::{self, ExperimentConfig, Preset};

#[derive(Parser)]
#[command(
    name = "fedpft",
    version,
    about = "Personalized federated learning with prompt-based feature transformation"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base preset (paper or desk) applied before the config file.
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Override a value, e.g. `--set federation.rounds=5`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Root seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, env = "FEDPFT_OUT", global = true)]
    out: Option<PathBuf>,
    /// Worker threads for client rounds.
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run federated training and write metrics, checkpoint, prompts and summary.
    Train,
    /// Run several ablation settings at one seed and print a comparison table.
    Ablate {
        /// Comma-separated setting names (I..VIII).
        #[arg(long, value_delimiter = ',', default_value = "I,II,III,IV,V,VI,VII,VIII")]
        settings: Vec<String>,
    },
    /// Linear-probe the feature extractor stored in a checkpoint.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Partition the training data and print per-client class counts.
    Partition {
        /// dirichlet or pathological.
        #[arg(long)]
        scheme: Option<String>,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        classes_per_client: Option<usize>,
        /// Print the full assignment as JSON on stdout.
        #[arg(long)]
        dump: bool,
    },
}

fn load(common: &Common, extra: &[String]) -> Result<ExperimentConfig> {
    let preset = common.preset.as_deref().map(str::parse::<Preset>).transpose()?;
    let mut overrides = common.overrides.clone();
    overrides.extend_from_slice(extra);
    if let Some(seed) = common.seed {
        overrides.push(format!("seed={seed}"));
    }
    Ok(harness::load_config(common.config.as_deref(), preset, &overrides)?)
}

fn out_dir(common: &Common, cfg: &ExperimentConfig) -> PathBuf {
    common
        .out
        .clone()
        .or_else(|| cfg.out_dir.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs/latest"))
}

fn run(cli: Cli) -> Result<()> {
    let common = &cli.common;
    match cli.command {
        Command::Train => {
            let cfg = load(common, &[])?;
            let out = out_dir(common, &cfg);
            let (summary, _) = harness::train(&cfg, &out, common.workers)
                .with_context(|| format!("training into {}", out.display()))?;
            println!(
                "best mean accuracy {:.4} at round {} ({} rounds); outputs in {}",
                summary.best_mean_accuracy,
                summary.best_round,
                summary.rounds,
                out.display()
            );
        }
        Command::Ablate { settings } => {
            let cfg = load(common, &[])?;
            let out = out_dir(common, &cfg);
            let rows = harness::ablate(&cfg, &settings, Some(&out), common.workers)?;
            println!(
                "{:<8} {:>7} {:>5} {:>5} {:>5} {:>10} {:>6}",
                "setting", "p_kappa", "alt", "l_con", "p_rho", "best_acc", "round"
            );
            for r in &rows {
                let f = r.flags;
                let mark = |b: bool| if b { "x" } else { "-" };
                println!(
                    "{:<8} {:>7} {:>5} {:>5} {:>5} {:>10.4} {:>6}",
                    r.setting,
                    mark(f.use_p_kappa),
                    mark(f.use_alternating),
                    mark(f.use_l_con),
                    mark(f.use_p_rho),
                    r.best_mean_accuracy,
                    r.best_round
                );
            }
        }
        Command::Probe { checkpoint } => {
            let mut cfg = load(common, &[])?;
            if common.config.is_none() {
                // a run directory carries its resolved config next to the checkpoint
                let sibling = checkpoint.parent().unwrap_or(Path::new(".")).join("config.toml");
                if sibling.exists() {
                    cfg = harness::load_config(Some(&sibling), None, &common.overrides)?;
                }
            }
            let report =
                harness::probe(&cfg, &checkpoint).with_context(|| format!("probing {}", checkpoint.display()))?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Partition {
            scheme,
            alpha,
            classes_per_client,
            dump,
        } => {
            let mut extra = Vec::new();
            if let Some(s) = scheme {
                extra.push(format!("partition.scheme={s}"));
            }
            if let Some(a) = alpha {
                extra.push(format!("partition.alpha={a}"));
            }
            if let Some(k) = classes_per_client {
                extra.push(format!("partition.classes_per_client={k}"));
            }
            let cfg = load(common, &extra)?;
            let report = harness::cmd_partition(&cfg)?;
            if dump {
                println!("{}", serde_json::to_string_pretty(&report.assignment)?);
            } else {
                for (i, h) in report.class_histograms.iter().enumerate() {
                    println!("client {i:>3}: {h:?}");
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
