use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use podseg_cli::commands::{self, UsageError, CONFIG_ECHO};
use podseg_cli::RunConfig;
use podseg_model::Variant;

#[derive(Parser)]
#[command(name = "podseg", version, about = "Silique segmentation on plant point clouds")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// `key = value` configuration file; unset keys keep their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Checkpoint to load (infer) or resume from (train).
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    /// pst, v-pst-pg or f-pst-pg.
    #[arg(long, global = true)]
    variant: Option<Variant>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate labeled synthetic plants and a split manifest.
    Synth {
        /// Number of plants.
        #[arg(long)]
        n: Option<usize>,
    },
    /// Train on a dataset directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        quiet: bool,
    },
    /// Region-slide inference on a cloud file or directory.
    Infer {
        #[arg(long)]
        input: PathBuf,
    },
    /// Compare predictions with ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
    },
    /// Augmented-feature ablation and voxel-shape comparison.
    Ablate {
        /// Dataset directory; plants are synthesized when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| UsageError(format!("missing required flag --{flag}")).into())
}

/// Config file if given; for inference, otherwise the config echoed next to
/// the checkpoint; otherwise defaults. Flags override file values.
fn effective_config(c: &Common, command: &Command) -> Result<RunConfig> {
    let mut cfg = match (&c.config, command, &c.checkpoint) {
        (Some(p), _, _) => RunConfig::load(p)?,
        (None, Command::Infer { .. }, Some(ck)) => {
            let echoed = ck.parent().unwrap_or(Path::new(".")).join(CONFIG_ECHO);
            if echoed.is_file() {
                RunConfig::load(&echoed)?
            } else {
                RunConfig::default()
            }
        }
        _ => RunConfig::default(),
    };
    if let Some(s) = c.seed {
        cfg.set("seed", &s.to_string())?;
    }
    if let Some(v) = c.variant {
        cfg.train.variant = v;
    }
    if let Command::Synth { n: Some(n) } = command {
        cfg.n = *n;
    }
    cfg.validate().context("invalid configuration")?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = effective_config(&cli.common, &cli.command)?;
    let c = &cli.common;
    match &cli.command {
        Command::Synth { .. } => {
            let ids = commands::cmd_synth(&cfg, required(&c.out, "out")?)?;
            println!("{}", serde_json::json!({ "command": "synth", "plants": ids.len() }));
        }
        Command::Train { data, quiet } => {
            let records = commands::cmd_train(&cfg, data, required(&c.out, "out")?, c.checkpoint.as_deref(), !quiet)?;
            println!("{}", serde_json::json!({ "command": "train", "epochs": records.len() }));
        }
        Command::Infer { input } => {
            let ck = required(&c.checkpoint, "checkpoint")?;
            let summaries = commands::cmd_infer(&cfg, ck, input, required(&c.out, "out")?)?;
            for s in summaries {
                println!("{}", serde_json::to_string(&s)?);
            }
        }
        Command::Eval { pred, gt } => {
            let report = commands::cmd_eval(&cfg, pred, gt, c.out.as_deref())?;
            print!("{}", commands::eval_table(&report));
        }
        Command::Ablate { data } => {
            let report = commands::cmd_ablate(&cfg, data.as_deref(), required(&c.out, "out")?)?;
            print!("{}", commands::ablation_table(&report));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if e.use_stderr() => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("usage error").trim_start_matches("error: ");
            eprintln!("{}", serde_json::json!({ "error": "usage", "message": first }));
            return ExitCode::from(2);
        }
        Err(e) => {
            // --help and --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let usage = e.downcast_ref::<UsageError>().is_some();
            let kind = if usage { "usage" } else { "failed" };
            let message = format!("{e:#}").replace('\n', " ");
            eprintln!("{}", serde_json::json!({ "error": kind, "message": message }));
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}
