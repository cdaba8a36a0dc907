mod commands;
mod config;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::Resolved;

/// Brain-tissue segmentation experiments on volumetric data.
#[derive(Parser)]
#[command(name = "tissueseg", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Global seed; overrides `seed` in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for tensor kernels.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic phantom volumes and a dataset manifest.
    PhantomGen,
    /// Train a model; writes a checkpoint and the training history.
    Train {
        /// Record wall-clock seconds per epoch in the history.
        #[arg(long)]
        timing: bool,
    },
    /// Evaluate predictions against ground truth (DSC, HD, AVD).
    Eval {
        #[arg(long, conflicts_with = "predictions")]
        checkpoint: Option<PathBuf>,
        /// Directory of `<id>.lbl.ntv` predicted label volumes.
        #[arg(long)]
        predictions: Option<PathBuf>,
        /// Volume ids to evaluate; default the split's test ids.
        #[arg(long, value_delimiter = ',')]
        ids: Vec<String>,
        /// Also write the predicted label volumes under `pred/`.
        #[arg(long)]
        save_predictions: bool,
    },
    /// Rank candidate training subsets by held-out DSC.
    Select,
    /// Suggest unlabeled volumes for annotation.
    Suggest,
    /// Finite-difference checks of all layer adjoints and a tiny U-Net.
    Gradcheck {
        #[arg(long, hide = true)]
        inject_fault: Option<f64>,
    },
    /// Describe the configured model, or a volume or checkpoint file.
    Info {
        file: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> tissueseg::Result<bool> {
    let c = &cli.common;
    if let Some(n) = c.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| tissueseg::Error::Config(format!("--threads: {e}")))?;
    }
    let resolved = Resolved::load(c.config.as_deref(), c.seed)?;
    let out = c.out.as_deref();
    let written = match cli.command {
        Command::PhantomGen => commands::phantom_gen(&resolved, out)?,
        Command::Train { timing } => commands::cmd_train(&resolved, out, timing)?,
        Command::Eval {
            checkpoint,
            predictions,
            ids,
            save_predictions,
        } => commands::cmd_eval(
            &resolved,
            out,
            &commands::EvalArgs {
                checkpoint: checkpoint.as_deref(),
                predictions: predictions.as_deref(),
                ids: &ids,
                save_predictions,
            },
        )?,
        Command::Select => commands::cmd_select(&resolved, out)?,
        Command::Suggest => commands::cmd_suggest(&resolved, out)?,
        Command::Gradcheck { inject_fault } => {
            let (text, passed) = commands::cmd_gradcheck(resolved.seed, inject_fault, out)?;
            print!("{text}");
            return Ok(passed);
        }
        Command::Info { file } => {
            print!("{}", commands::cmd_info(&resolved, file.as_deref())?);
            return Ok(true);
        }
    };
    for p in written {
        println!("{}", p.display());
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
