use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use lldd_core::coreset::CoresetMethod;

mod commands;
mod config;

use config::RunConfig;

/// Low-level dataset distillation for medical image enhancement.
#[derive(Parser, Debug)]
#[command(name = "lldd", version)]
struct Cli {
    /// Caps worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Print the resolved configuration.
    Config {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Start from the four-patient smoke preset.
        #[arg(long, conflicts_with = "config")]
        smoke: bool,
    },
    /// Generate the phantom cohort.
    PhantomGen {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also write degraded pairs of the held-out patients.
        #[arg(long)]
        test_pairs: Option<PathBuf>,
    },
    /// Distill the training patients into a shared generator state.
    Distill {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Cohort container; generated from the config when omitted.
        #[arg(long)]
        cohort: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Select a coreset of training slices.
    Select {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        method: Option<CoresetMethod>,
        #[arg(long)]
        cohort: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a downstream network on a state, a selection or a pairs file.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// Cohort container for selection inputs.
        #[arg(long)]
        cohort: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print PSNR/SSIM of a trained model on a pairs file.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        testset: PathBuf,
    },
    /// Run the full comparison grid and write report files.
    Experiment {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, conflicts_with = "config")]
        smoke: bool,
        #[arg(long)]
        cohort: Option<PathBuf>,
        #[arg(long)]
        outdir: PathBuf,
    },
    /// Write shareable artifacts of a distilled state.
    Export {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        state: PathBuf,
        #[arg(long)]
        outdir: PathBuf,
        /// Gradient samples per patient.
        #[arg(long, default_value_t = 4)]
        samples: usize,
    },
}

fn load(path: Option<&PathBuf>, smoke: bool) -> Result<RunConfig> {
    if smoke {
        return RunConfig::smoke().resolve(config::env_seed()?);
    }
    RunConfig::load(path.map(PathBuf::as_path))
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(lldd_core::Error::Config("--threads must be ≥ 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match cli.command {
        Command::Config { config, smoke } => {
            let c = load(config.as_ref(), smoke)?;
            println!("{}", serde_json::to_string_pretty(&c)?);
        }
        Command::PhantomGen { config, out, test_pairs } => {
            commands::phantom_gen(&load(config.as_ref(), false)?, &out, test_pairs.as_deref())?;
        }
        Command::Distill { config, cohort, out } => {
            commands::distill_cmd(&load(config.as_ref(), false)?, cohort.as_deref(), &out)?;
        }
        Command::Select { config, method, cohort, out } => {
            commands::select(&load(config.as_ref(), false)?, method, cohort.as_deref(), &out)?;
        }
        Command::Train { config, data, cohort, out } => {
            commands::train(&load(config.as_ref(), false)?, &data, cohort.as_deref(), &out)?;
        }
        Command::Eval { model, testset } => {
            let m = commands::eval(&model, &testset)?;
            println!("{}", serde_json::to_string(&m)?);
        }
        Command::Experiment { config, smoke, cohort, outdir } => {
            commands::experiment(&load(config.as_ref(), smoke)?, cohort.as_deref(), &outdir)?;
        }
        Command::Export { config, state, outdir, samples } => {
            commands::export(&load(config.as_ref(), false)?, &state, &outdir, samples)?;
        }
    }
    Ok(())
}

/// Error category and process exit code.
fn classify(err: &anyhow::Error) -> (&'static str, u8) {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<lldd_core::Error>() {
            return match e {
                lldd_core::Error::Config(_) | lldd_core::Error::Invalid(_) | lldd_core::Error::Json(_) => ("schema", 3),
                lldd_core::Error::Format(_) => ("format", 4),
                lldd_core::Error::Overlap(_) => ("overlap", 5),
                lldd_core::Error::Io(_) => ("io", 6),
                lldd_core::Error::Divergence(_) => ("divergence", 7),
                _ => ("shape", 8),
            };
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return ("schema", 3);
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return ("io", 6);
        }
    }
    ("internal", 1)
}

fn fail(kind: &str, code: u8, message: String) -> ExitCode {
    let doc = serde_json::json!({ "error": kind, "exit_code": code, "message": message });
    eprintln!("{doc}");
    ExitCode::from(code)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("usage", 2, e.kind().to_string() + ": " + e.to_string().trim()),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (kind, code) = classify(&e);
            fail(kind, code, format!("{e:#}"))
        }
    }
}
