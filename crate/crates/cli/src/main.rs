//! `octden`: multi-frame speckle denoising from the command line.
//!
//! Failures print one line to stderr, `error[<kind>]: <message>`, and exit
//! with status 1. Usage errors exit with status 2.

mod config;
mod provenance;
mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{split_override, RunConfig};

#[derive(Debug)]
pub enum CliError {
    Core(octden::Error),
    /// Invalid configuration value.
    Config { field: String, reason: String },
}

impl CliError {
    pub fn config(field: &str, reason: String) -> Self {
        CliError::Config {
            field: field.to_string(),
            reason,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.kind(),
            CliError::Config { .. } => "config",
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Config { field, reason } => write!(f, "invalid `{field}`: {reason}"),
        }
    }
}

impl From<octden::Error> for CliError {
    fn from(e: octden::Error) -> Self {
        CliError::Core(e)
    }
}

#[derive(Debug, Parser)]
#[command(name = "octden", version, about = "Multi-frame speckle denoising for tomographic image stacks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML run configuration; every field is optional.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set solver.lambda=0.3`. Repeatable;
    /// applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = split_override)]
    overrides: Vec<(String, String)>,
    /// Number of frames to use (default 8).
    #[arg(long)]
    frames: Option<usize>,
}

impl Common {
    fn load(&self, extra: &[(&str, Option<String>)]) -> Result<RunConfig, CliError> {
        let mut overrides = self.overrides.clone();
        let named = [("frames", self.frames.map(|v| v.to_string()))];
        for (k, v) in named.iter().chain(extra) {
            if let Some(v) = v {
                overrides.push((k.to_string(), v.clone()));
            }
        }
        RunConfig::load(self.config.as_deref(), &overrides)
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic speckled dataset with its manifest and ground truth.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        rows: Option<usize>,
        #[arg(long)]
        cols: Option<usize>,
        /// Gamma shape of the multiplicative noise.
        #[arg(long)]
        looks: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Align the selected frames of a dataset; writes transforms and the
    /// registered stack.
    Register {
        #[command(flatten)]
        common: Common,
        /// Dataset manifest (TOML).
        #[arg(long)]
        manifest: PathBuf,
        /// Work directory.
        #[arg(long)]
        out: PathBuf,
        /// Index of the first manifest frame used.
        #[arg(long)]
        first_frame: Option<usize>,
        /// Registration anchor as a manifest index.
        #[arg(long)]
        reference_frame: Option<usize>,
    },
    /// Estimate the per-pixel noise level of a registered stack.
    EstimateNoise {
        #[command(flatten)]
        common: Common,
        /// Work directory written by `register`.
        #[arg(long)]
        work: PathBuf,
    },
    /// Split the registered stack into low-rank and noise parts.
    Denoise {
        #[command(flatten)]
        common: Common,
        /// Work directory written by `register` and `estimate-noise`.
        #[arg(long)]
        work: PathBuf,
        /// Regularization weight of the gradient term.
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        max_iters: Option<usize>,
    },
    /// Score denoised, averaged and single-frame images against a reference.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        work: PathBuf,
        /// Reference image; defaults to the manifest's.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// register, estimate-noise, denoise and evaluate in one go.
    Pipeline {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        first_frame: Option<usize>,
        #[arg(long)]
        reference_frame: Option<usize>,
    },
}

fn s<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(ToString::to_string)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth {
            common,
            out,
            rows,
            cols,
            looks,
            seed,
        } => {
            let mut cfg = common.load(&[
                ("synth.rows", s(&rows)),
                ("synth.cols", s(&cols)),
                ("synth.looks", s(&looks)),
                ("synth.seed", s(&seed)),
            ])?;
            if let Some(f) = common.frames {
                cfg.synth.frames = f;
                cfg.validate()?;
            }
            let manifest = stages::synth(&cfg, &out)?;
            println!("{}", manifest.display());
        }
        Command::Register {
            common,
            manifest,
            out,
            first_frame,
            reference_frame,
        } => {
            let cfg = common.load(&[("first_frame", s(&first_frame)), ("reference_frame", s(&reference_frame))])?;
            stages::register(&cfg, &manifest, &out)?;
        }
        Command::EstimateNoise { common, work } => stages::estimate_noise(&common.load(&[])?, &work)?,
        Command::Denoise {
            common,
            work,
            lambda,
            max_iters,
        } => {
            let cfg = common.load(&[("solver.lambda", s(&lambda)), ("solver.max_iters", s(&max_iters))])?;
            stages::denoise(&cfg, &work)?;
        }
        Command::Evaluate { common, work, reference } => {
            stages::evaluate(&common.load(&[])?, &work, reference.as_deref())?;
        }
        Command::Pipeline {
            common,
            manifest,
            out,
            reference,
            first_frame,
            reference_frame,
        } => {
            let cfg = common.load(&[("first_frame", s(&first_frame)), ("reference_frame", s(&reference_frame))])?;
            stages::pipeline(&cfg, &manifest, &out, reference.as_deref())?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::try_parse().unwrap_or_else(|e| e.exit());
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.kind());
            ExitCode::from(1)
        }
    }
}
