//! Command-line driver: corpus synthesis, preprocessing, training,
//! generation, gradient checking and evaluation.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// bad input: config, arguments, data that fails its schema
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl From<actgen::Error> for CliError {
    fn from(e: actgen::Error) -> Self {
        use actgen::Error as E;
        match e {
            E::Config(_) | E::Parse { .. } | E::Json(_) | E::Contract(_) => CliError::Validation(e.to_string()),
            E::Shape { .. } | E::Numeric(_) | E::Index { .. } | E::Io { .. } => CliError::Runtime(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "actgen", version, about = "Generate two-person actions from captions")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize a caption-action corpus with rotation augmentation.
    SynthData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 179)]
        captions: usize,
        /// distinct motions per caption
        #[arg(long, default_value_t = 2)]
        variants: usize,
        /// random rotations per caption-action pair
        #[arg(long, default_value_t = 36)]
        angles: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Split by caption, fit normalization and the vocabulary.
    Preprocess {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.1)]
        val_fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train from a TOML run config.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// continue from this checkpoint
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Sample clips for a caption from a checkpoint.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        caption: String,
        #[arg(long, default_value_t = 1)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        frames: Option<usize>,
        /// use z = 0 (one-to-one models)
        #[arg(long)]
        zero_noise: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic gradients with finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, hide = true, default_value_t = 0.0)]
        corrupt: f64,
    },
    /// Metrics of a checkpoint on a normalized dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        zero_noise: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn pretty<T: serde::Serialize>(v: &T) -> Result<String, CliError> {
    serde_json::to_string_pretty(v).map_err(|e| CliError::Runtime(e.to_string()))
}

/// Runs one command, printing its report to stdout.
pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::SynthData {
            seed,
            captions,
            variants,
            angles,
            out,
        } => {
            let stats = commands::synth(seed, captions, variants, angles, &out)?;
            println!("{}", pretty(&stats)?);
        }
        Command::Preprocess {
            data,
            out,
            val_fraction,
            seed,
        } => {
            let summary = commands::preprocess(&data, &out, val_fraction, seed)?;
            println!("{}", pretty(&summary)?);
        }
        Command::Train { config, resume } => {
            let summary = commands::train_run(&config, resume.as_deref())?;
            println!("{}", pretty(&summary)?);
        }
        Command::Generate {
            checkpoint,
            caption,
            k,
            seed,
            frames,
            zero_noise,
            out,
        } => {
            let file = commands::generate(&commands::GenerateRequest {
                checkpoint: &checkpoint,
                caption: &caption,
                k,
                seed,
                frames,
                zero_noise,
                out: &out,
            })?;
            println!(
                "wrote {} clip(s) of {} frames to {}",
                file.actions.len(),
                file.actions[0].len(),
                out.display()
            );
        }
        Command::Gradcheck { seed, corrupt } => {
            let report = commands::gradcheck(seed, corrupt)?;
            for b in &report {
                println!(
                    "{:<18} max rel error {:.3e} over {} coords  {}",
                    b.block,
                    b.max_rel_error,
                    b.coords_checked,
                    if b.passed { "ok" } else { "FAILED" }
                );
            }
            if report.iter().any(|b| !b.passed) {
                return Err(CliError::Validation("gradient check failed".into()));
            }
        }
        Command::Eval {
            checkpoint,
            data,
            k,
            seed,
            zero_noise,
            out,
        } => {
            let metrics = commands::eval(&checkpoint, &data, k, seed, zero_noise)?;
            let text = pretty(&metrics)?;
            if let Some(out) = out {
                std::fs::write(&out, format!("{text}\n")).map_err(|e| actgen::Error::io(&out, e))?;
            }
            println!("{text}");
        }
    }
    Ok(())
}
