use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

mod commands;
mod svg;

#[derive(Parser)]
#[command(name = "sca", version, about = "Few-shot learner with a label-free self-critique phase")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Meta-train from a config file and write checkpoint, metrics, and
    /// resolved config into --out.
    Train {
        /// Key-value config file.
        #[arg(long)]
        config: PathBuf,
        /// Output directory, created if missing.
        #[arg(long)]
        out: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a checkpoint over fresh episodes and write per-episode results.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// meta-train, meta-val, or meta-test.
        #[arg(long, default_value = "meta-test")]
        split: String,
        #[arg(long, default_value_t = 500)]
        episodes: usize,
        /// Base seed for episode draws; defaults to the checkpoint's.
        #[arg(long)]
        seed: Option<u64>,
        /// Per-episode CSV destination.
        #[arg(long, default_value = "eval.csv")]
        out: PathBuf,
    },
    /// Compare every gradient path against central finite differences.
    Gradcheck {
        #[arg(long, value_enum, default_value_t = Scale::Small)]
        scale: Scale,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Replay one episode's target phase and record class probabilities
    /// before and after the critic-driven steps.
    InspectCritic {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 0)]
        episode_seed: u64,
        /// Critic-driven steps to apply.
        #[arg(long, default_value_t = 5)]
        steps: usize,
        /// Output directory for the CSV and SVG.
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Scale {
    Small,
    Medium,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.cmd {
        Cmd::Train { config, out, seed } => commands::train(&config, &out, seed),
        Cmd::Eval {
            ckpt,
            split,
            episodes,
            seed,
            out,
        } => commands::eval(&ckpt, &split, episodes, seed, &out),
        Cmd::Gradcheck { scale, seed } => commands::gradcheck(scale, seed),
        Cmd::InspectCritic {
            ckpt,
            episode_seed,
            steps,
            out,
        } => commands::inspect_critic(&ckpt, episode_seed, steps, &out),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                sca_core::Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
