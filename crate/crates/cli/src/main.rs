//! `cgbc`: run the concept-guided zero-shot pipeline one stage at a time.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Concept-guided Bayesian zero-shot classification over precomputed embeddings.
#[derive(Debug, Parser)]
#[command(name = "cgbc", version, about)]
pub struct Cli {
    #[command(flatten)]
    pub overrides: Overrides,

    #[command(subcommand)]
    pub command: Command,
}

/// Flags that override values from `--config`.
#[derive(Debug, Default, Args)]
pub struct Overrides {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Hard-negative neighborhood size.
    #[arg(long, global = true)]
    pub top_h: Option<usize>,
    /// Atomic concepts per class.
    #[arg(long, global = true)]
    pub atoms: Option<usize>,
    /// Concepts requested per LLM call.
    #[arg(long, global = true)]
    pub per_call: Option<usize>,
    #[arg(long, global = true)]
    pub atoms_per_prompt: Option<usize>,
    #[arg(long, global = true)]
    pub num_combos: Option<usize>,
    /// Prompts kept per class after selection.
    #[arg(long, global = true)]
    pub select_size: Option<usize>,
    #[arg(long, global = true)]
    pub lambda: Option<f64>,
    #[arg(long, global = true)]
    pub slope: Option<f64>,
    /// prior_mean, soft_trim, median_only, hard_trim, huber, cauchy or confidence.
    #[arg(long, global = true)]
    pub aggregator: Option<String>,
    /// affine or softmax_over_classes.
    #[arg(long, global = true)]
    pub prob_mode: Option<String>,
    #[arg(long, global = true, value_enum)]
    pub dpp: Option<Switch>,
    #[arg(long, global = true)]
    pub llm_endpoint: Option<String>,
    #[arg(long, global = true)]
    pub llm_model: Option<String>,
    /// Serve LLM replies from this fixture file.
    #[arg(long, global = true, conflicts_with = "record")]
    pub replay: Option<PathBuf>,
    /// Call the endpoint and append replies to this fixture file.
    #[arg(long, global = true)]
    pub record: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Class-name embedding container.
    #[arg(long, global = true)]
    pub classes: Option<PathBuf>,
    /// Image embedding container.
    #[arg(long, global = true)]
    pub images: Option<PathBuf>,
    /// Labels JSON `{image_name: class_index}`.
    #[arg(long, global = true)]
    pub labels: Option<PathBuf>,
    /// Directory of per-class prompt containers.
    #[arg(long, global = true)]
    pub prompts: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    Theorem1,
    Goodness,
    ExcessRisk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Dataset {
    /// Eight-class dataset with planted outlier prompts.
    Planted,
    /// Five-class toy run with packaged LLM replies.
    Pets,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write each class's hard-negative neighbors to neighbors.json.
    Neighbors,
    /// Generate atomic concept pools with the LLM into pools.json.
    Gen {
        /// Describe each class alone instead of contrasting it with neighbors.
        #[arg(long)]
        descriptive: bool,
    },
    /// Sample composite concepts from pools.json into composites.json.
    Compose,
    /// Embed composites and pick prompts per class into selection.json and prompts/.
    Select,
    /// Score images against the selected prompts into results.jsonl.
    Classify,
    /// Classify and score against labels into results.jsonl and report.json.
    Evaluate,
    /// Run a Monte-Carlo preset.
    Simulate {
        #[arg(long, value_enum)]
        preset: Preset,
        /// Trials per cell; defaults to the preset's own.
        #[arg(long)]
        trials: Option<usize>,
    },
    /// Shape statistics and Q-Q points of per-class similarity scores.
    Diagnose {
        /// Restrict to one image.
        #[arg(long)]
        image: Option<String>,
    },
    /// Write a synthetic dataset and a matching run.json.
    Synth {
        #[arg(long, value_enum)]
        preset: Dataset,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match commands::run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(commands::Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(commands::Failure::Data(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
