use std::path::PathBuf;

use clap::{Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "conkd", version, about = "Contextualized knowledge distillation experiments")]
pub struct Cli {
    /// TOML experiment config; every field except `seed` has a default.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed. Required when no config is given.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Directory for the corpus, checkpoints and reports.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic corpus, catalog and both graphs.
    GenData,
    /// Train the recommendation teacher.
    TrainRec,
    /// Train a dialogue teacher.
    TrainDial {
        /// Prefix agent turns with [REC]/[GEN].
        #[arg(long)]
        special_tokens: bool,
    },
    /// Train a student from the teachers in the output directory.
    TrainStudent {
        #[arg(long, default_value = "+D&R&ST")]
        variant: String,
    },
    /// Train the [REC]/[GEN] turn classifier.
    TrainClassifier,
    /// Generate every held-out agent turn and write the metric report.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        /// Force the classifier's decision as the first response token.
        #[arg(long)]
        classifier: Option<PathBuf>,
        /// Also report the recommender's R@k.
        #[arg(long)]
        rec: Option<PathBuf>,
    },
    /// Train teachers and students for each seed and print the comparison.
    Ablate {
        /// Comma-separated variant names.
        #[arg(long, value_delimiter = ',', default_value = "vanilla,+D,+R,+D&R,+D&R&ST,lambda=0.5")]
        variants: Vec<String>,
        /// Comma-separated seeds; defaults to the config seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
    },
    /// Greedy decoding speed on held-out contexts.
    Bench {
        #[arg(long)]
        model: PathBuf,
    },
    /// Host a student for interactive chat sessions over HTTP.
    Serve {
        #[arg(long)]
        student: PathBuf,
        #[arg(long)]
        classifier: Option<PathBuf>,
        #[arg(long)]
        rec: Option<PathBuf>,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        /// Recommendations returned per reply.
        #[arg(long, default_value_t = 5)]
        top_k: usize,
    },
}
