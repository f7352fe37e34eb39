//! `raft`: train, evaluate and study retrieval-augmented forecasters from a
//! TOML config, with flags overriding config values.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use raft_core::eval::Variant;
use raft_core::retrieval::MetricKind;
use raft_core::synthetic::PatternKind;

use config::ExperimentConfig;

#[derive(Debug, Parser)]
#[command(name = "raft", version = manifest::VERSION, about = "Retrieval-augmented time-series forecasting experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand. Each one overrides the matching config key.
#[derive(Debug, Clone, Default, Args)]
pub struct Common {
    /// TOML experiment config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset CSV (first column timestamp, remaining columns channels).
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Univariate target channel.
    #[arg(long)]
    pub target: Option<String>,
    /// Forecast horizon(s), comma separated.
    #[arg(long, value_delimiter = ',')]
    pub horizon: Vec<usize>,
    #[arg(long)]
    pub lookback: Option<usize>,
    /// Single seed (shorthand for --seeds with one value).
    #[arg(long, conflicts_with = "seeds")]
    pub seed: Option<u64>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    /// Number of retrieved candidates.
    #[arg(long)]
    pub m: Option<usize>,
    /// Softmax temperature.
    #[arg(long)]
    pub tau: Option<f64>,
    /// pearson, cosine, neg_l2 or cosine_projected.
    #[arg(long)]
    pub metric: Option<MetricKind>,
    /// Candidate stride of the retrieval index.
    #[arg(long)]
    pub stride: Option<usize>,
    /// full, random_retrieval, no_attention, one_period or no_retrieval.
    #[arg(long)]
    pub variant: Option<Variant>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads for independent runs.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Train the linear forecaster alone (same as --variant no_retrieval).
    #[arg(long, conflicts_with = "variant")]
    pub no_retrieval: bool,
}

impl Common {
    /// Load the config file (if any) and apply flag overrides.
    pub fn resolve(&self) -> anyhow::Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(d) = &self.dataset {
            c.data.path = Some(d.clone());
        }
        if let Some(t) = &self.target {
            c.data.target = Some(t.clone());
        }
        if !self.horizon.is_empty() {
            c.model.horizons = self.horizon.clone();
        }
        if let Some(l) = self.lookback {
            c.model.lookback = l;
        }
        if let Some(s) = self.seed {
            c.run.seeds = vec![s];
        }
        if !self.seeds.is_empty() {
            c.run.seeds = self.seeds.clone();
        }
        if let Some(m) = self.m {
            c.retrieval.m = m;
        }
        if let Some(t) = self.tau {
            c.retrieval.tau = t;
        }
        if let Some(m) = self.metric {
            c.retrieval.metric = m;
        }
        if let Some(s) = self.stride {
            c.model.stride = s;
        }
        if let Some(v) = self.variant {
            c.model.variant = v;
        }
        if self.no_retrieval {
            c.model.variant = Variant::NoRetrieval;
        }
        if let Some(lr) = self.lr {
            c.train.learning_rate = lr;
        }
        if let Some(e) = self.epochs {
            c.train.max_epochs = e;
        }
        if let Some(o) = &self.out {
            c.run.out = o.clone();
        }
        if let Some(j) = self.jobs {
            c.run.jobs = j;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one model per horizon and seed; write checkpoints and histories.
    Train(Common),
    /// Score checkpoints on the test split, or train and score when none are given.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Vec<PathBuf>,
    },
    /// Exhaustive search over look-back, learning rate and m on validation MSE.
    Gridsearch(Common),
    /// Compare the full model against retrieval ablations.
    Ablate(Common),
    /// Precompute time and accuracy per candidate stride.
    Stride {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        strides: Vec<usize>,
    },
    /// Per-window key/value similarity against the gain from retrieval.
    Diagnose(Common),
    /// Generate a synthetic series, or run the rare-pattern study with --study.
    Synth {
        #[command(flatten)]
        common: Common,
        /// ar or random_walk.
        #[arg(long)]
        kind: Option<PatternKind>,
        #[arg(long, value_delimiter = ',')]
        occurrences: Vec<usize>,
        #[arg(long)]
        study: bool,
        /// Series per occurrence level in the study.
        #[arg(long)]
        n_series: Option<usize>,
    },
    /// Same pipeline with each similarity metric (univariate).
    SimilarityStudy {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        metrics: Vec<MetricKind>,
    },
    /// Retrain with and without retrieval on shrinking training regions.
    TrainingLengthStudy {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        fractions: Vec<f64>,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Train(c) => commands::train(&c),
        Command::Evaluate { common, checkpoint } => commands::evaluate(&common, &checkpoint),
        Command::Gridsearch(c) => commands::gridsearch(&c),
        Command::Ablate(c) => commands::ablate(&c),
        Command::Stride { common, strides } => commands::stride(&common, &strides),
        Command::Diagnose(c) => commands::diagnose(&c),
        Command::Synth { common, kind, occurrences, study, n_series } => {
            commands::synth(&common, kind, &occurrences, study, n_series)
        }
        Command::SimilarityStudy { common, metrics } => commands::similarity(&common, &metrics),
        Command::TrainingLengthStudy { common, fractions } => commands::training_length(&common, &fractions),
    }
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
