//! Experiment configuration: a TOML file with `[data]`, `[model]`,
//! `[retrieval]`, `[train]`, `[run]`, `[grid]`, `[study]` and `[synth]`
//! sections. Every key is optional. Command-line flags are applied on top,
//! so the precedence is flag > file > built-in default.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use raft_core::eval::{Dataset, GridSpace, RunConfig, Variant};
use raft_core::model::{OptimizerKind, TrainConfig};
use raft_core::retrieval::{MetricKind, Reduction, RetrievalParams};
use raft_core::series::{load_csv, CsvSchema, SplitSpec};
use raft_core::synthetic::{PatternKind, SyntheticSpec};
use raft_core::TimeSeries;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub retrieval: RetrievalConfig,
    pub train: TrainSection,
    pub run: RunSection,
    pub grid: GridSection,
    pub study: StudySection,
    pub synth: SynthSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitKind {
    /// 12/4/4 months of hourly data.
    EttHourly,
    /// 12/4/4 months of 15-minute data.
    EttMinute,
    /// `train_ratio` / remainder / `test_ratio` of the series.
    Ratio,
    /// Explicit `train_end`, `val_end` and optional `test_end`.
    Borders,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub path: Option<PathBuf>,
    /// Channels to load; all value columns when absent.
    pub channels: Option<Vec<String>>,
    /// Single target channel for univariate studies.
    pub target: Option<String>,
    pub name: Option<String>,
    pub split: SplitKind,
    pub train_ratio: f64,
    pub test_ratio: f64,
    pub train_end: Option<usize>,
    pub val_end: Option<usize>,
    pub test_end: Option<usize>,
    pub lookback_overlap: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            path: None,
            channels: None,
            target: None,
            name: None,
            split: SplitKind::Ratio,
            train_ratio: 0.7,
            test_ratio: 0.2,
            train_end: None,
            val_end: None,
            test_end: None,
            lookback_overlap: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub lookback: usize,
    pub horizons: Vec<usize>,
    pub periods: Vec<usize>,
    pub stride: usize,
    pub variant: Variant,
    pub embed_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        let run = RunConfig::default();
        Self {
            lookback: run.lookback,
            horizons: vec![run.horizon],
            periods: run.periods,
            stride: run.stride,
            variant: run.variant,
            embed_dim: run.embed_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalConfig {
    pub m: usize,
    pub tau: f64,
    pub metric: MetricKind,
    pub reduction: Reduction,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        let p = RetrievalParams::default();
        Self { m: p.m, tau: p.tau, metric: p.metric, reduction: p.reduction }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub optimizer: OptimizerKind,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            max_epochs: t.max_epochs,
            patience: t.patience,
            optimizer: t.optimizer,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub jobs: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { seeds: vec![0, 1, 2], out: PathBuf::from("runs/latest"), jobs: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub lookbacks: Vec<usize>,
    pub learning_rates: Vec<f64>,
    pub ms: Vec<usize>,
}

impl Default for GridSection {
    fn default() -> Self {
        let g = GridSpace::default();
        Self { lookbacks: g.lookbacks, learning_rates: g.learning_rates, ms: g.ms }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudySection {
    pub strides: Vec<usize>,
    pub metrics: Vec<MetricKind>,
    pub fractions: Vec<f64>,
    pub variants: Vec<Variant>,
}

impl Default for StudySection {
    fn default() -> Self {
        Self {
            strides: vec![1, 2, 4, 8],
            metrics: vec![MetricKind::Pearson, MetricKind::Cosine, MetricKind::NegL2, MetricKind::CosineProjected],
            fractions: vec![0.2, 0.6, 1.0],
            variants: Variant::ALL.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub kind: PatternKind,
    pub occurrences: Vec<usize>,
    /// Series generated per occurrence level by `synth --study`.
    pub n_series: usize,
    pub generator: SyntheticSpec,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self { kind: PatternKind::Ar, occurrences: vec![1, 2, 4], n_series: 20, generator: SyntheticSpec::default() }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    /// Run configuration for one horizon.
    pub fn run_config(&self, horizon: usize) -> RunConfig {
        RunConfig {
            lookback: self.model.lookback,
            horizon,
            periods: self.model.periods.clone(),
            stride: self.model.stride,
            retrieval: RetrievalParams {
                m: self.retrieval.m,
                tau: self.retrieval.tau,
                metric: self.retrieval.metric,
                reduction: self.retrieval.reduction,
                ..RetrievalParams::default()
            },
            train: TrainConfig {
                learning_rate: self.train.learning_rate,
                batch_size: self.train.batch_size,
                max_epochs: self.train.max_epochs,
                patience: self.train.patience,
                optimizer: self.train.optimizer,
                ..TrainConfig::default()
            },
            variant: self.model.variant,
            embed_dim: self.model.embed_dim,
        }
    }

    pub fn grid_space(&self) -> GridSpace {
        GridSpace {
            lookbacks: self.grid.lookbacks.clone(),
            learning_rates: self.grid.learning_rates.clone(),
            ms: self.grid.ms.clone(),
        }
    }

    /// Check everything that can be checked without touching the data.
    pub fn validate(&self) -> Result<()> {
        if self.model.horizons.is_empty() {
            bail!("invalid parameter `horizons`: at least one horizon is required");
        }
        if self.run.seeds.is_empty() {
            bail!("invalid parameter `seeds`: at least one seed is required");
        }
        if self.run.jobs == 0 {
            bail!("invalid parameter `jobs`: must be at least 1");
        }
        for &h in &self.model.horizons {
            self.run_config(h).validate()?;
        }
        Ok(())
    }

    pub fn dataset_path(&self) -> Result<&Path> {
        self.data
            .path
            .as_deref()
            .context("no dataset given: set `data.path` in the config or pass --dataset")
    }

    pub fn dataset_name(&self) -> String {
        self.data.name.clone().unwrap_or_else(|| {
            self.data
                .path
                .as_deref()
                .and_then(|p| p.file_stem())
                .map_or_else(|| "dataset".to_string(), |s| s.to_string_lossy().into_owned())
        })
    }

    /// The raw series as selected by `data.channels` / `data.target`.
    pub fn load_series(&self) -> Result<TimeSeries> {
        let path = self.dataset_path()?;
        if !path.exists() {
            bail!("dataset {} does not exist", path.display());
        }
        let channels = match (&self.data.target, &self.data.channels) {
            (Some(t), _) => Some(vec![t.clone()]),
            (None, c) => c.clone(),
        };
        Ok(load_csv(path, &CsvSchema { channels, frequency: None })?)
    }

    pub fn split_for(&self, len: usize) -> Result<SplitSpec> {
        let mut spec = match self.data.split {
            SplitKind::EttHourly => SplitSpec::ett_hourly(),
            SplitKind::EttMinute => SplitSpec::ett_minute(),
            SplitKind::Ratio => SplitSpec::by_ratio(len, self.data.train_ratio, self.data.test_ratio)?,
            SplitKind::Borders => {
                let (Some(train_end), Some(val_end)) = (self.data.train_end, self.data.val_end) else {
                    bail!("invalid parameter `train_end`/`val_end`: both are required with split = \"borders\"");
                };
                SplitSpec { train_end, val_end, test_end: self.data.test_end, lookback_overlap: true }
            }
        };
        spec.lookback_overlap = self.data.lookback_overlap;
        spec.validate(len)?;
        Ok(spec)
    }

    pub fn dataset(&self) -> Result<(TimeSeries, SplitSpec, Dataset)> {
        let raw = self.load_series()?;
        let split = self.split_for(raw.len())?;
        let ds = Dataset::new(self.dataset_name(), &raw, split)?;
        Ok((raw, split, ds))
    }
}
