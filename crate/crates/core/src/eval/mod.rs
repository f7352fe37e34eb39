//! Experiment harness: the end-to-end train/evaluate pipeline, metrics,
//! reports and the studies built on top of them (grid search, ablations,
//! stride, similarity metric, training length, diagnostics, synthetic).

mod metrics;
mod report;
mod studies;

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{RaftError, Result};
use crate::model::{
    for_each_prediction, init_model, train, ForecastModel, ModelSpec, RetrievalSource, TrainConfig,
    TrainHistory, WindowSet,
};
use crate::retrieval::{
    build_index, precompute, precompute_random, MetricKind, PatchIndex, RetrievalCache,
    RetrievalParams, Weighting,
};
use crate::series::{apply_standardize, fit_standardize, ChannelStats, SplitSpec, TimeSeries};

pub use metrics::{average_ranks, mae, mean, mse, pearson, spearman, ErrorAccumulator};
pub use report::{MetricReport, MetricRow, TimingRow};
pub use studies::{
    diagnostics, evaluate, grid_search, run_ablation, similarity_study, stride_study,
    synthetic_study, training_length_study, write_diagnostics_csv, DiagnosticsRecord,
    DiagnosticsSummary, GridPoint, GridResult, GridSpace, StrideRow, SyntheticRow,
    SyntheticSummary,
};

/// What the retrieval stage does in a run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[default]
    Full,
    /// Uniformly sampled candidates with equal weights.
    RandomRetrieval,
    /// Top-m by similarity, equal weights.
    NoAttention,
    /// Period 1 only.
    OnePeriod,
    /// Linear forecaster alone.
    NoRetrieval,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::RandomRetrieval,
        Variant::NoAttention,
        Variant::OnePeriod,
        Variant::NoRetrieval,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::RandomRetrieval => "random_retrieval",
            Variant::NoAttention => "no_attention",
            Variant::OnePeriod => "one_period",
            Variant::NoRetrieval => "no_retrieval",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Variant {
    type Err = RaftError;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| RaftError::UnknownVariant(s.to_string()))
    }
}

/// A standardized series with its split.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub name: String,
    /// Standardized with statistics of `[train_start, train_end)`.
    pub series: TimeSeries,
    pub split: SplitSpec,
    pub stats: ChannelStats,
    /// First step of the training region (nonzero after truncation).
    pub train_start: usize,
}

impl Dataset {
    pub fn new(name: impl Into<String>, raw: &TimeSeries, split: SplitSpec) -> Result<Self> {
        Self::with_train_start(name.into(), raw, split, 0)
    }

    fn with_train_start(name: String, raw: &TimeSeries, split: SplitSpec, train_start: usize) -> Result<Self> {
        split.validate(raw.len())?;
        let test_end = split.test_end_for(raw.len());
        let raw = if test_end < raw.len() { raw.slice(0, test_end)? } else { raw.clone() };
        let stats = fit_standardize(&raw.slice(train_start, split.train_end)?);
        let series = apply_standardize(&stats, &raw)?;
        Ok(Self { name, series, split, stats, train_start })
    }

    /// Keep only the trailing `fraction` of the training region; statistics
    /// are refitted on what remains.
    pub fn truncate_train(raw: &TimeSeries, name: impl Into<String>, split: SplitSpec, fraction: f64) -> Result<Self> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(RaftError::param("fraction", format!("must lie in (0, 1], got {fraction}")));
        }
        let keep = (split.train_end as f64 * fraction).round() as usize;
        Self::with_train_start(name.into(), raw, split, split.train_end - keep.max(1))
    }

    pub fn train_series(&self) -> Result<TimeSeries> {
        self.series.slice(self.train_start, self.split.train_end)
    }

    fn starts(&self, lo: usize, hi: usize, l: usize, f: usize) -> Vec<usize> {
        let lo = if self.split.lookback_overlap { lo.saturating_sub(l) } else { lo };
        match hi.checked_sub(l + f) {
            Some(last) if last >= lo => (lo..=last).collect(),
            _ => Vec::new(),
        }
    }

    /// Absolute starts of validation windows.
    pub fn val_starts(&self, l: usize, f: usize) -> Vec<usize> {
        self.starts(self.split.train_end, self.split.val_end, l, f)
    }

    /// Absolute starts of test windows.
    pub fn test_starts(&self, l: usize, f: usize) -> Vec<usize> {
        self.starts(self.split.val_end, self.series.len(), l, f)
    }
}

/// Everything that defines one training run apart from the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub lookback: usize,
    pub horizon: usize,
    pub periods: Vec<usize>,
    pub stride: usize,
    pub retrieval: RetrievalParams,
    pub train: TrainConfig,
    pub variant: Variant,
    /// Embedding width for projected cosine similarity.
    pub embed_dim: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            lookback: 96,
            horizon: 96,
            periods: vec![1, 2, 4],
            stride: 1,
            retrieval: RetrievalParams::default(),
            train: TrainConfig::default(),
            variant: Variant::Full,
            embed_dim: 64,
        }
    }
}

impl RunConfig {
    /// Periods after applying the variant.
    pub fn effective_periods(&self) -> Vec<usize> {
        match self.variant {
            Variant::OnePeriod => vec![1],
            _ => self.periods.clone(),
        }
    }

    /// Retrieval parameters after applying the variant.
    pub fn effective_retrieval(&self) -> RetrievalParams {
        let mut p = self.retrieval;
        if matches!(self.variant, Variant::NoAttention | Variant::RandomRetrieval) {
            p.weighting = Weighting::Uniform;
        }
        p
    }

    pub fn uses_retrieval(&self) -> bool {
        self.variant != Variant::NoRetrieval
    }

    pub fn model_spec(&self, channels: usize) -> Result<ModelSpec> {
        let spec = ModelSpec::new(self.lookback, self.horizon, &self.effective_periods())?;
        if !self.uses_retrieval() {
            return Ok(spec.without_retrieval());
        }
        if self.retrieval.metric == MetricKind::CosineProjected {
            return spec.with_projection(channels, self.embed_dim);
        }
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 {
            return Err(RaftError::param("stride", "must be at least 1"));
        }
        if self.variant == Variant::RandomRetrieval && self.retrieval.metric == MetricKind::CosineProjected {
            return Err(RaftError::param("metric", "random retrieval does not use projected similarity"));
        }
        self.retrieval.validate()?;
        self.train.validate()?;
        self.model_spec(1).map(|_| ())
    }
}

/// Which test windows a run scores.
#[derive(Debug, Clone, PartialEq)]
pub enum TestWindows {
    All,
    Starts(Vec<usize>),
    Skip,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub precompute_seconds: f64,
    pub epoch_seconds: f64,
    pub train_seconds: f64,
    pub inference_seconds: f64,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub seed: u64,
    pub model: ForecastModel,
    pub history: TrainHistory,
    pub val_mse: f64,
    pub test_mse: Option<f64>,
    pub test_mae: Option<f64>,
    /// `(query start, window MSE)` for every scored test window.
    pub test_windows: Vec<(usize, f64)>,
    pub timings: Timings,
    pub index: Option<PatchIndex>,
    pub test_cache: Option<RetrievalCache>,
}

/// Build caches for the given starts according to the variant.
fn cache_for(
    cfg: &RunConfig,
    index: &PatchIndex,
    series: &TimeSeries,
    starts: &[usize],
    training: bool,
    seed: u64,
) -> Result<RetrievalCache> {
    let params = cfg.effective_retrieval();
    if cfg.variant == Variant::RandomRetrieval {
        precompute_random(index, series.values(), starts, &params, training, seed)
    } else {
        precompute(index, series.values(), starts, &params, training)
    }
}

/// Train one model on `dataset` and score it.
///
/// The retrieval database is the training region. Training windows are all
/// stride-1 windows of that region and exclude overlapping candidates;
/// validation and test windows retrieve without exclusion.
pub fn run_single(dataset: &Dataset, cfg: &RunConfig, seed: u64, test: &TestWindows) -> Result<RunOutcome> {
    cfg.validate()?;
    let (l, f) = (cfg.lookback, cfg.horizon);
    let train_ts = dataset.train_series()?;
    let train_starts: Vec<usize> = match train_ts.len().checked_sub(l + f) {
        Some(last) => (0..=last).collect(),
        None => return Err(RaftError::SeriesTooShort { needed: l + f, available: train_ts.len() }),
    };
    let val_starts = dataset.val_starts(l, f);
    let test_starts = match test {
        TestWindows::All => dataset.test_starts(l, f),
        TestWindows::Starts(s) => s.clone(),
        TestWindows::Skip => Vec::new(),
    };
    if val_starts.is_empty() {
        return Err(RaftError::Empty("validation windows".into()));
    }

    let spec = cfg.model_spec(dataset.series.n_channels())?;
    let model = init_model(spec, seed);
    let train_cfg = TrainConfig { seed, ..cfg.train };
    let params = cfg.effective_retrieval();
    let projected = model.projections().is_some();

    let clock = Instant::now();
    let index = if cfg.uses_retrieval() {
        Some(build_index(&train_ts, l, f, cfg.stride, &cfg.effective_periods())?)
    } else {
        None
    };
    let caches = match (&index, projected) {
        (Some(ix), false) => Some((
            cache_for(cfg, ix, &train_ts, &train_starts, true, seed)?,
            cache_for(cfg, ix, &dataset.series, &val_starts, false, seed)?,
            cache_for(cfg, ix, &dataset.series, &test_starts, false, seed)?,
        )),
        _ => None,
    };
    let precompute_seconds = clock.elapsed().as_secs_f64();

    let source = |which: usize, training: bool| -> RetrievalSource<'_> {
        match (&index, &caches) {
            (None, _) => RetrievalSource::None,
            (Some(_), Some(c)) => RetrievalSource::Cache([&c.0, &c.1, &c.2][which]),
            (Some(ix), None) => RetrievalSource::Live { index: ix, params, training },
        }
    };
    let train_set = WindowSet::new(train_ts.values(), train_starts, source(0, true));
    let val_set = WindowSet::new(dataset.series.values(), val_starts, source(1, false));
    let test_set = WindowSet::new(dataset.series.values(), test_starts, source(2, false));

    let clock = Instant::now();
    let (model, history) = train(model, &train_set, &val_set, &train_cfg)?;
    let train_seconds = clock.elapsed().as_secs_f64();

    let clock = Instant::now();
    let mut acc = ErrorAccumulator::default();
    let mut windows = Vec::with_capacity(test_set.len());
    if !test_set.is_empty() {
        for_each_prediction(&model, &test_set, train_cfg.batch_size, |start, y, t| {
            acc.add(&y, &t);
            let n = y.len() as f64;
            windows.push((start, y.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n));
        })?;
    }
    let inference_seconds = clock.elapsed().as_secs_f64();
    let scored = acc.count() > 0;
    Ok(RunOutcome {
        seed,
        val_mse: history.best_val_loss(),
        timings: Timings {
            precompute_seconds,
            epoch_seconds: history.mean_epoch_seconds(),
            train_seconds,
            inference_seconds,
        },
        model,
        history,
        test_mse: scored.then(|| acc.mse()),
        test_mae: scored.then(|| acc.mae()),
        test_windows: windows,
        test_cache: caches.map(|c| c.2),
        index,
    })
}


/// Test-window errors of an already trained model.
#[derive(Debug, Clone, PartialEq)]
pub struct Score {
    pub mse: f64,
    pub mae: f64,
    pub windows: Vec<(usize, f64)>,
}

/// Score `model` on `dataset`'s test windows, rebuilding the retrieval
/// database from the training region exactly as [`run_single`] does.
pub fn score_model(dataset: &Dataset, cfg: &RunConfig, model: &ForecastModel, seed: u64) -> Result<Score> {
    cfg.validate()?;
    let (l, f) = (cfg.lookback, cfg.horizon);
    let expected = cfg.model_spec(dataset.series.n_channels())?;
    if model.spec != expected {
        return Err(RaftError::FingerprintMismatch {
            expected: format!("{expected:?}"),
            found: format!("{:?}", model.spec),
        });
    }
    let starts = dataset.test_starts(l, f);
    if starts.is_empty() {
        return Err(RaftError::Empty("test windows".into()));
    }
    let train_ts = dataset.train_series()?;
    let index = if cfg.uses_retrieval() {
        Some(build_index(&train_ts, l, f, cfg.stride, &cfg.effective_periods())?)
    } else {
        None
    };
    let cache = match &index {
        Some(ix) if model.projections().is_none() => Some(cache_for(cfg, ix, &dataset.series, &starts, false, seed)?),
        _ => None,
    };
    let source = match (&index, &cache) {
        (None, _) => RetrievalSource::None,
        (Some(_), Some(c)) => RetrievalSource::Cache(c),
        (Some(ix), None) => RetrievalSource::Live { index: ix, params: cfg.effective_retrieval(), training: false },
    };
    let set = WindowSet::new(dataset.series.values(), starts, source);
    let mut acc = ErrorAccumulator::default();
    let mut windows = Vec::with_capacity(set.len());
    for_each_prediction(model, &set, cfg.train.batch_size, |start, y, t| {
        acc.add(&y, &t);
        let n = y.len() as f64;
        windows.push((start, y.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n));
    })?;
    Ok(Score { mse: acc.mse(), mae: acc.mae(), windows })
}

#[cfg(test)]
mod tests;
