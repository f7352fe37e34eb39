use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{mean, spearman};
use super::report::{MetricReport, MetricRow, TimingRow};
use super::{run_single, Dataset, RunConfig, RunOutcome, TestWindows, Variant};
use crate::error::{RaftError, Result};
use crate::retrieval::{similarity, MetricKind, SimilarityMetric};
use crate::series::{pool_trailing, AnchoredPatch, SplitSpec, TimeSeries};
use crate::synthetic::{assemble, PatternKind, SyntheticSpec};

fn rows_for(dataset: &Dataset, cfg: &RunConfig, setting: &str, out: &RunOutcome) -> (MetricRow, TimingRow) {
    let metric = MetricRow {
        dataset: dataset.name.clone(),
        horizon: Some(cfg.horizon),
        variant: cfg.variant.to_string(),
        setting: setting.to_string(),
        seed: Some(out.seed),
        mse: out.test_mse.unwrap_or(f64::NAN),
        mae: out.test_mae.unwrap_or(f64::NAN),
    };
    let timing = TimingRow {
        dataset: dataset.name.clone(),
        horizon: cfg.horizon,
        variant: cfg.variant.to_string(),
        setting: setting.to_string(),
        seed: out.seed,
        precompute_seconds: out.timings.precompute_seconds,
        epoch_seconds: out.timings.epoch_seconds,
        train_seconds: out.timings.train_seconds,
        inference_seconds: out.timings.inference_seconds,
    };
    (metric, timing)
}

/// Run every `(config, seed)` job (in parallel) and collect rows in job order.
fn run_jobs(dataset: &Dataset, jobs: Vec<(RunConfig, String, u64)>) -> Result<(MetricReport, Vec<RunOutcome>)> {
    let outcomes: Vec<RunOutcome> = jobs
        .par_iter()
        .map(|(cfg, _, seed)| run_single(dataset, cfg, *seed, &TestWindows::All))
        .collect::<Result<_>>()?;
    let mut report = MetricReport::default();
    for ((cfg, setting, _), out) in jobs.iter().zip(&outcomes) {
        let (m, t) = rows_for(dataset, cfg, setting, out);
        report.rows.push(m);
        report.timings.push(t);
    }
    Ok((report, outcomes))
}

/// Train and test one configuration per horizon and seed.
pub fn evaluate(dataset: &Dataset, cfg: &RunConfig, horizons: &[usize], seeds: &[u64]) -> Result<MetricReport> {
    let jobs = horizons
        .iter()
        .flat_map(|&h| seeds.iter().map(move |&s| (RunConfig { horizon: h, ..cfg.clone() }, String::new(), s)))
        .collect();
    Ok(run_jobs(dataset, jobs)?.0)
}

/// [`evaluate`] with the retrieval stage swapped for `variant`.
pub fn run_ablation(
    dataset: &Dataset,
    cfg: &RunConfig,
    variant: Variant,
    horizons: &[usize],
    seeds: &[u64],
) -> Result<MetricReport> {
    evaluate(dataset, &RunConfig { variant, ..cfg.clone() }, horizons, seeds)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpace {
    pub lookbacks: Vec<usize>,
    pub learning_rates: Vec<f64>,
    pub ms: Vec<usize>,
}

impl Default for GridSpace {
    fn default() -> Self {
        Self {
            lookbacks: vec![96, 192, 336, 720],
            learning_rates: vec![1e-4, 1e-3, 1e-2],
            ms: vec![1, 5, 10, 20],
        }
    }
}

impl GridSpace {
    /// Points in lexicographic (look-back, learning rate, m) order.
    pub fn points(&self) -> Result<Vec<GridPoint>> {
        if self.lookbacks.is_empty() || self.learning_rates.is_empty() || self.ms.is_empty() {
            return Err(RaftError::Empty("grid axis".into()));
        }
        let mut out = Vec::new();
        for &lookback in &self.lookbacks {
            for &learning_rate in &self.learning_rates {
                for &m in &self.ms {
                    out.push(GridPoint { lookback, learning_rate, m });
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub lookback: usize,
    pub learning_rate: f64,
    pub m: usize,
}

impl GridPoint {
    pub fn apply(&self, cfg: &RunConfig) -> RunConfig {
        let mut c = cfg.clone();
        c.lookback = self.lookback;
        c.train.learning_rate = self.learning_rate;
        c.retrieval.m = self.m;
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    /// Every point with its seed-mean validation MSE, in grid order.
    pub table: Vec<(GridPoint, f64)>,
    pub best: GridPoint,
    /// Test metrics of the selected point only.
    pub test: MetricReport,
}

impl GridResult {
    pub fn table_csv(&self) -> String {
        let mut s = String::from("lookback,learning_rate,m,val_mse,selected\n");
        for (p, v) in &self.table {
            s.push_str(&format!("{},{},{},{},{}\n", p.lookback, p.learning_rate, p.m, v, *p == self.best));
        }
        s
    }
}

/// Exhaustive search on validation MSE; ties go to the earliest grid point.
/// Test windows are only scored for the selected point.
pub fn grid_search(
    space: &GridSpace,
    dataset: &Dataset,
    cfg: &RunConfig,
    horizon: usize,
    seeds: &[u64],
) -> Result<GridResult> {
    let points = space.points()?;
    let jobs: Vec<(usize, u64)> = (0..points.len()).flat_map(|i| seeds.iter().map(move |&s| (i, s))).collect();
    let vals: Vec<f64> = jobs
        .par_iter()
        .map(|&(i, seed)| {
            let c = RunConfig { horizon, ..points[i].apply(cfg) };
            run_single(dataset, &c, seed, &TestWindows::Skip).map(|o| o.val_mse)
        })
        .collect::<Result<_>>()?;
    let table: Vec<(GridPoint, f64)> = points
        .iter()
        .enumerate()
        .map(|(i, p)| (*p, mean(&vals[i * seeds.len()..(i + 1) * seeds.len()])))
        .collect();
    let best = table
        .iter()
        .fold(None::<(GridPoint, f64)>, |acc, &(p, v)| match acc {
            Some((_, bv)) if bv <= v => acc,
            _ => Some((p, v)),
        })
        .map(|(p, _)| p)
        .expect("nonempty grid");
    let test = evaluate(dataset, &RunConfig { horizon, ..best.apply(cfg) }, &[horizon], seeds)?;
    Ok(GridResult { table, best, test })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrideRow {
    pub stride: usize,
    pub candidates: usize,
    pub precompute_seconds: f64,
    pub mse: f64,
    pub mae: f64,
}

/// Precompute wall time and test error per candidate stride (seed means).
pub fn stride_study(dataset: &Dataset, cfg: &RunConfig, strides: &[usize], seeds: &[u64]) -> Result<(Vec<StrideRow>, MetricReport)> {
    let jobs = strides
        .iter()
        .flat_map(|&st| seeds.iter().map(move |&s| (RunConfig { stride: st, ..cfg.clone() }, format!("stride={st}"), s)))
        .collect();
    // sequential so wall times are not distorted by sibling runs
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().map_err(|e| RaftError::param("jobs", e.to_string()))?;
    let (report, outcomes) = pool.install(|| run_jobs(dataset, jobs))?;
    let rows = strides
        .iter()
        .enumerate()
        .map(|(i, &stride)| {
            let outs = &outcomes[i * seeds.len()..(i + 1) * seeds.len()];
            StrideRow {
                stride,
                candidates: outs[0].index.as_ref().map_or(0, |ix| ix.len()),
                precompute_seconds: mean(&outs.iter().map(|o| o.timings.precompute_seconds).collect::<Vec<_>>()),
                mse: mean(&outs.iter().map(|o| o.test_mse.unwrap_or(f64::NAN)).collect::<Vec<_>>()),
                mae: mean(&outs.iter().map(|o| o.test_mae.unwrap_or(f64::NAN)).collect::<Vec<_>>()),
            }
        })
        .collect();
    Ok((rows, report))
}

/// Same pipeline and seeds for every similarity metric.
pub fn similarity_study(dataset: &Dataset, cfg: &RunConfig, metrics: &[MetricKind], seeds: &[u64]) -> Result<MetricReport> {
    let jobs = metrics
        .iter()
        .flat_map(|&metric| {
            let mut c = cfg.clone();
            c.retrieval.metric = metric;
            seeds.iter().map(move |&s| (c.clone(), metric.to_string(), s))
        })
        .collect();
    Ok(run_jobs(dataset, jobs)?.0)
}

/// Retrain with and without retrieval on the trailing `fraction` of the
/// training region.
pub fn training_length_study(
    raw: &TimeSeries,
    name: &str,
    split: SplitSpec,
    cfg: &RunConfig,
    fractions: &[f64],
    seeds: &[u64],
) -> Result<MetricReport> {
    let mut report = MetricReport::default();
    for &fraction in fractions {
        let dataset = Dataset::truncate_train(raw, name, split, fraction)?;
        let needed = cfg.lookback + cfg.horizon;
        let have = split.train_end - dataset.train_start;
        if have < needed {
            return Err(RaftError::SeriesTooShort { needed, available: have });
        }
        let jobs = [Variant::Full, Variant::NoRetrieval]
            .iter()
            .flat_map(|&v| seeds.iter().map(move |&s| (RunConfig { variant: v, ..cfg.clone() }, format!("fraction={fraction}"), s)))
            .collect();
        report.extend(run_jobs(&dataset, jobs)?.0);
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsRecord {
    pub query_start: usize,
    pub key_similarity: f64,
    pub value_similarity: f64,
    pub mse_with: f64,
    pub mse_without: f64,
    pub mse_change_percent: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsSummary {
    pub records: usize,
    pub spearman_key_value: f64,
    pub spearman_value_change: f64,
}

/// Per test window: mean similarity of the input to its retrieved keys and
/// of the true future to the retrieved values (averaged over selected
/// candidates and periods), and the MSE change retrieval brings.
pub fn diagnostics(
    dataset: &Dataset,
    cfg: &RunConfig,
    with: &RunOutcome,
    without: &RunOutcome,
) -> Result<(Vec<DiagnosticsRecord>, DiagnosticsSummary)> {
    let (index, cache) = match (&with.index, &with.test_cache) {
        (Some(i), Some(c)) => (i, c),
        _ => return Err(RaftError::param("diagnostics", "the retrieval run must keep its index and test cache")),
    };
    if with.test_windows.len() != without.test_windows.len() {
        return Err(RaftError::shape(with.test_windows.len().to_string(), without.test_windows.len().to_string()));
    }
    let metric = SimilarityMetric::Pearson(cfg.retrieval.reduction);
    let (l, f) = (cfg.lookback, cfg.horizon);
    let series = dataset.series.values();
    let mut records = Vec::with_capacity(with.test_windows.len());
    for (&(q, mse_with), &(q2, mse_without)) in with.test_windows.iter().zip(&without.test_windows) {
        if q != q2 {
            return Err(RaftError::param("diagnostics", "runs scored different windows"));
        }
        let result = cache.require(q)?;
        let mut key_sims = Vec::new();
        let mut value_sims = Vec::new();
        for (k, pr) in result.periods.iter().enumerate() {
            if pr.candidates.is_empty() {
                continue;
            }
            key_sims.push(mean(&pr.scores));
            let future = pool_trailing(series.slice(ndarray::s![.., q + l..q + l + f]), pr.period);
            let anchor = series.column(q + l - 1).to_owned();
            let target = AnchoredPatch::relative_to(future.view(), &anchor);
            let sims = pr
                .candidates
                .iter()
                .map(|&c| similarity(&target, &index.value(k, c), &metric))
                .collect::<Result<Vec<_>>>()?;
            value_sims.push(mean(&sims));
        }
        if key_sims.is_empty() {
            continue;
        }
        let change = if mse_without > 0.0 { 100.0 * (mse_with - mse_without) / mse_without } else { 0.0 };
        records.push(DiagnosticsRecord {
            query_start: q,
            key_similarity: mean(&key_sims),
            value_similarity: mean(&value_sims),
            mse_with,
            mse_without,
            mse_change_percent: change,
        });
    }
    let ks: Vec<f64> = records.iter().map(|r| r.key_similarity).collect();
    let vs: Vec<f64> = records.iter().map(|r| r.value_similarity).collect();
    let cs: Vec<f64> = records.iter().map(|r| r.mse_change_percent).collect();
    let summary = DiagnosticsSummary {
        records: records.len(),
        spearman_key_value: spearman(&ks, &vs)?,
        spearman_value_change: spearman(&vs, &cs)?,
    };
    Ok((records, summary))
}

pub fn write_diagnostics_csv(records: &[DiagnosticsRecord], path: &Path) -> Result<()> {
    let mut s = String::from("query_start,key_similarity,value_similarity,mse_with,mse_without,mse_change_percent\n");
    for r in records {
        s.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.query_start, r.key_similarity, r.value_similarity, r.mse_with, r.mse_without, r.mse_change_percent
        ));
    }
    std::fs::write(path, s).map_err(|e| RaftError::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticRow {
    pub occurrences: usize,
    pub series_seed: u64,
    pub mse_with: f64,
    pub mse_without: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSummary {
    pub occurrences: usize,
    pub series: usize,
    pub mse_with: f64,
    pub mse_without: f64,
    /// `100 · (with − without) / without` on the mean MSEs (negative is better).
    pub change_percent: f64,
}

impl SyntheticSummary {
    pub fn improvement_percent(&self) -> f64 {
        -self.change_percent
    }
}

/// Generate `n_series` series per occurrence level, train with and without
/// retrieval, and score windows whose target meets a test-region pattern.
pub fn synthetic_study(
    base: &SyntheticSpec,
    kind: PatternKind,
    occurrences: &[usize],
    n_series: usize,
    cfg: &RunConfig,
) -> Result<(Vec<SyntheticRow>, Vec<SyntheticSummary>)> {
    let jobs: Vec<(usize, u64)> = occurrences
        .iter()
        .flat_map(|&o| (0..n_series as u64).map(move |i| (o, base.seed + i)))
        .collect();
    let rows: Vec<SyntheticRow> = jobs
        .par_iter()
        .map(|&(occ, seed)| {
            let spec = SyntheticSpec { pattern_kind: kind, occurrences_per_pattern: occ, seed, ..base.clone() };
            let synth = assemble(&spec)?;
            let dataset = Dataset::new(format!("synthetic-{}", kind.as_str()), &synth.series, synth.split)?;
            let windows = TestWindows::Starts(synth.pattern_query_starts(cfg.lookback, cfg.horizon));
            let with = run_single(&dataset, &RunConfig { variant: Variant::Full, ..cfg.clone() }, seed, &windows)?;
            let without = run_single(&dataset, &RunConfig { variant: Variant::NoRetrieval, ..cfg.clone() }, seed, &windows)?;
            Ok(SyntheticRow {
                occurrences: occ,
                series_seed: seed,
                mse_with: with.test_mse.unwrap_or(f64::NAN),
                mse_without: without.test_mse.unwrap_or(f64::NAN),
            })
        })
        .collect::<Result<_>>()?;
    let summaries = occurrences
        .iter()
        .map(|&occ| {
            let sel: Vec<&SyntheticRow> = rows.iter().filter(|r| r.occurrences == occ).collect();
            let w = mean(&sel.iter().map(|r| r.mse_with).collect::<Vec<_>>());
            let wo = mean(&sel.iter().map(|r| r.mse_without).collect::<Vec<_>>());
            SyntheticSummary { occurrences: occ, series: sel.len(), mse_with: w, mse_without: wo, change_percent: 100.0 * (w - wo) / wo }
        })
        .collect();
    Ok((rows, summaries))
}
