//! Patch retrieval: candidate index, similarity scoring, top-m selection,
//! temperature softmax weighting and value aggregation, plus the
//! precomputed retrieval cache.

mod cache;
mod index;
mod select;
mod similarity;

use ndarray::{linalg::general_mat_mul, Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{RaftError, Result};
use crate::series::{pool_trailing, Patch};

pub use cache::{precompute, precompute_random, CacheEntry, Fingerprint, RetrievalCache};
pub use index::{build_index, hash_values, normalize_periods, PatchIndex};
pub use select::{
    aggregate_dense, aggregate_sparse, softmax_weights, top_m, uniform_weights, ExclusionRule,
};
pub(crate) use similarity::is_degenerate;
pub use similarity::{similarity, MetricKind, ProjectionHead, Reduction, SimilarityMetric};

use select::TopM;

/// How selected candidates are weighted before aggregation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    #[default]
    Softmax,
    /// Equal weights `1/|J|` (the "without attention" ablation).
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalParams {
    pub m: usize,
    pub tau: f64,
    pub metric: MetricKind,
    #[serde(default)]
    pub reduction: Reduction,
    #[serde(default)]
    pub weighting: Weighting,
}

impl Default for RetrievalParams {
    fn default() -> Self {
        Self {
            m: 20,
            tau: 0.1,
            metric: MetricKind::Pearson,
            reduction: Reduction::ChannelMean,
            weighting: Weighting::Softmax,
        }
    }
}

impl RetrievalParams {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(RaftError::param("m", "must be at least 1"));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(RaftError::param("tau", format!("must be positive, got {}", self.tau)));
        }
        Ok(())
    }
}

/// Retrieval outcome at one period.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeriodRetrieval {
    pub period: usize,
    /// Candidate positions in the index, best first.
    pub candidates: Vec<usize>,
    /// Absolute start indices of the selected candidates.
    pub starts: Vec<usize>,
    pub scores: Vec<f64>,
    pub weights: Vec<f64>,
    /// `C × ⌊F/p⌋` weighted sum of anchored value patches.
    pub aggregate: Array2<f64>,
}

impl PeriodRetrieval {
    /// No admissible candidate existed; the aggregate is all zeros.
    pub fn is_degenerate(&self) -> bool {
        self.candidates.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub periods: Vec<PeriodRetrieval>,
}

impl RetrievalResult {
    pub fn is_degenerate(&self) -> bool {
        self.periods.iter().any(PeriodRetrieval::is_degenerate)
    }

    pub fn aggregates(&self) -> Vec<ArrayView2<'_, f64>> {
        self.periods.iter().map(|p| p.aggregate.view()).collect()
    }

    /// All-zero aggregates, as produced when nothing is admissible.
    pub fn zeros(index: &PatchIndex) -> Self {
        Self {
            periods: index
                .periods()
                .iter()
                .enumerate()
                .map(|(k, &period)| PeriodRetrieval {
                    period,
                    candidates: Vec::new(),
                    starts: Vec::new(),
                    scores: Vec::new(),
                    weights: Vec::new(),
                    aggregate: Array2::zeros((index.n_channels(), index.value_width(k))),
                })
                .collect(),
        }
    }
}

/// One query of a batch: a period-1 `C × L` input and its exclusion rule.
#[derive(Debug, Clone, Copy)]
pub struct Query<'a> {
    pub values: ArrayView2<'a, f64>,
    pub exclusion: ExclusionRule,
}

pub fn retrieve(
    index: &PatchIndex,
    query: &Patch,
    params: &RetrievalParams,
    exclusion: ExclusionRule,
) -> Result<RetrievalResult> {
    retrieve_with(index, query, params, exclusion, None)
}

/// [`retrieve`] with projection heads (one per index period) for the projected-cosine metric.
pub fn retrieve_with(
    index: &PatchIndex,
    query: &Patch,
    params: &RetrievalParams,
    exclusion: ExclusionRule,
    projections: Option<&[ProjectionHead]>,
) -> Result<RetrievalResult> {
    if query.period != 1 {
        return Err(RaftError::param("query", "expected a period-1 patch"));
    }
    let q = Query {
        values: query.values.view(),
        exclusion,
    };
    Ok(retrieve_batch(index, &[q], params, projections)?
        .pop()
        .expect("one result per query"))
}

const QUERY_BLOCK: usize = 256;
const KEY_BLOCK_BYTES: usize = 1 << 24;

/// Retrieve for many queries at once. Scores are computed as blocked matrix
/// products of prepared query and key vectors; each query's result is
/// independent of how the batch is blocked.
pub fn retrieve_batch(
    index: &PatchIndex,
    queries: &[Query<'_>],
    params: &RetrievalParams,
    projections: Option<&[ProjectionHead]>,
) -> Result<Vec<RetrievalResult>> {
    params.validate()?;
    for q in queries {
        check_query(index, q.values)?;
    }
    let metrics = resolve_metrics(index, params, projections)?;
    let blocks: Vec<Result<Vec<RetrievalResult>>> = queries
        .par_chunks(QUERY_BLOCK)
        .map(|block| retrieve_block(index, block, params, &metrics))
        .collect();
    let mut out = Vec::with_capacity(queries.len());
    for b in blocks {
        out.extend(b?);
    }
    Ok(out)
}

fn check_query(index: &PatchIndex, values: ArrayView2<'_, f64>) -> Result<()> {
    let expect = (index.n_channels(), index.lookback());
    if values.dim() != expect {
        return Err(RaftError::shape(format!("{expect:?}"), format!("{:?}", values.dim())));
    }
    Ok(())
}

pub(crate) fn resolve_metrics<'a>(
    index: &PatchIndex,
    params: &RetrievalParams,
    projections: Option<&'a [ProjectionHead]>,
) -> Result<Vec<SimilarityMetric<'a>>> {
    (0..index.periods().len())
        .map(|k| {
            Ok(match params.metric {
                MetricKind::Pearson => SimilarityMetric::Pearson(params.reduction),
                MetricKind::Cosine => SimilarityMetric::Cosine(params.reduction),
                MetricKind::NegL2 => SimilarityMetric::NegL2,
                MetricKind::CosineProjected => {
                    let heads = projections.ok_or_else(|| {
                        RaftError::param("metric", "cosine_projected requires projection heads")
                    })?;
                    let head = heads.get(k).ok_or_else(|| {
                        RaftError::shape(
                            format!("{} projection heads", index.periods().len()),
                            heads.len().to_string(),
                        )
                    })?;
                    let dim = index.n_channels() * index.key_width(k);
                    if head.input_dim() != dim {
                        return Err(RaftError::shape(
                            format!("projection input {dim}"),
                            head.input_dim().to_string(),
                        ));
                    }
                    SimilarityMetric::CosineProjected(head)
                }
            })
        })
        .collect()
}

/// Pool and anchor a `C × L` query at one period, flattened channel-major.
pub(crate) fn anchored_query(values: ArrayView2<'_, f64>, p: usize) -> Vec<f64> {
    let pooled = pool_trailing(values, p);
    let w = pooled.ncols();
    let mut out = Vec::with_capacity(pooled.len());
    for row in pooled.outer_iter() {
        let last = row[w - 1];
        out.extend(row.iter().map(|v| v - last));
    }
    out
}

fn retrieve_block(
    index: &PatchIndex,
    block: &[Query<'_>],
    params: &RetrievalParams,
    metrics: &[SimilarityMetric<'_>],
) -> Result<Vec<RetrievalResult>> {
    let c = index.n_channels();
    let n = index.len();
    let span = index.lookback() + index.horizon();
    let excluded: Vec<(usize, usize)> = block
        .iter()
        .map(|q| match q.exclusion.query_start {
            Some(s) => index.excluded_range(s),
            None => (0, 0),
        })
        .collect();

    let mut results: Vec<RetrievalResult> = block
        .iter()
        .map(|_| RetrievalResult { periods: Vec::with_capacity(metrics.len()) })
        .collect();

    for (k, metric) in metrics.iter().enumerate() {
        let period = index.periods()[k];
        let kw = index.key_width(k);
        let in_dim = c * kw;
        let dim = metric.prepared_dim(in_dim);

        let mut qmat = Array2::<f64>::zeros((block.len(), dim));
        let mut qsq = vec![0.0; block.len()];
        for (i, q) in block.iter().enumerate() {
            let flat = anchored_query(q.values, period);
            let row = qmat.row_mut(i).into_slice().expect("contiguous row");
            metric.prepare(c, &flat, row, true);
            qsq[i] = row.iter().map(|v| v * v).sum();
        }

        let mut tops: Vec<TopM> = block.iter().map(|_| TopM::new(params.m)).collect();
        let key_block = (KEY_BLOCK_BYTES / (8 * in_dim.max(dim))).clamp(64, 2048);
        let mut raw = Array2::<f64>::zeros((key_block, in_dim));
        let mut scores = Array2::<f64>::zeros((block.len(), key_block));
        let mut lo = 0;
        while lo < n {
            let hi = (lo + key_block).min(n);
            let nb = hi - lo;
            for (r, cand) in (lo..hi).enumerate() {
                index.write_key(k, cand, raw.row_mut(r).into_slice().expect("contiguous row"));
            }
            let prepared = metric.prepare_keys(c, raw.slice(ndarray::s![..nb, ..]));
            let ksq: Vec<f64> = prepared.outer_iter().map(|r| r.dot(&r)).collect();
            let mut sview = scores.slice_mut(ndarray::s![.., ..nb]);
            general_mat_mul(1.0, &qmat, &prepared.t(), 0.0, &mut sview);
            for (i, top) in tops.iter_mut().enumerate() {
                let (ex_lo, ex_hi) = excluded[i];
                let srow = scores.row(i);
                for (j, cand) in (lo..hi).enumerate() {
                    if cand >= ex_lo && cand < ex_hi {
                        continue;
                    }
                    let s = metric.finish(srow[j], qsq[i], ksq[j]);
                    top.offer(s, index.starts()[cand], cand);
                }
            }
            lo = hi;
        }

        for (i, top) in tops.into_iter().enumerate() {
            let chosen = top.into_sorted();
            debug_assert!(chosen
                .iter()
                .all(|&(_, st, _)| block[i].exclusion.admits(st, span)));
            let pr = finish_period(index, k, params, chosen)?;
            results[i].periods.push(pr);
        }
    }
    Ok(results)
}

fn finish_period(
    index: &PatchIndex,
    k: usize,
    params: &RetrievalParams,
    chosen: Vec<(f64, usize, usize)>,
) -> Result<PeriodRetrieval> {
    let scores: Vec<f64> = chosen.iter().map(|x| x.0).collect();
    let starts: Vec<usize> = chosen.iter().map(|x| x.1).collect();
    let candidates: Vec<usize> = chosen.iter().map(|x| x.2).collect();
    let weights = if candidates.is_empty() {
        Vec::new()
    } else {
        match params.weighting {
            Weighting::Softmax => softmax_weights(&scores, params.tau)?,
            Weighting::Uniform => uniform_weights(candidates.len()),
        }
    };
    let aggregate = aggregate_values(index, k, &candidates, &weights);
    Ok(PeriodRetrieval {
        period: index.periods()[k],
        candidates,
        starts,
        scores,
        weights,
        aggregate,
    })
}

pub(crate) fn aggregate_values(index: &PatchIndex, k: usize, candidates: &[usize], weights: &[f64]) -> Array2<f64> {
    let c = index.n_channels();
    let w = index.value_width(k);
    let mut acc = vec![0.0; c * w];
    let mut buf = vec![0.0; c * w];
    for (&cand, &wt) in candidates.iter().zip(weights) {
        index.write_value(k, cand, &mut buf);
        for (a, b) in acc.iter_mut().zip(&buf) {
            *a += wt * b;
        }
    }
    Array2::from_shape_vec((c, w), acc).expect("aggregate shape")
}

/// Mixes a run seed with a query start into an independent stream seed.
pub fn query_seed(seed: u64, query_start: usize) -> u64 {
    let mut z = seed ^ (query_start as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Uniformly sample `min(m, #admissible)` admissible candidates and weight
/// them equally (the random-retrieval ablation). The same sample is used at
/// every period; scores are reported for reference only.
pub fn random_retrieve(
    index: &PatchIndex,
    query: &Patch,
    params: &RetrievalParams,
    exclusion: ExclusionRule,
    seed: u64,
) -> Result<RetrievalResult> {
    random_retrieve_with(index, query.values.view(), params, exclusion, seed, None)
}

pub fn random_retrieve_with(
    index: &PatchIndex,
    query: ArrayView2<'_, f64>,
    params: &RetrievalParams,
    exclusion: ExclusionRule,
    seed: u64,
    projections: Option<&[ProjectionHead]>,
) -> Result<RetrievalResult> {
    params.validate()?;
    check_query(index, query)?;
    let metrics = resolve_metrics(index, params, projections)?;
    let n = index.len();
    let (ex_lo, ex_hi) = match exclusion.query_start {
        Some(s) => index.excluded_range(s),
        None => (0, 0),
    };
    let admissible = n - (ex_hi - ex_lo);
    let take = params.m.min(admissible);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picks: Vec<usize> = rand::seq::index::sample(&mut rng, admissible, take)
        .into_iter()
        .map(|j| if j < ex_lo { j } else { j + (ex_hi - ex_lo) })
        .collect();
    picks.sort_unstable();

    let c = index.n_channels();
    let mut periods = Vec::with_capacity(metrics.len());
    for (k, metric) in metrics.iter().enumerate() {
        let flat = anchored_query(query, index.periods()[k]);
        let dim = metric.prepared_dim(flat.len());
        let mut pq = vec![0.0; dim];
        metric.prepare(c, &flat, &mut pq, true);
        let qsq: f64 = pq.iter().map(|v| v * v).sum();
        let mut raw = vec![0.0; flat.len()];
        let mut pk = vec![0.0; dim];
        let scores = picks
            .iter()
            .map(|&cand| {
                index.write_key(k, cand, &mut raw);
                metric.prepare(c, &raw, &mut pk, false);
                let dot: f64 = pq.iter().zip(&pk).map(|(a, b)| a * b).sum();
                let ksq: f64 = pk.iter().map(|v| v * v).sum();
                metric.finish(dot, qsq, ksq)
            })
            .collect();
        let weights = uniform_weights(picks.len());
        periods.push(PeriodRetrieval {
            period: index.periods()[k],
            candidates: picks.clone(),
            starts: picks.iter().map(|&p| index.starts()[p]).collect(),
            scores,
            aggregate: aggregate_values(index, k, &picks, &weights),
            weights,
        });
    }
    Ok(RetrievalResult { periods })
}
