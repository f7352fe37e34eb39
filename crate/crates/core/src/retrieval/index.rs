use ndarray::{Array1, Array2, ArrayView2};
use sha2::{Digest, Sha256};

use crate::error::{RaftError, Result};
use crate::series::{group_mean, window_starts, AnchoredPatch, TimeSeries};

/// Sliding-window key/value candidates over the training series, pooled at
/// every configured period.
///
/// Candidates share one start grid across periods. Pooled windows are
/// gathered on demand from per-period moving group means, so the index costs
/// `O(C·T·|P|)` memory regardless of the window length.
///
/// Keys are anchored on their own final pooled step. Values are anchored on
/// the raw final step of their key, the step that immediately precedes them,
/// matching how forecasts are re-anchored on the query's last input value.
#[derive(Debug, Clone)]
pub struct PatchIndex {
    lookback: usize,
    horizon: usize,
    stride: usize,
    periods: Vec<usize>,
    series: Array2<f64>,
    /// `moving[k][[c, t]]` is the mean of `series[c, t..t + periods[k]]`.
    moving: Vec<Array2<f64>>,
    starts: Vec<usize>,
    dataset_hash: String,
}

pub fn build_index(
    train: &TimeSeries,
    lookback: usize,
    horizon: usize,
    stride: usize,
    periods: &[usize],
) -> Result<PatchIndex> {
    let periods = normalize_periods(periods, lookback, horizon)?;
    let starts = window_starts(train.len(), lookback, horizon, stride)?;
    let series = train.values().to_owned();
    let moving = periods.iter().map(|&p| moving_group_means(&series.view(), p)).collect();
    Ok(PatchIndex {
        lookback,
        horizon,
        stride,
        periods,
        dataset_hash: hash_values(&series.view()),
        series,
        moving,
        starts,
    })
}

/// Sorted, deduplicated periods, each within `[1, min(L, F)]`.
pub fn normalize_periods(periods: &[usize], lookback: usize, horizon: usize) -> Result<Vec<usize>> {
    if periods.is_empty() {
        return Err(RaftError::param("periods", "at least one period is required"));
    }
    let mut out = periods.to_vec();
    out.sort_unstable();
    out.dedup();
    for &p in &out {
        if p == 0 {
            return Err(RaftError::param("periods", "period must be at least 1"));
        }
        if p > lookback.min(horizon) {
            return Err(RaftError::PeriodTooLarge {
                period: p,
                width: lookback.min(horizon),
            });
        }
    }
    Ok(out)
}

fn moving_group_means(series: &ArrayView2<'_, f64>, p: usize) -> Array2<f64> {
    let (c, t) = series.dim();
    let inv = 1.0 / p as f64;
    let mut out = Array2::zeros((c, t + 1 - p));
    for (row_in, mut row_out) in series.outer_iter().zip(out.outer_iter_mut()) {
        let row_in = row_in.to_vec();
        for (i, o) in row_out.iter_mut().enumerate() {
            *o = group_mean(row_in[i..i + p].iter(), inv);
        }
    }
    out
}

/// Hex SHA-256 over the shape and little-endian bytes of a value matrix.
pub fn hash_values(values: &ArrayView2<'_, f64>) -> String {
    let mut hasher = Sha256::new();
    hasher.update((values.nrows() as u64).to_le_bytes());
    hasher.update((values.ncols() as u64).to_le_bytes());
    for v in values.iter() {
        hasher.update(v.to_le_bytes());
    }
    hasher
        .finalize()
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

impl PatchIndex {
    pub fn lookback(&self) -> usize {
        self.lookback
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn periods(&self) -> &[usize] {
        &self.periods
    }

    pub fn n_channels(&self) -> usize {
        self.series.nrows()
    }

    pub fn train_len(&self) -> usize {
        self.series.ncols()
    }

    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    /// Candidate start indices, ascending.
    pub fn starts(&self) -> &[usize] {
        &self.starts
    }

    pub fn dataset_hash(&self) -> &str {
        &self.dataset_hash
    }

    pub fn series(&self) -> ArrayView2<'_, f64> {
        self.series.view()
    }

    pub fn key_width(&self, period_pos: usize) -> usize {
        self.lookback / self.periods[period_pos]
    }

    pub fn value_width(&self, period_pos: usize) -> usize {
        self.horizon / self.periods[period_pos]
    }

    /// Write candidate `cand`'s anchored key at `period_pos` into `out`
    /// (channel-major, length `C·⌊L/p⌋`).
    pub fn write_key(&self, period_pos: usize, cand: usize, out: &mut [f64]) {
        let p = self.periods[period_pos];
        let w = self.lookback / p;
        let base = self.starts[cand] + self.lookback % p;
        let moving = &self.moving[period_pos];
        for (c, chunk) in out.chunks_exact_mut(w).enumerate() {
            let row = moving.row(c);
            let anchor = row[base + (w - 1) * p];
            for (j, o) in chunk.iter_mut().enumerate() {
                *o = row[base + j * p] - anchor;
            }
        }
    }

    /// Write candidate `cand`'s value at `period_pos`, anchored on the key's raw final step.
    pub fn write_value(&self, period_pos: usize, cand: usize, out: &mut [f64]) {
        let p = self.periods[period_pos];
        let w = self.horizon / p;
        let start = self.starts[cand];
        let base = start + self.lookback + self.horizon % p;
        let moving = &self.moving[period_pos];
        for (c, chunk) in out.chunks_exact_mut(w).enumerate() {
            let row = moving.row(c);
            let anchor = self.series[[c, start + self.lookback - 1]];
            for (j, o) in chunk.iter_mut().enumerate() {
                *o = row[base + j * p] - anchor;
            }
        }
    }

    pub fn key(&self, period_pos: usize, cand: usize) -> AnchoredPatch {
        let w = self.key_width(period_pos);
        let mut buf = vec![0.0; self.n_channels() * w];
        self.write_key(period_pos, cand, &mut buf);
        let values = Array2::from_shape_vec((self.n_channels(), w), buf).expect("key shape");
        let offset = self.key_offset(period_pos, cand);
        AnchoredPatch { values, offset }
    }

    pub fn value(&self, period_pos: usize, cand: usize) -> AnchoredPatch {
        let w = self.value_width(period_pos);
        let mut buf = vec![0.0; self.n_channels() * w];
        self.write_value(period_pos, cand, &mut buf);
        let values = Array2::from_shape_vec((self.n_channels(), w), buf).expect("value shape");
        let start = self.starts[cand];
        let offset = self.series.column(start + self.lookback - 1).to_owned();
        AnchoredPatch { values, offset }
    }

    fn key_offset(&self, period_pos: usize, cand: usize) -> Array1<f64> {
        let p = self.periods[period_pos];
        let w = self.lookback / p;
        let pos = self.starts[cand] + self.lookback % p + (w - 1) * p;
        self.moving[period_pos].column(pos).to_owned()
    }

    /// Candidate positions `[lo, hi)` whose key∪value span intersects the
    /// span of a query starting at `query_start`.
    pub fn excluded_range(&self, query_start: usize) -> (usize, usize) {
        let span = self.lookback + self.horizon;
        let lo_start = query_start.saturating_sub(span - 1);
        let hi_start = query_start + span;
        let lo = self.starts.partition_point(|&s| s < lo_start);
        let hi = self.starts.partition_point(|&s| s < hi_start);
        (lo, hi)
    }
}
