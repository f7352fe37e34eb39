use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use super::TimeSeries;
use crate::error::{RaftError, Result};

/// A `C × W` slice of a series. `period` is the pooling factor applied to it
/// (1 for raw steps); `start` is the absolute index of its first raw step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Patch {
    pub values: Array2<f64>,
    pub start: usize,
    pub period: usize,
}

impl Patch {
    pub fn new(values: Array2<f64>, start: usize, period: usize) -> Self {
        Self {
            values,
            start,
            period,
        }
    }

    pub fn width(&self) -> usize {
        self.values.ncols()
    }

    pub fn n_channels(&self) -> usize {
        self.values.nrows()
    }

    /// Per-channel value at the final step.
    pub fn last(&self) -> Array1<f64> {
        self.values.column(self.width() - 1).to_owned()
    }
}

/// A patch expressed relative to a per-channel offset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchoredPatch {
    pub values: Array2<f64>,
    pub offset: Array1<f64>,
}

impl AnchoredPatch {
    /// Subtract an arbitrary per-channel offset (used for value patches, which
    /// are anchored on their key's final step rather than their own).
    pub fn relative_to(values: ArrayView2<'_, f64>, offset: &Array1<f64>) -> Self {
        let mut out = values.to_owned();
        out -= &offset.view().insert_axis(Axis(1));
        Self {
            values: out,
            offset: offset.clone(),
        }
    }

    pub fn width(&self) -> usize {
        self.values.ncols()
    }

    pub fn n_channels(&self) -> usize {
        self.values.nrows()
    }
}

/// Sequential mean of one pooling group; every pooling path goes through here
/// so pooled values are bit-identical wherever they are computed.
#[inline]
pub(crate) fn group_mean<'a>(xs: impl Iterator<Item = &'a f64>, inv: f64) -> f64 {
    xs.fold(0.0, |acc, &x| acc + x) * inv
}

/// Average-pool each row over non-overlapping groups of `p` steps. When `p`
/// does not divide the width, the oldest `W mod p` steps are dropped so the
/// last output step always averages the most recent `p` inputs.
pub fn pool_trailing(values: ArrayView2<'_, f64>, p: usize) -> Array2<f64> {
    debug_assert!(p >= 1);
    let width = values.ncols();
    if p == 1 {
        return values.to_owned();
    }
    let out_w = width / p;
    let skip = width % p;
    let inv = 1.0 / p as f64;
    let mut out = Array2::zeros((values.nrows(), out_w));
    for (row_in, mut row_out) in values.outer_iter().zip(out.outer_iter_mut()) {
        for (j, o) in row_out.iter_mut().enumerate() {
            let lo = skip + j * p;
            *o = group_mean(row_in.slice(s![lo..lo + p]).iter(), inv);
        }
    }
    out
}

pub fn downsample(patch: &Patch, p: usize) -> Result<Patch> {
    if patch.period != 1 {
        return Err(RaftError::param(
            "patch",
            format!("expected a period-1 patch, got period {}", patch.period),
        ));
    }
    if p == 0 {
        return Err(RaftError::param("period", "must be at least 1"));
    }
    if p > patch.width() {
        return Err(RaftError::PeriodTooLarge {
            period: p,
            width: patch.width(),
        });
    }
    Ok(Patch::new(
        pool_trailing(patch.values.view(), p),
        patch.start,
        p,
    ))
}

/// Anchor a patch on its own final step.
pub fn subtract_offset(patch: &Patch) -> AnchoredPatch {
    let offset = patch.last();
    AnchoredPatch::relative_to(patch.values.view(), &offset)
}

/// Start indices `{0, s, 2s, …}` of every (key, value) pair that fits in `len` steps.
pub fn window_starts(len: usize, lookback: usize, horizon: usize, stride: usize) -> Result<Vec<usize>> {
    if stride == 0 {
        return Err(RaftError::param("stride", "must be at least 1"));
    }
    if lookback == 0 || horizon == 0 {
        return Err(RaftError::param("window", "lookback and horizon must be positive"));
    }
    let span = lookback + horizon;
    if len < span {
        return Err(RaftError::SeriesTooShort {
            needed: span,
            available: len,
        });
    }
    Ok((0..=len - span).step_by(stride).collect())
}

/// Every (key, value) pair on the stride grid: key `[i, i+L)`, value `[i+L, i+L+F)`.
pub fn sliding_windows(
    series: &TimeSeries,
    lookback: usize,
    horizon: usize,
    stride: usize,
) -> Result<Vec<(Patch, Patch)>> {
    window_starts(series.len(), lookback, horizon, stride)?
        .into_iter()
        .map(|i| Ok((series.patch(i, lookback)?, series.patch(i + lookback, horizon)?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    fn p1(values: Array2<f64>) -> Patch {
        Patch::new(values, 0, 1)
    }

    /// Enumerates every alignment of `p`-groups inside the row and returns the
    /// one whose final group ends on the final step.
    fn brute_force_trailing_pool(row: &[f64], p: usize) -> Vec<f64> {
        let w = row.len();
        let mut candidates = Vec::new();
        for offset in 0..p {
            let groups: Vec<(usize, f64)> = (offset..)
                .step_by(p)
                .take_while(|&lo| lo + p <= w)
                .map(|lo| (lo + p - 1, row[lo..lo + p].iter().sum::<f64>() / p as f64))
                .collect();
            candidates.push(groups);
        }
        candidates
            .into_iter()
            .find(|g| g.last().map(|&(end, _)| end == w - 1).unwrap_or(false))
            .map(|g| g.into_iter().map(|(_, v)| v).collect())
            .unwrap()
    }

    #[test]
    fn pooling_examples() {
        let x = p1(array![[1.0, 2.0, 3.0, 4.0]]);
        assert_eq!(downsample(&x, 1).unwrap(), x);
        let d = downsample(&x, 2).unwrap();
        assert_eq!(d.values, array![[1.5, 3.5]]);
        assert_eq!(d.period, 2);

        let y = p1(array![[9.0, 1.0, 2.0, 3.0, 4.0]]);
        let d = downsample(&y, 2).unwrap();
        let oracle = brute_force_trailing_pool(&[9.0, 1.0, 2.0, 3.0, 4.0], 2);
        assert_eq!(d.values.row(0).to_vec(), oracle);
        assert_eq!(oracle, vec![1.5, 3.5]);

        assert!(matches!(
            downsample(&x, 5),
            Err(RaftError::PeriodTooLarge { period: 5, width: 4 })
        ));
        assert!(downsample(&d, 2).is_err());
    }

    #[test]
    fn anchoring_examples() {
        let a = subtract_offset(&p1(array![[1.0, 2.0, 3.0]]));
        assert_eq!(a.values, array![[-2.0, -1.0, 0.0]]);
        assert_eq!(a.offset, array![3.0]);

        let c = subtract_offset(&p1(array![[7.5, 7.5, 7.5]]));
        assert!(c.values.iter().all(|&v| v == 0.0));
        assert_eq!(c.offset, array![7.5]);

        let raw = array![[1.0, 4.0, 2.0], [10.0, -3.0, 5.0]];
        let a = subtract_offset(&p1(raw.clone()));
        for ch in 0..2 {
            for t in 0..3 {
                assert_eq!(a.values[[ch, t]], raw[[ch, t]] - raw[[ch, 2]]);
            }
            assert_eq!(a.offset[ch], raw[[ch, 2]]);
        }
    }

    #[test]
    fn window_examples() {
        let s = TimeSeries::univariate("x", (0..10).map(f64::from).collect()).unwrap();
        let w = sliding_windows(&s, 3, 2, 1).unwrap();
        assert_eq!(w.len(), 6);
        assert_eq!(w[0].0.values, array![[0.0, 1.0, 2.0]]);
        assert_eq!(w[0].1.values, array![[3.0, 4.0]]);

        // brute force: every start in [0, T-(L+F)] that lies on the stride grid
        let expect: Vec<usize> = (0..10).filter(|i| i + 5 <= 10 && i % 2 == 0).collect();
        let starts: Vec<usize> = sliding_windows(&s, 3, 2, 2)
            .unwrap()
            .iter()
            .map(|(k, _)| k.start)
            .collect();
        assert_eq!(starts, expect);
        assert_eq!(starts, vec![0, 2, 4]);

        let short = TimeSeries::univariate("x", vec![0.0; 4]).unwrap();
        assert!(matches!(
            sliding_windows(&short, 3, 2, 1),
            Err(RaftError::SeriesTooShort { needed: 5, available: 4 })
        ));
    }

    fn matrix(c: usize, w: usize) -> impl Strategy<Value = Array2<f64>> {
        proptest::collection::vec(-100.0f64..100.0, c * w)
            .prop_map(move |v| Array2::from_shape_vec((c, w), v).unwrap())
    }

    proptest! {
        #[test]
        fn pooling_is_linear(m in matrix(2, 13), a in -5.0f64..5.0, p in 1usize..6) {
            let lhs = downsample(&p1(&m * a), p).unwrap().values;
            let rhs = downsample(&p1(m.clone()), p).unwrap().values * a;
            for (x, y) in lhs.iter().zip(rhs.iter()) {
                prop_assert!((x - y).abs() <= 1e-9 * (1.0 + y.abs()));
            }
        }

        #[test]
        fn anchoring_is_idempotent(m in matrix(3, 7)) {
            let once = subtract_offset(&p1(m));
            let twice = subtract_offset(&p1(once.values.clone()));
            prop_assert_eq!(&twice.values, &once.values);
            prop_assert!(twice.offset.iter().all(|&v| v == 0.0));
        }

        #[test]
        fn stride_one_window_count(len in 2usize..80, l in 1usize..10, f in 1usize..10) {
            prop_assume!(len >= l + f);
            prop_assert_eq!(window_starts(len, l, f, 1).unwrap().len(), len - (l + f) + 1);
        }

        #[test]
        fn anchor_after_pool_uses_final_pooled_step(m in matrix(2, 12), p in 1usize..5) {
            let pooled = downsample(&p1(m), p).unwrap();
            let anchored = subtract_offset(&pooled);
            let w = pooled.width();
            for ch in 0..2 {
                prop_assert_eq!(anchored.offset[ch], pooled.values[[ch, w - 1]]);
                for t in 0..w {
                    prop_assert_eq!(
                        anchored.values[[ch, t]],
                        pooled.values[[ch, t]] - pooled.values[[ch, w - 1]]
                    );
                }
            }
        }
    }
}
