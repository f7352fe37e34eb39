use std::ops::Range;

use ndarray::{s, ArrayView2};
use serde::{Deserialize, Serialize};

use super::{Patch, TimeSeries};
use crate::error::{RaftError, Result};

/// Contiguous train / validation / test borders.
///
/// Train is `[0, train_end)`, validation `[train_end, val_end)` and test
/// `[val_end, test_end)` where `test_end` defaults to the series length.
/// With `lookback_overlap`, validation and test windows may take their input
/// from the steps preceding their split; targets always stay inside it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_end: usize,
    pub val_end: usize,
    #[serde(default)]
    pub test_end: Option<usize>,
    #[serde(default = "default_overlap")]
    pub lookback_overlap: bool,
}

fn default_overlap() -> bool {
    true
}

impl SplitSpec {
    pub fn new(train_end: usize, val_end: usize) -> Self {
        Self {
            train_end,
            val_end,
            test_end: None,
            lookback_overlap: true,
        }
    }

    /// 12/4/4 months of hourly data (ETTh1, ETTh2).
    pub fn ett_hourly() -> Self {
        let month = 30 * 24;
        Self {
            train_end: 12 * month,
            val_end: 16 * month,
            test_end: Some(20 * month),
            lookback_overlap: true,
        }
    }

    /// 12/4/4 months of 15-minute data (ETTm1, ETTm2).
    pub fn ett_minute() -> Self {
        let month = 30 * 24 * 4;
        Self {
            train_end: 12 * month,
            val_end: 16 * month,
            test_end: Some(20 * month),
            lookback_overlap: true,
        }
    }

    /// Ratio split: `floor(train_frac·T)` training steps, `floor(test_frac·T)`
    /// test steps, the remainder for validation.
    pub fn by_ratio(len: usize, train_frac: f64, test_frac: f64) -> Result<Self> {
        if !(train_frac > 0.0 && test_frac > 0.0 && train_frac + test_frac < 1.0) {
            return Err(RaftError::InvalidSplit(format!(
                "fractions train={train_frac}, test={test_frac}"
            )));
        }
        let n_train = (len as f64 * train_frac).floor() as usize;
        let n_test = (len as f64 * test_frac).floor() as usize;
        let spec = Self {
            train_end: n_train,
            val_end: len - n_test,
            test_end: None,
            lookback_overlap: true,
        };
        spec.validate(len)?;
        Ok(spec)
    }

    pub fn test_end_for(&self, len: usize) -> usize {
        self.test_end.unwrap_or(len)
    }

    pub fn validate(&self, len: usize) -> Result<()> {
        let test_end = self.test_end_for(len);
        if self.train_end == 0 {
            return Err(RaftError::InvalidSplit("train_end must be positive".into()));
        }
        if self.train_end >= self.val_end {
            return Err(RaftError::InvalidSplit(format!(
                "train_end {} must be below val_end {}",
                self.train_end, self.val_end
            )));
        }
        if self.val_end >= test_end {
            return Err(RaftError::InvalidSplit(format!(
                "val_end {} leaves no test steps before {test_end}",
                self.val_end
            )));
        }
        if test_end > len {
            return Err(RaftError::InvalidSplit(format!(
                "test_end {test_end} exceeds series length {len}"
            )));
        }
        Ok(())
    }
}

/// Read-only window onto part of a series.
#[derive(Debug, Clone, Copy)]
pub struct SeriesView<'a> {
    source: &'a TimeSeries,
    start: usize,
    end: usize,
    overlap: bool,
}

impl<'a> SeriesView<'a> {
    pub fn new(source: &'a TimeSeries, range: Range<usize>, overlap: bool) -> Self {
        assert!(range.start < range.end && range.end <= source.len());
        Self {
            source,
            start: range.start,
            end: range.end,
            overlap,
        }
    }

    pub fn source(&self) -> &'a TimeSeries {
        self.source
    }

    pub fn start(&self) -> usize {
        self.start
    }

    pub fn end(&self) -> usize {
        self.end
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    /// The view's own steps (never the look-back context).
    pub fn values(&self) -> ArrayView2<'a, f64> {
        self.source.values.slice(s![.., self.start..self.end])
    }

    pub fn to_series(&self) -> TimeSeries {
        self.source
            .slice(self.start, self.end)
            .expect("view range validated at construction")
    }

    /// Absolute input start indices `q` whose target `[q+L, q+L+F)` lies in this view.
    pub fn query_starts(&self, lookback: usize, horizon: usize) -> Range<usize> {
        let lo = if self.overlap {
            self.start.saturating_sub(lookback)
        } else {
            self.start
        };
        match self.end.checked_sub(lookback + horizon) {
            Some(hi) if hi >= lo => lo..hi + 1,
            _ => lo..lo,
        }
    }

    pub fn window_count(&self, lookback: usize, horizon: usize) -> usize {
        self.query_starts(lookback, horizon).len()
    }

    /// Input and target patches for the query starting at absolute index `q`.
    pub fn window(&self, q: usize, lookback: usize, horizon: usize) -> Result<(Patch, Patch)> {
        Ok((
            self.source.patch(q, lookback)?,
            self.source.patch(q + lookback, horizon)?,
        ))
    }
}

pub struct Splits<'a> {
    pub train: SeriesView<'a>,
    pub val: SeriesView<'a>,
    pub test: SeriesView<'a>,
}

impl Splits<'_> {
    pub fn lengths(&self) -> (usize, usize, usize) {
        (self.train.len(), self.val.len(), self.test.len())
    }
}

pub fn split<'a>(series: &'a TimeSeries, spec: &SplitSpec) -> Result<Splits<'a>> {
    let len = series.len();
    spec.validate(len)?;
    let test_end = spec.test_end_for(len);
    Ok(Splits {
        train: SeriesView::new(series, 0..spec.train_end, false),
        val: SeriesView::new(series, spec.train_end..spec.val_end, spec.lookback_overlap),
        test: SeriesView::new(series, spec.val_end..test_end, spec.lookback_overlap),
    })
}
