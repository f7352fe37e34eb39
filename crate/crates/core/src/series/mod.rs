//! Time-series container and the preprocessing steps that feed retrieval:
//! CSV ingestion, contiguous splitting, z-score standardization, trailing
//! average pooling, offset anchoring and sliding-window extraction.

mod csv;
mod patch;
mod split;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{RaftError, Result};

pub use self::csv::{load_csv, write_csv, CsvSchema};
pub(crate) use patch::group_mean;
pub use patch::{
    downsample, pool_trailing, sliding_windows, subtract_offset, window_starts, AnchoredPatch,
    Patch,
};
pub use split::{split, SeriesView, SplitSpec, Splits};

/// A multichannel series stored as a `C × T` matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeSeries {
    values: Array2<f64>,
    channel_names: Vec<String>,
    frequency: String,
    /// Carried for reporting only; all indexing is positional.
    timestamps: Option<Vec<String>>,
}

impl TimeSeries {
    pub fn new(values: Array2<f64>, channel_names: Vec<String>) -> Result<Self> {
        let (c, t) = values.dim();
        if c == 0 || t == 0 {
            return Err(RaftError::Empty(format!("series of shape {c}x{t}")));
        }
        if channel_names.len() != c {
            return Err(RaftError::shape(
                format!("{c} channel names"),
                format!("{}", channel_names.len()),
            ));
        }
        if let Some(((ch, step), v)) = values.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(RaftError::param(
                "values",
                format!("non-finite value {v} at channel {ch}, step {step}"),
            ));
        }
        Ok(Self {
            values,
            channel_names,
            frequency: String::new(),
            timestamps: None,
        })
    }

    /// Single-channel convenience constructor.
    pub fn univariate(name: &str, values: Vec<f64>) -> Result<Self> {
        let t = values.len();
        let values = Array2::from_shape_vec((1, t), values)
            .map_err(|e| RaftError::shape("1 x T", e.to_string()))?;
        Self::new(values, vec![name.to_string()])
    }

    pub fn with_frequency(mut self, frequency: impl Into<String>) -> Self {
        self.frequency = frequency.into();
        self
    }

    pub fn with_timestamps(mut self, timestamps: Vec<String>) -> Result<Self> {
        if timestamps.len() != self.len() {
            return Err(RaftError::shape(
                format!("{} timestamps", self.len()),
                timestamps.len().to_string(),
            ));
        }
        self.timestamps = Some(timestamps);
        Ok(self)
    }

    pub fn n_channels(&self) -> usize {
        self.values.nrows()
    }

    pub fn len(&self) -> usize {
        self.values.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn into_values(self) -> Array2<f64> {
        self.values
    }

    pub fn channel(&self, c: usize) -> ArrayView1<'_, f64> {
        self.values.row(c)
    }

    pub fn channel_names(&self) -> &[String] {
        &self.channel_names
    }

    pub fn frequency(&self) -> &str {
        &self.frequency
    }

    pub fn timestamps(&self) -> Option<&[String]> {
        self.timestamps.as_deref()
    }

    /// Copy of the steps in `[start, end)`.
    pub fn slice(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.len() {
            return Err(RaftError::param(
                "range",
                format!("[{start}, {end}) outside series of length {}", self.len()),
            ));
        }
        Ok(Self {
            values: self.values.slice(s![.., start..end]).to_owned(),
            channel_names: self.channel_names.clone(),
            frequency: self.frequency.clone(),
            timestamps: self.timestamps.as_ref().map(|ts| ts[start..end].to_vec()),
        })
    }

    /// Keep only the named channels, in the order given (univariate mode passes one name).
    pub fn select_channels<S: AsRef<str>>(&self, names: &[S]) -> Result<Self> {
        let mut rows = Vec::with_capacity(names.len());
        for name in names {
            let name = name.as_ref();
            let idx = self
                .channel_names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| RaftError::param("target", format!("no channel named {name:?}")))?;
            rows.push(idx);
        }
        if rows.is_empty() {
            return Err(RaftError::Empty("channel selection".into()));
        }
        Ok(Self {
            values: self.values.select(Axis(0), &rows),
            channel_names: rows.iter().map(|&r| self.channel_names[r].clone()).collect(),
            frequency: self.frequency.clone(),
            timestamps: self.timestamps.clone(),
        })
    }

    /// Stack the steps of several series with identical channels.
    pub fn concat(parts: &[&TimeSeries]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| RaftError::Empty("concat".into()))?;
        for p in parts {
            if p.channel_names != first.channel_names {
                return Err(RaftError::shape(
                    format!("channels {:?}", first.channel_names),
                    format!("{:?}", p.channel_names),
                ));
            }
        }
        let views: Vec<_> = parts.iter().map(|p| p.values.view()).collect();
        let values = ndarray::concatenate(Axis(1), &views)
            .map_err(|e| RaftError::shape("matching channel counts", e.to_string()))?;
        let timestamps = parts
            .iter()
            .map(|p| p.timestamps.clone())
            .collect::<Option<Vec<_>>>()
            .map(|v| v.concat());
        Ok(Self {
            values,
            channel_names: first.channel_names.clone(),
            frequency: first.frequency.clone(),
            timestamps,
        })
    }

    /// A period-1 patch covering `[start, start + width)`.
    pub fn patch(&self, start: usize, width: usize) -> Result<Patch> {
        if width == 0 || start + width > self.len() {
            return Err(RaftError::param(
                "window",
                format!(
                    "[{start}, {}) outside series of length {}",
                    start + width,
                    self.len()
                ),
            ));
        }
        Ok(Patch::new(
            self.values.slice(s![.., start..start + width]).to_owned(),
            start,
            1,
        ))
    }
}

/// Per-channel mean and (population) standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Array1<f64>,
    pub std: Array1<f64>,
}

impl ChannelStats {
    pub fn n_channels(&self) -> usize {
        self.mean.len()
    }
}

/// Fit z-score statistics on the training series. Constant channels get `std = 1`.
pub fn fit_standardize(train: &TimeSeries) -> ChannelStats {
    let n = train.len() as f64;
    let mean = train.values.sum_axis(Axis(1)) / n;
    let std = train
        .values
        .outer_iter()
        .zip(mean.iter())
        .map(|(row, &m)| {
            let var = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
            let sd = var.sqrt();
            if sd > 0.0 && sd.is_finite() {
                sd
            } else {
                1.0
            }
        })
        .collect::<Array1<f64>>();
    ChannelStats { mean, std }
}

pub fn apply_standardize(stats: &ChannelStats, series: &TimeSeries) -> Result<TimeSeries> {
    check_stats(stats, series)?;
    let mut out = series.clone();
    for (mut row, (m, sd)) in out
        .values
        .outer_iter_mut()
        .zip(stats.mean.iter().zip(stats.std.iter()))
    {
        row.mapv_inplace(|v| (v - m) / sd);
    }
    Ok(out)
}

pub fn invert_standardize(stats: &ChannelStats, series: &TimeSeries) -> Result<TimeSeries> {
    check_stats(stats, series)?;
    let mut out = series.clone();
    for (mut row, (m, sd)) in out
        .values
        .outer_iter_mut()
        .zip(stats.mean.iter().zip(stats.std.iter()))
    {
        row.mapv_inplace(|v| v * sd + m);
    }
    Ok(out)
}

fn check_stats(stats: &ChannelStats, series: &TimeSeries) -> Result<()> {
    if stats.n_channels() != series.n_channels() {
        return Err(RaftError::shape(
            format!("{} channels", stats.n_channels()),
            series.n_channels().to_string(),
        ));
    }
    Ok(())
}
