//! Synthetic benchmark series: a trend sinusoid plus a seasonal sinusoid,
//! with short event patterns (clamped AR(20) or random walk) added at
//! controlled numbers of positions.

use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{RaftError, Result};
use crate::series::{write_csv, SplitSpec, TimeSeries};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatternKind {
    #[default]
    Ar,
    RandomWalk,
}

impl PatternKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            PatternKind::Ar => "ar",
            PatternKind::RandomWalk => "random_walk",
        }
    }
}

impl std::str::FromStr for PatternKind {
    type Err = RaftError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ar" => Ok(Self::Ar),
            "random_walk" | "rw" => Ok(Self::RandomWalk),
            other => Err(RaftError::UnknownVariant(other.to_string())),
        }
    }
}

/// Recipe for one synthetic series. Ranges are closed `[lo, hi]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub total_length: usize,
    pub trend_period_range: [f64; 2],
    pub seasonality_period_range: [f64; 2],
    pub trend_amp_range: [f64; 2],
    pub seasonality_amp_range: [f64; 2],
    pub offset_range: [f64; 2],
    pub pattern_length: usize,
    pub pattern_kind: PatternKind,
    pub ar_order: usize,
    pub ar_param_range: [f64; 2],
    pub ar_noise_range: [f64; 2],
    pub rw_step_range: [f64; 2],
    pub clamp_range: [f64; 2],
    pub n_distinct_patterns: usize,
    pub occurrences_per_pattern: usize,
    /// Fractions of the series used for training and validation; the rest is test.
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            total_length: 18_000,
            trend_period_range: [1000.0, 4000.0],
            seasonality_period_range: [500.0, 1000.0],
            trend_amp_range: [200.0, 300.0],
            seasonality_amp_range: [100.0, 200.0],
            offset_range: [100.0, 200.0],
            pattern_length: 200,
            pattern_kind: PatternKind::Ar,
            ar_order: 20,
            ar_param_range: [-5.0, 5.0],
            ar_noise_range: [-10.0, 10.0],
            rw_step_range: [0.0, 20.0],
            clamp_range: [-100.0, 100.0],
            n_distinct_patterns: 3,
            occurrences_per_pattern: 1,
            train_fraction: 0.7,
            val_fraction: 0.1,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("trend_period_range", self.trend_period_range),
            ("seasonality_period_range", self.seasonality_period_range),
            ("trend_amp_range", self.trend_amp_range),
            ("seasonality_amp_range", self.seasonality_amp_range),
            ("offset_range", self.offset_range),
            ("ar_param_range", self.ar_param_range),
            ("ar_noise_range", self.ar_noise_range),
            ("rw_step_range", self.rw_step_range),
            ("clamp_range", self.clamp_range),
        ];
        for (name, [lo, hi]) in ranges {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(RaftError::param(name, format!("[{lo}, {hi}] is not an ordered finite range")));
            }
        }
        if self.trend_period_range[0] <= 0.0 || self.seasonality_period_range[0] <= 0.0 {
            return Err(RaftError::param("period_range", "periods must be positive"));
        }
        if self.pattern_length == 0 {
            return Err(RaftError::param("pattern_length", "must be at least 1"));
        }
        let needed = self.pattern_length * self.n_distinct_patterns * (self.occurrences_per_pattern + 1);
        if self.total_length < needed {
            return Err(RaftError::SeriesTooShort { needed, available: self.total_length });
        }
        if !(self.train_fraction > 0.0 && self.val_fraction >= 0.0 && self.train_fraction + self.val_fraction < 1.0) {
            return Err(RaftError::param("train_fraction/val_fraction", "fractions must leave a nonempty test region"));
        }
        self.split_spec().validate(self.total_length)
    }

    /// Train/val/test borders for the generated series.
    pub fn split_spec(&self) -> SplitSpec {
        let t = self.total_length as f64;
        let train_end = (t * self.train_fraction).floor() as usize;
        let val_end = (t * (self.train_fraction + self.val_fraction)).floor() as usize;
        SplitSpec::new(train_end, val_end)
    }
}

fn draw(rng: &mut ChaCha8Rng, [lo, hi]: [f64; 2]) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}

/// Parameters of one sinusoid `amplitude · sin(2πt / period) + offset`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sinusoid {
    pub period: f64,
    pub amplitude: f64,
    pub offset: f64,
}

impl Sinusoid {
    pub fn at(&self, t: usize) -> f64 {
        self.amplitude * (std::f64::consts::TAU * t as f64 / self.period).sin() + self.offset
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Background {
    pub trend: Sinusoid,
    pub seasonality: Sinusoid,
    pub values: Vec<f64>,
}

/// Trend plus seasonality, each with period, amplitude and offset drawn
/// uniformly from the spec ranges.
pub fn gen_background(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Background {
    let trend = Sinusoid {
        period: draw(rng, spec.trend_period_range),
        amplitude: draw(rng, spec.trend_amp_range),
        offset: draw(rng, spec.offset_range),
    };
    let seasonality = Sinusoid {
        period: draw(rng, spec.seasonality_period_range),
        amplitude: draw(rng, spec.seasonality_amp_range),
        offset: draw(rng, spec.offset_range),
    };
    let values = (0..spec.total_length).map(|t| trend.at(t) + seasonality.at(t)).collect();
    Background { trend, seasonality, values }
}

/// An AR pattern with the coefficients and noise that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArDraw {
    /// `phi[i]` multiplies `x[t−1−i]`.
    pub phi: Vec<f64>,
    pub noise: Vec<f64>,
    pub values: Vec<f64>,
}

/// Run the clamped recurrence `x_t = clamp(Σ φ_i x_{t−i} + ε_t)` from a zero history.
pub fn ar_recurrence(phi: &[f64], noise: &[f64], clamp: [f64; 2]) -> Vec<f64> {
    let mut x: Vec<f64> = Vec::with_capacity(noise.len());
    for (t, eps) in noise.iter().enumerate() {
        let mut v = *eps;
        for (i, p) in phi.iter().enumerate() {
            if let Some(prev) = t.checked_sub(i + 1) {
                v += p * x[prev];
            }
        }
        x.push(v.clamp(clamp[0], clamp[1]));
    }
    x
}

pub fn gen_ar_draw(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> ArDraw {
    let phi: Vec<f64> = (0..spec.ar_order).map(|_| draw(rng, spec.ar_param_range)).collect();
    let noise: Vec<f64> = (0..spec.pattern_length).map(|_| draw(rng, spec.ar_noise_range)).collect();
    let values = ar_recurrence(&phi, &noise, spec.clamp_range);
    ArDraw { phi, noise, values }
}

pub fn gen_ar_pattern(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    gen_ar_draw(spec, rng).values
}

/// Clamped walk `x_t = clamp(x_{t−1} + ε_t)` starting from `x_{−1} = 0`.
pub fn gen_rw_pattern(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut x = 0.0;
    (0..spec.pattern_length)
        .map(|_| {
            x = (x + draw(rng, spec.rw_step_range)).clamp(spec.clamp_range[0], spec.clamp_range[1]);
            x
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatternAnnotation {
    pub pattern_id: usize,
    pub start: usize,
    pub length: usize,
    pub region: Region,
}

impl PatternAnnotation {
    pub fn end(&self) -> usize {
        self.start + self.length
    }

    pub fn overlaps(&self, lo: usize, hi: usize) -> bool {
        self.start < hi && lo < self.end()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSeries {
    pub series: TimeSeries,
    pub background: Background,
    pub patterns: Vec<Vec<f64>>,
    /// Sorted by start.
    pub annotations: Vec<PatternAnnotation>,
    pub split: SplitSpec,
}

const PLACEMENT_RETRIES: usize = 10_000;

fn place(
    rng: &mut ChaCha8Rng,
    taken: &mut Vec<(usize, usize)>,
    lo: usize,
    hi: usize,
    len: usize,
) -> Result<usize> {
    if hi < lo + len {
        return Err(RaftError::Infeasible(format!("region [{lo}, {hi}) cannot hold a pattern of length {len}")));
    }
    for _ in 0..PLACEMENT_RETRIES {
        let s = rng.random_range(lo..=hi - len);
        if taken.iter().all(|&(a, b)| s + len <= a || b <= s) {
            taken.push((s, s + len));
            return Ok(s);
        }
    }
    Err(RaftError::Infeasible(format!(
        "no free position for a pattern of length {len} in [{lo}, {hi}) after {PLACEMENT_RETRIES} tries"
    )))
}

/// Background plus every pattern at `occurrences_per_pattern` random
/// non-overlapping positions in the training region and once in the test region.
pub fn assemble(spec: &SyntheticSpec) -> Result<SyntheticSeries> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let background = gen_background(spec, &mut rng);
    let patterns: Vec<Vec<f64>> = (0..spec.n_distinct_patterns)
        .map(|_| match spec.pattern_kind {
            PatternKind::Ar => gen_ar_pattern(spec, &mut rng),
            PatternKind::RandomWalk => gen_rw_pattern(spec, &mut rng),
        })
        .collect();
    let split = spec.split_spec();
    let test_end = split.test_end_for(spec.total_length);
    let len = spec.pattern_length;
    let mut taken = Vec::new();
    let mut annotations = Vec::new();
    let mut jobs: Vec<usize> = (0..spec.n_distinct_patterns)
        .flat_map(|p| std::iter::repeat_n(p, spec.occurrences_per_pattern))
        .collect();
    jobs.shuffle(&mut rng);
    for pattern_id in jobs {
        let start = place(&mut rng, &mut taken, 0, split.train_end, len)?;
        annotations.push(PatternAnnotation { pattern_id, start, length: len, region: Region::Train });
    }
    for pattern_id in 0..spec.n_distinct_patterns {
        let start = place(&mut rng, &mut taken, split.val_end, test_end, len)?;
        annotations.push(PatternAnnotation { pattern_id, start, length: len, region: Region::Test });
    }
    annotations.sort_by_key(|a| a.start);

    let mut values = background.values.clone();
    for a in &annotations {
        for (v, p) in values[a.start..a.end()].iter_mut().zip(&patterns[a.pattern_id]) {
            *v += p;
        }
    }
    let series = TimeSeries::new(Array2::from_shape_vec((1, values.len()), values).expect("1 × T"), vec!["value".into()])?
        .with_frequency("synthetic");
    Ok(SyntheticSeries { series, background, patterns, annotations, split })
}

impl SyntheticSeries {
    pub fn test_spans(&self) -> impl Iterator<Item = &PatternAnnotation> {
        self.annotations.iter().filter(|a| a.region == Region::Test)
    }

    /// Query starts (absolute) of test windows whose target `[q+L, q+L+F)`
    /// intersects an annotated test span.
    pub fn pattern_query_starts(&self, lookback: usize, horizon: usize) -> Vec<usize> {
        let lo = self.split.val_end.saturating_sub(lookback);
        let hi = self.series.len() - lookback - horizon;
        (lo..=hi)
            .filter(|&q| self.test_spans().any(|a| a.overlaps(q + lookback, q + lookback + horizon)))
            .collect()
    }

    /// Write the series CSV and the `pattern_id,start,length,region` sidecar.
    pub fn write(&self, series_path: &Path, annotations_path: &Path) -> Result<()> {
        write_csv(&self.series, series_path)?;
        let mut w = csv::Writer::from_path(annotations_path).map_err(|e| RaftError::Csv {
            path: annotations_path.to_path_buf(),
            message: e.to_string(),
        })?;
        let err = |e: csv::Error| RaftError::Csv { path: annotations_path.to_path_buf(), message: e.to_string() };
        w.write_record(["pattern_id", "start", "length", "region"]).map_err(err)?;
        for a in &self.annotations {
            let region = match a.region {
                Region::Train => "train",
                Region::Test => "test",
            };
            w.write_record([a.pattern_id.to_string(), a.start.to_string(), a.length.to_string(), region.to_string()])
                .map_err(err)?;
        }
        w.flush().map_err(|e| RaftError::io(annotations_path, e))
    }
}
