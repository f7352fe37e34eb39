use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::mean;
use crate::error::{RaftError, Result};

/// One evaluation result. `seed = None` marks a mean over seeds and
/// `horizon = None` a mean over horizons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub dataset: String,
    pub horizon: Option<usize>,
    pub variant: String,
    /// Study-specific label (metric name, stride, fraction, …); empty if unused.
    pub setting: String,
    pub seed: Option<u64>,
    pub mse: f64,
    pub mae: f64,
}

/// Wall-clock breakdown of one run; kept apart from metrics so metric files
/// are reproducible byte for byte.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub dataset: String,
    pub horizon: usize,
    pub variant: String,
    pub setting: String,
    pub seed: u64,
    pub precompute_seconds: f64,
    pub epoch_seconds: f64,
    pub train_seconds: f64,
    pub inference_seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    pub timings: Vec<TimingRow>,
}

type Key = (String, String, String);

impl MetricReport {
    pub fn push(&mut self, row: MetricRow) {
        self.rows.push(row);
    }

    pub fn extend(&mut self, other: MetricReport) {
        self.rows.extend(other.rows);
        self.timings.extend(other.timings);
    }

    pub fn per_seed(&self) -> impl Iterator<Item = &MetricRow> {
        self.rows.iter().filter(|r| r.seed.is_some() && r.horizon.is_some())
    }

    /// Seed means per (dataset, horizon, variant, setting), then means of
    /// those over horizons per (dataset, variant, setting); first-seen order.
    pub fn means(&self) -> Vec<MetricRow> {
        let mut order: Vec<(Key, usize)> = Vec::new();
        let mut groups: BTreeMap<(Key, usize), Vec<&MetricRow>> = BTreeMap::new();
        for r in self.per_seed() {
            let key = ((r.dataset.clone(), r.variant.clone(), r.setting.clone()), r.horizon.expect("per-seed row"));
            if !groups.contains_key(&key) {
                order.push(key.clone());
            }
            groups.entry(key).or_default().push(r);
        }
        let mut out = Vec::new();
        let mut by_horizon: Vec<(Key, Vec<(f64, f64)>)> = Vec::new();
        for key in order {
            let rows = &groups[&key];
            let m = mean(&rows.iter().map(|r| r.mse).collect::<Vec<_>>());
            let a = mean(&rows.iter().map(|r| r.mae).collect::<Vec<_>>());
            out.push(MetricRow {
                dataset: key.0 .0.clone(),
                horizon: Some(key.1),
                variant: key.0 .1.clone(),
                setting: key.0 .2.clone(),
                seed: None,
                mse: m,
                mae: a,
            });
            match by_horizon.iter_mut().find(|(k, _)| *k == key.0) {
                Some((_, v)) => v.push((m, a)),
                None => by_horizon.push((key.0.clone(), vec![(m, a)])),
            }
        }
        for ((dataset, variant, setting), vals) in by_horizon {
            if vals.len() < 2 {
                continue;
            }
            out.push(MetricRow {
                dataset,
                horizon: None,
                variant,
                setting,
                seed: None,
                mse: mean(&vals.iter().map(|v| v.0).collect::<Vec<_>>()),
                mae: mean(&vals.iter().map(|v| v.1).collect::<Vec<_>>()),
            });
        }
        out
    }

    /// Mean MSE for one (variant, setting) over all its per-seed rows.
    pub fn mean_mse(&self, variant: &str, setting: &str) -> Option<f64> {
        let v: Vec<f64> = self
            .per_seed()
            .filter(|r| r.variant == variant && r.setting == setting)
            .map(|r| r.mse)
            .collect();
        (!v.is_empty()).then(|| mean(&v))
    }

    fn csv_text(rows: &[MetricRow]) -> String {
        let mut s = String::from("dataset,horizon,variant,setting,seed,mse,mae\n");
        for r in rows {
            let horizon = r.horizon.map_or("avg".to_string(), |h| h.to_string());
            let seed = r.seed.map_or("mean".to_string(), |x| x.to_string());
            s.push_str(&format!("{},{},{},{},{},{},{}\n", r.dataset, horizon, r.variant, r.setting, seed, r.mse, r.mae));
        }
        s
    }

    /// Per-seed rows followed by mean rows.
    pub fn to_csv(&self) -> String {
        let mut rows: Vec<MetricRow> = self.per_seed().cloned().collect();
        rows.extend(self.means());
        Self::csv_text(&rows)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| RaftError::io(path, e))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Summary<'a> {
            rows: Vec<&'a MetricRow>,
            means: Vec<MetricRow>,
        }
        let summary = Summary { rows: self.per_seed().collect(), means: self.means() };
        let text = serde_json::to_string_pretty(&summary).map_err(|e| RaftError::Format(e.to_string()))?;
        std::fs::write(path, text + "\n").map_err(|e| RaftError::io(path, e))
    }

    pub fn write_timings_csv(&self, path: &Path) -> Result<()> {
        let mut s = String::from("dataset,horizon,variant,setting,seed,precompute_seconds,epoch_seconds,train_seconds,inference_seconds\n");
        for t in &self.timings {
            s.push_str(&format!(
                "{},{},{},{},{},{:.6},{:.6},{:.6},{:.6}\n",
                t.dataset, t.horizon, t.variant, t.setting, t.seed, t.precompute_seconds, t.epoch_seconds, t.train_seconds, t.inference_seconds
            ));
        }
        std::fs::write(path, s).map_err(|e| RaftError::io(path, e))
    }
}
