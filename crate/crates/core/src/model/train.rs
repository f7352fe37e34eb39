//! Mini-batch training with early stopping on validation MSE.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use ndarray::{s, Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::optim::{Adam, Optimizer, OptimizerKind, Sgd};
use super::{projected, Batch, ForecastModel, Parameters};
use crate::error::{RaftError, Result};
use crate::retrieval::{retrieve_batch, ExclusionRule, PatchIndex, ProjectionHead, Query, RetrievalCache, RetrievalParams, RetrievalResult};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 32,
            max_epochs: 10,
            patience: 3,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(RaftError::param("learning_rate", format!("must be nonnegative, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(RaftError::param("batch_size", "must be at least 1"));
        }
        if self.max_epochs == 0 {
            return Err(RaftError::param("max_epochs", "must be at least 1"));
        }
        Ok(())
    }

    fn optimizer(&self) -> Box<dyn Optimizer> {
        match self.optimizer {
            OptimizerKind::Adam => Box::new(Adam::new(self.learning_rate, self.beta1, self.beta2, self.epsilon)),
            OptimizerKind::Sgd => Box::new(Sgd { learning_rate: self.learning_rate }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Index into `epochs` of the lowest validation loss.
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn best_val_loss(&self) -> f64 {
        self.epochs.get(self.best_epoch).map_or(f64::NAN, |e| e.val_loss)
    }

    /// Running minimum of validation loss.
    pub fn best_so_far(&self) -> Vec<f64> {
        let mut best = f64::INFINITY;
        self.epochs
            .iter()
            .map(|e| {
                best = best.min(e.val_loss);
                best
            })
            .collect()
    }

    pub fn mean_epoch_seconds(&self) -> f64 {
        if self.epochs.is_empty() {
            return 0.0;
        }
        self.epochs.iter().map(|e| e.seconds).sum::<f64>() / self.epochs.len() as f64
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = std::fs::File::create(path).map_err(|e| RaftError::io(path, e))?;
        let mut text = String::from("epoch,train_loss,val_loss,seconds\n");
        for e in &self.epochs {
            text.push_str(&format!("{},{},{},{:.6}\n", e.epoch, e.train_loss, e.val_loss, e.seconds));
        }
        w.write_all(text.as_bytes()).map_err(|e| RaftError::io(path, e))
    }
}

/// Where a window set gets its retrieval aggregates from.
#[derive(Debug, Clone, Copy)]
pub enum RetrievalSource<'a> {
    /// No retrieval (the retrieval-free model).
    None,
    /// Precomputed results keyed by query start.
    Cache(&'a RetrievalCache),
    /// Retrieve on demand; `training` excludes candidates overlapping the query.
    Live {
        index: &'a PatchIndex,
        params: RetrievalParams,
        training: bool,
    },
}

/// Forecasting windows cut from one series: input `[s, s+L)`, target `[s+L, s+L+F)`.
#[derive(Debug, Clone)]
pub struct WindowSet<'a> {
    pub series: ArrayView2<'a, f64>,
    pub starts: Vec<usize>,
    pub retrieval: RetrievalSource<'a>,
}

impl<'a> WindowSet<'a> {
    pub fn new(series: ArrayView2<'a, f64>, starts: Vec<usize>, retrieval: RetrievalSource<'a>) -> Self {
        Self { series, starts, retrieval }
    }

    pub fn len(&self) -> usize {
        self.starts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.starts.is_empty()
    }

    fn check(&self, l: usize, f: usize) -> Result<()> {
        if let Some(&bad) = self.starts.iter().find(|&&s| s + l + f > self.series.ncols()) {
            return Err(RaftError::SeriesTooShort { needed: bad + l + f, available: self.series.ncols() });
        }
        Ok(())
    }

    fn exclusion(&self, start: usize, training: bool) -> ExclusionRule {
        if training {
            ExclusionRule::training(start)
        } else {
            ExclusionRule::inference()
        }
    }

    /// Retrieval results for the windows at `positions`.
    fn retrievals(
        &self,
        model: &ForecastModel,
        positions: &[usize],
    ) -> Result<Option<Vec<RetrievalResult>>> {
        if !model.uses_retrieval() {
            return Ok(None);
        }
        let l = model.lookback();
        match self.retrieval {
            RetrievalSource::None => Err(RaftError::param("retrieval", "model expects retrieval aggregates")),
            RetrievalSource::Cache(cache) => positions
                .iter()
                .map(|&i| cache.require(self.starts[i]).cloned())
                .collect::<Result<Vec<_>>>()
                .map(Some),
            RetrievalSource::Live { index, params, training } => {
                model.check_index(index)?;
                let queries: Vec<Query<'_>> = positions
                    .iter()
                    .map(|&i| {
                        let s = self.starts[i];
                        Query { values: self.series.slice(s![.., s..s + l]), exclusion: self.exclusion(s, training) }
                    })
                    .collect();
                retrieve_batch(index, &queries, &params, model.projections()).map(Some)
            }
        }
    }

    /// Assemble the batch for the windows at `positions`.
    pub fn batch(&self, model: &ForecastModel, positions: &[usize]) -> Result<Batch> {
        let results = self.retrievals(model, positions)?;
        let aggregates = results.map(|rs| {
            rs.into_iter()
                .map(|r| r.periods.into_iter().map(|p| p.aggregate).collect::<Vec<_>>())
                .collect::<Vec<_>>()
        });
        self.assemble(model, positions, aggregates.as_deref())
    }

    pub(crate) fn assemble(&self, model: &ForecastModel, positions: &[usize], aggregates: Option<&[Vec<Array2<f64>>]>) -> Result<Batch> {
        let (l, f) = (model.lookback(), model.horizon());
        self.check(l, f)?;
        let c = self.series.nrows();
        let n = positions.len();
        let mut inputs = Array2::zeros((n * c, l));
        let mut targets = Array2::zeros((n * c, f));
        for (j, &i) in positions.iter().enumerate() {
            let s = self.starts[i];
            inputs.slice_mut(s![j * c..(j + 1) * c, ..]).assign(&self.series.slice(s![.., s..s + l]));
            targets.slice_mut(s![j * c..(j + 1) * c, ..]).assign(&self.series.slice(s![.., s + l..s + l + f]));
        }
        let retrieved = match aggregates {
            None => Vec::new(),
            Some(aggs) => model
                .spec
                .periods
                .iter()
                .enumerate()
                .map(|(k, &p)| {
                    let mut m = Array2::zeros((n * c, f / p));
                    for (j, a) in aggs.iter().enumerate() {
                        m.slice_mut(s![j * c..(j + 1) * c, ..]).assign(&a[k]);
                    }
                    m
                })
                .collect(),
        };
        Ok(Batch { inputs, retrieved, targets })
    }
}

/// Call `visit(start, prediction, truth)` for every window, in order; both
/// arrays are `C × F`.
pub fn for_each_prediction(
    model: &ForecastModel,
    set: &WindowSet<'_>,
    batch_size: usize,
    mut visit: impl FnMut(usize, ArrayView2<'_, f64>, ArrayView2<'_, f64>),
) -> Result<()> {
    let c = set.series.nrows();
    let positions: Vec<usize> = (0..set.len()).collect();
    for chunk in positions.chunks(batch_size.max(1) * 8) {
        let batch = set.batch(model, chunk)?;
        let y = model.forward_rows(batch.inputs.view(), &batch.retrieved)?;
        for (j, &i) in chunk.iter().enumerate() {
            let rows = s![j * c..(j + 1) * c, ..];
            visit(set.starts[i], y.slice(rows), batch.targets.slice(rows));
        }
    }
    Ok(())
}

/// Mean squared error over every window of `set`.
pub fn mean_loss(model: &ForecastModel, set: &WindowSet<'_>, batch_size: usize) -> Result<f64> {
    if set.is_empty() {
        return Err(RaftError::Empty("window set".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for_each_prediction(model, set, batch_size, |_, y, t| {
        total += y.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        count += y.len();
    })?;
    Ok(total / count as f64)
}

/// Projected-similarity training keeps per-epoch candidate sets.
struct ProjectedTraining<'a> {
    index: &'a PatchIndex,
    params: RetrievalParams,
    candidates: Vec<Vec<Vec<usize>>>,
}

impl ProjectedTraining<'_> {
    fn refresh(&mut self, model: &ForecastModel, set: &WindowSet<'_>) -> Result<()> {
        let l = model.lookback();
        let queries: Vec<Query<'_>> = set
            .starts
            .iter()
            .map(|&s| Query { values: set.series.slice(s![.., s..s + l]), exclusion: ExclusionRule::training(s) })
            .collect();
        let results = retrieve_batch(self.index, &queries, &self.params, model.projections())?;
        self.candidates = results
            .into_iter()
            .map(|r| r.periods.into_iter().map(|p| p.candidates).collect())
            .collect();
        Ok(())
    }

    fn step(
        &self,
        model: &ForecastModel,
        set: &WindowSet<'_>,
        positions: &[usize],
    ) -> Result<(f64, Parameters)> {
        let heads: &[ProjectionHead] = &model.params.projections;
        let l = model.lookback();
        let mut aggs = Vec::with_capacity(positions.len());
        let mut states = Vec::with_capacity(positions.len());
        for &i in positions {
            let s = set.starts[i];
            let (a, st) = projected::forward(
                self.index,
                heads,
                set.series.slice(s![.., s..s + l]),
                &self.candidates[i],
                self.params.tau,
                self.params.weighting,
            )?;
            aggs.push(a);
            states.push(st);
        }
        let batch = set.assemble(model, positions, Some(&aggs))?;
        let (loss, mut grads, dv) = model.gradients(&batch)?;
        let c = set.series.nrows();
        for (j, st) in states.iter().enumerate() {
            let d: Vec<Vec<f64>> = dv
                .iter()
                .map(|m| m.slice(s![j * c..(j + 1) * c, ..]).iter().copied().collect())
                .collect();
            projected::backward(st, &d, self.params.tau, self.params.weighting, &mut grads.projections);
        }
        Ok((loss, grads))
    }
}

/// Train with mini-batches of shuffled windows and early stopping; returns
/// the parameters with the lowest validation loss.
pub fn train(
    mut model: ForecastModel,
    train_set: &WindowSet<'_>,
    val_set: &WindowSet<'_>,
    config: &TrainConfig,
) -> Result<(ForecastModel, TrainHistory)> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(RaftError::Empty("training windows".into()));
    }
    if val_set.is_empty() {
        return Err(RaftError::Empty("validation windows".into()));
    }
    let mut projected = match (model.projections(), train_set.retrieval) {
        (Some(_), RetrievalSource::Live { index, params, .. }) => Some(ProjectedTraining { index, params, candidates: Vec::new() }),
        (Some(_), _) => {
            return Err(RaftError::param("retrieval", "projected similarity needs live retrieval during training"));
        }
        (None, _) => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut optimizer = config.optimizer();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = TrainHistory::default();
    let mut best = (f64::INFINITY, model.params.clone());
    let mut stale = 0usize;

    for epoch in 0..config.max_epochs {
        let clock = Instant::now();
        order.shuffle(&mut rng);
        if let Some(p) = projected.as_mut() {
            p.refresh(&model, train_set)?;
        }
        let mut total = 0.0;
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let (loss, grads) = match &projected {
                Some(p) => p.step(&model, train_set, chunk)?,
                None => {
                    let batch = train_set.batch(&model, chunk)?;
                    let (loss, grads, _) = model.gradients(&batch)?;
                    (loss, grads)
                }
            };
            if !loss.is_finite() {
                return Err(RaftError::Divergence { epoch, step });
            }
            optimizer.step(&mut model.params, &grads);
            if !model.params.is_finite() {
                return Err(RaftError::Divergence { epoch, step });
            }
            total += loss * chunk.len() as f64;
        }
        let val_loss = mean_loss(&model, val_set, config.batch_size)?;
        if !val_loss.is_finite() {
            return Err(RaftError::Divergence { epoch, step: order.len().div_ceil(config.batch_size) });
        }
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: total / order.len() as f64,
            val_loss,
            seconds: clock.elapsed().as_secs_f64(),
        });
        log::debug!("epoch {epoch}: train {:.6} val {val_loss:.6}", total / order.len() as f64);
        if val_loss < best.0 {
            best = (val_loss, model.params.clone());
            history.best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= config.patience {
                break;
            }
        }
    }
    model.params = best.1;
    Ok((model, history))
}
