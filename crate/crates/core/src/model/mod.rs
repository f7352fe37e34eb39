//! Linear forecaster with retrieval fusion.
//!
//! For every channel independently (all heads are shared across channels):
//!
//! ```text
//! x̂ = x − x[L−1]
//! a = W_f x̂ + b_f                       f:   F × L
//! r = Σ_p (G_p ṽ⁽ᵖ⁾ + b_p)               g_p: F × ⌊F/p⌋
//! ŷ = W_h [a; r] + b_h                   h:   F × 2F
//! y = ŷ + x[L−1]
//! ```
//!
//! The no-retrieval variant keeps the same `h` but feeds `r = 0`.

mod checkpoint;
mod optim;
mod projected;
mod train;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{RaftError, Result};
use crate::retrieval::{
    normalize_periods, retrieve_with, ExclusionRule, PatchIndex, ProjectionHead, RetrievalParams,
    RetrievalResult,
};
use crate::series::Patch;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use optim::{Adam, Optimizer, OptimizerKind, Sgd};
pub use train::{
    for_each_prediction, mean_loss, train, EpochRecord, RetrievalSource, TrainConfig, TrainHistory, WindowSet,
};

/// Affine map `y = W x + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Self {
            weight: Array2::zeros((out_dim, in_dim)),
            bias: Array1::zeros(out_dim),
        }
    }

    /// Weights `U[−k, k]` with `k = 1/√fan_in`, zero bias.
    fn uniform(out_dim: usize, in_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let k = 1.0 / (in_dim as f64).sqrt();
        Self {
            weight: Array2::from_shape_fn((out_dim, in_dim), |_| rng.random_range(-k..=k)),
            bias: Array1::zeros(out_dim),
        }
    }

    /// Row-wise application to a batch `N × in`.
    fn apply(&self, x: &ArrayView2<'_, f64>) -> Array2<f64> {
        let mut y = x.dot(&self.weight.t());
        y += &self.bias;
        y
    }
}

/// Structural hyperparameters of a model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub lookback: usize,
    pub horizon: usize,
    pub periods: Vec<usize>,
    /// `false` for the retrieval-free ablation.
    pub retrieval: bool,
    /// Present when similarity is computed through learned projections.
    pub projection: Option<ProjectionSpec>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProjectionSpec {
    pub channels: usize,
    pub embed_dim: usize,
}

impl ModelSpec {
    pub fn new(lookback: usize, horizon: usize, periods: &[usize]) -> Result<Self> {
        if lookback == 0 || horizon == 0 {
            return Err(RaftError::param("lookback/horizon", "must be at least 1"));
        }
        Ok(Self {
            lookback,
            horizon,
            periods: normalize_periods(periods, lookback, horizon)?,
            retrieval: true,
            projection: None,
        })
    }

    pub fn without_retrieval(mut self) -> Self {
        self.retrieval = false;
        self.projection = None;
        self
    }

    pub fn with_projection(mut self, channels: usize, embed_dim: usize) -> Result<Self> {
        if channels == 0 || embed_dim == 0 {
            return Err(RaftError::param("embed_dim", "channels and embed_dim must be at least 1"));
        }
        self.projection = Some(ProjectionSpec { channels, embed_dim });
        Ok(self)
    }
}

/// All trainable tensors. Also used as the gradient container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameters {
    pub f: Linear,
    /// One head per period (empty without retrieval).
    pub g: Vec<Linear>,
    pub h: Linear,
    /// One query/key projection pair per period (projected similarity only).
    pub projections: Vec<ProjectionHead>,
}

impl Parameters {
    pub fn zeros_like(other: &Parameters) -> Self {
        Self {
            f: Linear::zeros(other.f.weight.nrows(), other.f.weight.ncols()),
            g: other.g.iter().map(|g| Linear::zeros(g.weight.nrows(), g.weight.ncols())).collect(),
            h: Linear::zeros(other.h.weight.nrows(), other.h.weight.ncols()),
            projections: other
                .projections
                .iter()
                .map(|p| ProjectionHead {
                    query: Array2::zeros(p.query.dim()),
                    key: Array2::zeros(p.key.dim()),
                })
                .collect(),
        }
    }

    /// Tensors in checkpoint order: `f.W, f.b, (g_p.W, g_p.b)…, h.W, h.b, (P_q, P_k)…`.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![slice(&self.f.weight), self.f.bias.as_slice().expect("contiguous")];
        for g in &self.g {
            out.push(slice(&g.weight));
            out.push(g.bias.as_slice().expect("contiguous"));
        }
        out.push(slice(&self.h.weight));
        out.push(self.h.bias.as_slice().expect("contiguous"));
        for p in &self.projections {
            out.push(slice(&p.query));
            out.push(slice(&p.key));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![
            self.f.weight.as_slice_mut().expect("contiguous"),
            self.f.bias.as_slice_mut().expect("contiguous"),
        ];
        for g in &mut self.g {
            out.push(g.weight.as_slice_mut().expect("contiguous"));
            out.push(g.bias.as_slice_mut().expect("contiguous"));
        }
        out.push(self.h.weight.as_slice_mut().expect("contiguous"));
        out.push(self.h.bias.as_slice_mut().expect("contiguous"));
        for p in &mut self.projections {
            out.push(p.query.as_slice_mut().expect("contiguous"));
            out.push(p.key.as_slice_mut().expect("contiguous"));
        }
        out
    }

    /// Human-readable tensor names in [`tensors`](Self::tensors) order.
    pub fn tensor_names(&self, periods: &[usize]) -> Vec<String> {
        let mut out = vec!["f.weight".to_string(), "f.bias".to_string()];
        for p in periods.iter().take(self.g.len()) {
            out.push(format!("g{p}.weight"));
            out.push(format!("g{p}.bias"));
        }
        out.push("h.weight".into());
        out.push("h.bias".into());
        for p in periods.iter().take(self.projections.len()) {
            out.push(format!("proj{p}.query"));
            out.push(format!("proj{p}.key"));
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

fn slice(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("contiguous")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastModel {
    pub spec: ModelSpec,
    pub params: Parameters,
}

/// Rows are `(sample, channel)` pairs, sample-major.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `N·C × L` raw inputs.
    pub inputs: Array2<f64>,
    /// Per period `N·C × ⌊F/p⌋` aggregated retrieved values (empty without retrieval).
    pub retrieved: Vec<Array2<f64>>,
    /// `N·C × F` ground truth.
    pub targets: Array2<f64>,
}

/// Intermediate values kept for the backward pass.
struct Activations {
    xhat: Array2<f64>,
    z: Array2<f64>,
    y: Array2<f64>,
}

/// Initialize with `U[−1/√fan_in, 1/√fan_in]` weights and zero biases.
pub fn init_model(spec: ModelSpec, seed: u64) -> ForecastModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (l, f) = (spec.lookback, spec.horizon);
    let f_head = Linear::uniform(f, l, &mut rng);
    let g = if spec.retrieval {
        spec.periods.iter().map(|&p| Linear::uniform(f, f / p, &mut rng)).collect()
    } else {
        Vec::new()
    };
    let h = Linear::uniform(f, 2 * f, &mut rng);
    let projections = match (spec.retrieval, spec.projection) {
        (true, Some(ps)) => spec
            .periods
            .iter()
            .map(|&p| {
                let q = Linear::uniform(ps.embed_dim, ps.channels * (l / p), &mut rng).weight;
                let k = Linear::uniform(ps.embed_dim, ps.channels * (l / p), &mut rng).weight;
                ProjectionHead { query: q, key: k }
            })
            .collect(),
        _ => Vec::new(),
    };
    ForecastModel {
        spec,
        params: Parameters { f: f_head, g, h, projections },
    }
}

impl ForecastModel {
    pub fn lookback(&self) -> usize {
        self.spec.lookback
    }

    pub fn horizon(&self) -> usize {
        self.spec.horizon
    }

    pub fn uses_retrieval(&self) -> bool {
        self.spec.retrieval
    }

    pub fn projections(&self) -> Option<&[ProjectionHead]> {
        if self.params.projections.is_empty() {
            None
        } else {
            Some(&self.params.projections)
        }
    }

    fn check_batch(&self, inputs: &ArrayView2<'_, f64>, retrieved: &[Array2<f64>]) -> Result<()> {
        if inputs.ncols() != self.spec.lookback {
            return Err(RaftError::shape(
                format!("{} input columns", self.spec.lookback),
                inputs.ncols().to_string(),
            ));
        }
        if self.spec.retrieval {
            if retrieved.len() != self.spec.periods.len() {
                return Err(RaftError::shape(
                    format!("{} retrieval aggregates", self.spec.periods.len()),
                    retrieved.len().to_string(),
                ));
            }
            for (r, &p) in retrieved.iter().zip(&self.spec.periods) {
                let want = (inputs.nrows(), self.spec.horizon / p);
                if r.dim() != want {
                    return Err(RaftError::shape(format!("{want:?}"), format!("{:?}", r.dim())));
                }
            }
        }
        Ok(())
    }

    fn activations(&self, inputs: ArrayView2<'_, f64>, retrieved: &[Array2<f64>]) -> Result<Activations> {
        self.check_batch(&inputs, retrieved)?;
        let l = self.spec.lookback;
        let f = self.spec.horizon;
        let offsets = inputs.column(l - 1).to_owned();
        let xhat = &inputs - &offsets.view().insert_axis(Axis(1));
        let n = inputs.nrows();
        let mut z = Array2::zeros((n, 2 * f));
        z.slice_mut(s![.., ..f]).assign(&self.params.f.apply(&xhat.view()));
        if self.spec.retrieval {
            let mut r = z.slice_mut(s![.., f..]);
            for (g, v) in self.params.g.iter().zip(retrieved) {
                r += &g.apply(&v.view());
            }
        }
        let mut y = self.params.h.apply(&z.view());
        y += &offsets.view().insert_axis(Axis(1));
        Ok(Activations { xhat, z, y })
    }

    /// Forecast a batch of rows: `inputs` is `N × L`, each `retrieved[k]` is `N × ⌊F/p_k⌋`.
    pub fn forward_rows(&self, inputs: ArrayView2<'_, f64>, retrieved: &[Array2<f64>]) -> Result<Array2<f64>> {
        Ok(self.activations(inputs, retrieved)?.y)
    }

    /// Forecast one `C × L` window given its retrieval result; returns `C × F`.
    pub fn forward(&self, x: &Patch, retrieval: Option<&RetrievalResult>) -> Result<Array2<f64>> {
        let retrieved = match (self.spec.retrieval, retrieval) {
            (true, Some(r)) => r.periods.iter().map(|p| p.aggregate.clone()).collect(),
            (true, None) => {
                return Err(RaftError::param("retrieval", "model expects retrieval aggregates"));
            }
            (false, _) => Vec::new(),
        };
        self.forward_rows(x.values.view(), &retrieved)
    }

    /// Retrieve (inference exclusion) then forward.
    pub fn predict(&self, index: Option<&PatchIndex>, x: &Patch, params: &RetrievalParams) -> Result<Array2<f64>> {
        if !self.spec.retrieval {
            return self.forward(x, None);
        }
        let index = index.ok_or_else(|| RaftError::param("index", "retrieval model needs an index"))?;
        self.check_index(index)?;
        let r = retrieve_with(index, x, params, ExclusionRule::inference(), self.projections())?;
        self.forward(x, Some(&r))
    }

    /// The index must share the model's window lengths and periods.
    pub fn check_index(&self, index: &PatchIndex) -> Result<()> {
        if index.lookback() != self.spec.lookback
            || index.horizon() != self.spec.horizon
            || index.periods() != self.spec.periods.as_slice()
        {
            return Err(RaftError::shape(
                format!("L={} F={} periods={:?}", self.spec.lookback, self.spec.horizon, self.spec.periods),
                format!("L={} F={} periods={:?}", index.lookback(), index.horizon(), index.periods()),
            ));
        }
        Ok(())
    }

    /// MSE of the batch.
    pub fn batch_loss(&self, batch: &Batch) -> Result<f64> {
        let y = self.forward_rows(batch.inputs.view(), &batch.retrieved)?;
        loss(&y.view(), &batch.targets.view())
    }

    /// Loss and exact gradients for a batch. The third value holds
    /// `∂L/∂ṽ⁽ᵖ⁾` for every period (used to train projection heads).
    pub fn gradients(&self, batch: &Batch) -> Result<(f64, Parameters, Vec<Array2<f64>>)> {
        let act = self.activations(batch.inputs.view(), &batch.retrieved)?;
        if act.y.dim() != batch.targets.dim() {
            return Err(RaftError::shape(format!("{:?}", act.y.dim()), format!("{:?}", batch.targets.dim())));
        }
        if act.y.is_empty() {
            return Err(RaftError::Empty("batch".into()));
        }
        let f = self.spec.horizon;
        let diff = &act.y - &batch.targets;
        let count = diff.len() as f64;
        let loss = diff.iter().map(|d| d * d).sum::<f64>() / count;
        let dy = diff * (2.0 / count);

        let mut grads = Parameters::zeros_like(&self.params);
        grads.h.weight = dy.t().dot(&act.z);
        grads.h.bias = dy.sum_axis(Axis(0));
        let dz = dy.dot(&self.params.h.weight);
        let da = dz.slice(s![.., ..f]);
        let dr = dz.slice(s![.., f..]);
        grads.f.weight = da.t().dot(&act.xhat);
        grads.f.bias = da.sum_axis(Axis(0));
        let mut dv = Vec::with_capacity(self.params.g.len());
        for (k, g) in self.params.g.iter().enumerate() {
            grads.g[k].weight = dr.t().dot(&batch.retrieved[k]);
            grads.g[k].bias = dr.sum_axis(Axis(0));
            dv.push(dr.dot(&g.weight));
        }
        Ok((loss, grads, dv))
    }
}

/// Mean squared error over every entry.
pub fn loss(y: &ArrayView2<'_, f64>, target: &ArrayView2<'_, f64>) -> Result<f64> {
    if y.dim() != target.dim() {
        return Err(RaftError::shape(format!("{:?}", target.dim()), format!("{:?}", y.dim())));
    }
    if y.is_empty() {
        return Err(RaftError::Empty("loss over zero entries".into()));
    }
    Ok(y.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64)
}


#[cfg(test)]
mod tests;
