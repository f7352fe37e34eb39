use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{RaftError, Result};
use crate::series::AnchoredPatch;

/// Similarity function used to rank key patches against a query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Pearson,
    Cosine,
    CosineProjected,
    NegL2,
}

impl MetricKind {
    pub const ALL: [MetricKind; 4] = [
        MetricKind::Pearson,
        MetricKind::Cosine,
        MetricKind::CosineProjected,
        MetricKind::NegL2,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            MetricKind::Pearson => "pearson",
            MetricKind::Cosine => "cosine",
            MetricKind::CosineProjected => "cosine_projected",
            MetricKind::NegL2 => "neg_l2",
        }
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MetricKind {
    type Err = RaftError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pearson" => Ok(MetricKind::Pearson),
            "cosine" => Ok(MetricKind::Cosine),
            "cosine_projected" => Ok(MetricKind::CosineProjected),
            "neg_l2" => Ok(MetricKind::NegL2),
            other => Err(RaftError::param(
                "metric",
                format!("unknown metric {other:?} (pearson, cosine, cosine_projected, neg_l2)"),
            )),
        }
    }
}

/// How a multichannel comparison is reduced to one score.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// Score every channel separately and average.
    #[default]
    ChannelMean,
    /// Score the flattened `C·W` vectors once.
    Flatten,
}

/// Trainable linear embeddings for the projected-cosine metric: flattened
/// anchored query and key vectors are mapped to `embed_dim` before comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionHead {
    /// `embed_dim × (C·W)`.
    pub query: Array2<f64>,
    /// `embed_dim × (C·W)`.
    pub key: Array2<f64>,
}

impl ProjectionHead {
    pub fn embed_dim(&self) -> usize {
        self.query.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.query.ncols()
    }
}

/// A fully resolved similarity function.
#[derive(Debug, Clone, Copy)]
pub enum SimilarityMetric<'a> {
    Pearson(Reduction),
    Cosine(Reduction),
    NegL2,
    CosineProjected(&'a ProjectionHead),
}

impl SimilarityMetric<'_> {
    pub fn kind(&self) -> MetricKind {
        match self {
            SimilarityMetric::Pearson(_) => MetricKind::Pearson,
            SimilarityMetric::Cosine(_) => MetricKind::Cosine,
            SimilarityMetric::NegL2 => MetricKind::NegL2,
            SimilarityMetric::CosineProjected(_) => MetricKind::CosineProjected,
        }
    }

    /// Length of the vectors produced by [`prepare`](Self::prepare) for `C·W` inputs.
    pub fn prepared_dim(&self, input_dim: usize) -> usize {
        match self {
            SimilarityMetric::CosineProjected(h) => h.embed_dim(),
            _ => input_dim,
        }
    }

    /// Map a flattened (channel-major) anchored patch to the vector space in
    /// which the score is a plain dot product (or, for `neg_l2`, a distance).
    ///
    /// Zero-variance inputs (Pearson) and zero vectors (cosine) map to the
    /// zero vector, which scores 0 against anything.
    pub fn prepare(&self, channels: usize, data: &[f64], out: &mut [f64], is_query: bool) {
        match self {
            SimilarityMetric::Pearson(Reduction::ChannelMean) => {
                let w = data.len() / channels;
                let scale = 1.0 / (channels as f64).sqrt();
                for (src, dst) in data.chunks_exact(w).zip(out.chunks_exact_mut(w)) {
                    center_normalize(src, dst, scale);
                }
            }
            SimilarityMetric::Pearson(Reduction::Flatten) => center_normalize(data, out, 1.0),
            SimilarityMetric::Cosine(Reduction::ChannelMean) => {
                let w = data.len() / channels;
                let scale = 1.0 / (channels as f64).sqrt();
                for (src, dst) in data.chunks_exact(w).zip(out.chunks_exact_mut(w)) {
                    normalize(src, dst, scale);
                }
            }
            SimilarityMetric::Cosine(Reduction::Flatten) => normalize(data, out, 1.0),
            SimilarityMetric::NegL2 => out.copy_from_slice(data),
            SimilarityMetric::CosineProjected(head) => {
                let proj = if is_query { &head.query } else { &head.key };
                let mut emb = vec![0.0; head.embed_dim()];
                for (e, row) in emb.iter_mut().zip(proj.outer_iter()) {
                    *e = row.iter().zip(data).map(|(a, b)| a * b).sum();
                }
                normalize(&emb, out, 1.0);
            }
        }
    }

    /// Prepare a block of flattened keys (one per row).
    pub fn prepare_keys(&self, channels: usize, keys: ArrayView2<'_, f64>) -> Array2<f64> {
        match self {
            SimilarityMetric::CosineProjected(head) => {
                let mut emb = keys.dot(&head.key.t());
                for mut row in emb.outer_iter_mut() {
                    let src = row.to_vec();
                    normalize(&src, row.as_slice_mut().expect("contiguous row"), 1.0);
                }
                emb
            }
            _ => {
                let mut out = Array2::zeros(keys.dim());
                for (src, mut dst) in keys.outer_iter().zip(out.outer_iter_mut()) {
                    let src = src.to_vec();
                    self.prepare(channels, &src, dst.as_slice_mut().expect("contiguous row"), false);
                }
                out
            }
        }
    }

    /// Convert a dot product of prepared vectors into a score.
    #[inline]
    pub fn finish(&self, dot: f64, query_sq: f64, key_sq: f64) -> f64 {
        match self {
            SimilarityMetric::NegL2 => -(query_sq + key_sq - 2.0 * dot).max(0.0).sqrt(),
            _ => dot,
        }
    }
}

/// Relative threshold below which a vector's spread is treated as zero.
const DEGENERATE_REL: f64 = 1e-24;

pub(crate) fn is_degenerate(sum_sq: f64, data: &[f64]) -> bool {
    let max_sq = data.iter().fold(0.0f64, |m, v| m.max(v * v));
    sum_sq <= DEGENERATE_REL * data.len() as f64 * (1.0 + max_sq)
}

fn center_normalize(src: &[f64], dst: &mut [f64], scale: f64) {
    let mean = src.iter().sum::<f64>() / src.len() as f64;
    let ss: f64 = src.iter().map(|v| (v - mean) * (v - mean)).sum();
    if is_degenerate(ss, src) {
        dst.fill(0.0);
        return;
    }
    let k = scale / ss.sqrt();
    for (d, s) in dst.iter_mut().zip(src) {
        *d = (s - mean) * k;
    }
}

fn normalize(src: &[f64], dst: &mut [f64], scale: f64) {
    let ss: f64 = src.iter().map(|v| v * v).sum();
    if is_degenerate(ss, src) {
        dst.fill(0.0);
        return;
    }
    let k = scale / ss.sqrt();
    for (d, s) in dst.iter_mut().zip(src) {
        *d = s * k;
    }
}

/// Score one anchored query against one anchored key.
pub fn similarity(query: &AnchoredPatch, key: &AnchoredPatch, metric: &SimilarityMetric<'_>) -> Result<f64> {
    if query.values.dim() != key.values.dim() {
        return Err(RaftError::shape(
            format!("{:?}", query.values.dim()),
            format!("{:?}", key.values.dim()),
        ));
    }
    let channels = query.n_channels();
    let q = query.values.iter().copied().collect::<Vec<_>>();
    let k = key.values.iter().copied().collect::<Vec<_>>();
    if let SimilarityMetric::CosineProjected(head) = metric {
        if head.input_dim() != q.len() {
            return Err(RaftError::shape(
                format!("projection input {}", head.input_dim()),
                q.len().to_string(),
            ));
        }
    }
    let dim = metric.prepared_dim(q.len());
    let mut pq = vec![0.0; dim];
    let mut pk = vec![0.0; dim];
    metric.prepare(channels, &q, &mut pq, true);
    metric.prepare(channels, &k, &mut pk, false);
    let dot: f64 = pq.iter().zip(&pk).map(|(a, b)| a * b).sum();
    let qq: f64 = pq.iter().map(|v| v * v).sum();
    let kk: f64 = pk.iter().map(|v| v * v).sum();
    Ok(metric.finish(dot, qq, kk))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array1};
    use proptest::prelude::*;

    fn anchored(values: Array2<f64>) -> AnchoredPatch {
        let c = values.nrows();
        AnchoredPatch {
            values,
            offset: Array1::zeros(c),
        }
    }

    /// Textbook sample-covariance formula, independent of the prepared-vector route.
    fn pearson_oracle(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let mut cov = 0.0;
        let mut vx = 0.0;
        let mut vy = 0.0;
        for i in 0..x.len() {
            cov += (x[i] - mx) * (y[i] - my);
            vx += (x[i] - mx).powi(2);
            vy += (y[i] - my).powi(2);
        }
        (cov / (n - 1.0)) / ((vx / (n - 1.0)).sqrt() * (vy / (n - 1.0)).sqrt())
    }

    const PEARSON: SimilarityMetric<'static> = SimilarityMetric::Pearson(Reduction::ChannelMean);

    #[test]
    fn pearson_examples() {
        let q = anchored(array![[1.0, 2.0, 3.0, 0.0]]);
        assert_abs_diff_eq!(similarity(&q, &q, &PEARSON).unwrap(), 1.0, epsilon = 1e-12);
        let neg = anchored(-q.values.clone());
        assert_abs_diff_eq!(similarity(&q, &neg, &PEARSON).unwrap(), -1.0, epsilon = 1e-12);

        let k = anchored(array![[2.0, 1.0, 4.0, 0.0]]);
        let expect = pearson_oracle(&[1.0, 2.0, 3.0, 0.0], &[2.0, 1.0, 4.0, 0.0]);
        assert_abs_diff_eq!(similarity(&q, &k, &PEARSON).unwrap(), expect, epsilon = 1e-12);
    }

    #[test]
    fn degenerate_and_shape_cases() {
        let q = anchored(array![[1.0, 2.0, 3.0, 0.0]]);
        let flat = anchored(array![[0.0, 0.0, 0.0, 0.0]]);
        assert_eq!(similarity(&q, &flat, &PEARSON).unwrap(), 0.0);
        let cos = SimilarityMetric::Cosine(Reduction::ChannelMean);
        assert_eq!(similarity(&q, &flat, &cos).unwrap(), 0.0);
        let short = anchored(array![[1.0, 0.0]]);
        assert!(matches!(
            similarity(&q, &short, &PEARSON),
            Err(RaftError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn metric_variants() {
        let q = anchored(array![[1.0, -2.0, 0.5], [3.0, 1.0, 0.0]]);
        let k = anchored(array![[0.5, -1.0, 2.0], [1.0, 1.0, 0.0]]);

        let per_channel = (pearson_oracle(&[1.0, -2.0, 0.5], &[0.5, -1.0, 2.0])
            + pearson_oracle(&[3.0, 1.0, 0.0], &[1.0, 1.0, 0.0]))
            / 2.0;
        assert_abs_diff_eq!(similarity(&q, &k, &PEARSON).unwrap(), per_channel, epsilon = 1e-12);

        let flat = pearson_oracle(&[1.0, -2.0, 0.5, 3.0, 1.0, 0.0], &[0.5, -1.0, 2.0, 1.0, 1.0, 0.0]);
        let got = similarity(&q, &k, &SimilarityMetric::Pearson(Reduction::Flatten)).unwrap();
        assert_abs_diff_eq!(got, flat, epsilon = 1e-12);

        let cos = |a: &[f64], b: &[f64]| {
            let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            d / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
        };
        let expect = (cos(&[1.0, -2.0, 0.5], &[0.5, -1.0, 2.0]) + cos(&[3.0, 1.0, 0.0], &[1.0, 1.0, 0.0])) / 2.0;
        let got = similarity(&q, &k, &SimilarityMetric::Cosine(Reduction::ChannelMean)).unwrap();
        assert_abs_diff_eq!(got, expect, epsilon = 1e-12);

        let l2: f64 = q.values.iter().zip(k.values.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        assert_abs_diff_eq!(similarity(&q, &k, &SimilarityMetric::NegL2).unwrap(), -l2, epsilon = 1e-12);

        let head = ProjectionHead {
            query: array![[1.0, 0.0, 0.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0, 0.0, 1.0]],
            key: array![[0.0, 0.0, 1.0, 0.0, 0.0, 0.0], [0.0, 0.0, 0.0, 1.0, 0.0, 0.0]],
        };
        let eq = [1.0, -2.0];
        let ek = [2.0, 1.0];
        let got = similarity(&q, &k, &SimilarityMetric::CosineProjected(&head)).unwrap();
        assert_abs_diff_eq!(got, cos(&eq, &ek), epsilon = 1e-12);
    }

    #[test]
    fn metric_names_round_trip() {
        for kind in MetricKind::ALL {
            assert_eq!(kind.as_str().parse::<MetricKind>().unwrap(), kind);
        }
        assert!("manhattan".parse::<MetricKind>().is_err());
    }

    proptest! {
        #[test]
        fn pearson_ignores_positive_scale_and_shift(
            q in proptest::collection::vec(-10.0f64..10.0, 16),
            k in proptest::collection::vec(-10.0f64..10.0, 16),
            a in 0.1f64..20.0,
            b in -50.0f64..50.0,
            a2 in 0.1f64..20.0,
            b2 in -50.0f64..50.0,
        ) {
            let qm = Array2::from_shape_vec((2, 8), q).unwrap();
            let km = anchored(Array2::from_shape_vec((2, 8), k).unwrap());
            let mut scaled = qm.clone();
            scaled.row_mut(0).mapv_inplace(|v| a * v + b);
            scaled.row_mut(1).mapv_inplace(|v| a2 * v + b2);
            let base = similarity(&anchored(qm), &km, &PEARSON).unwrap();
            let moved = similarity(&anchored(scaled), &km, &PEARSON).unwrap();
            prop_assert!((base - moved).abs() < 1e-9);
            prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&base));
        }
    }
}
