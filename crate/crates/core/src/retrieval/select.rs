use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{RaftError, Result};

/// Which candidates a query may retrieve.
///
/// A training-time query (with a known start) may not retrieve any candidate
/// whose key∪value span intersects its own input∪target span. Inference
/// queries (`query_start = None`) may use every candidate.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExclusionRule {
    pub query_start: Option<usize>,
}

impl ExclusionRule {
    pub fn training(query_start: usize) -> Self {
        Self {
            query_start: Some(query_start),
        }
    }

    pub fn inference() -> Self {
        Self { query_start: None }
    }

    /// `span` is `L + F`, the length of both the query's and the candidate's footprint.
    pub fn admits(&self, candidate_start: usize, span: usize) -> bool {
        match self.query_start {
            None => true,
            Some(q) => candidate_start.abs_diff(q) >= span,
        }
    }
}

/// Positions of the `min(m, #admissible)` admissible candidates with the
/// highest scores, best first. Ties go to the smaller start index.
pub fn top_m(scores: &[f64], admissible: &[bool], starts: &[usize], m: usize) -> Vec<usize> {
    assert_eq!(scores.len(), admissible.len());
    assert_eq!(scores.len(), starts.len());
    let mut acc = TopM::new(m);
    for (pos, &s) in scores.iter().enumerate() {
        if admissible[pos] {
            acc.offer(s, starts[pos], pos);
        }
    }
    acc.into_sorted().into_iter().map(|(_, _, pos)| pos).collect()
}

/// Bounded best-first accumulator ordered by (score desc, start asc).
#[derive(Debug, Clone)]
pub(crate) struct TopM {
    m: usize,
    items: Vec<(f64, usize, usize)>,
}

impl TopM {
    pub(crate) fn new(m: usize) -> Self {
        Self {
            m,
            items: Vec::with_capacity(m + 1),
        }
    }

    #[inline]
    fn better(a: (f64, usize), b: (f64, usize)) -> bool {
        a.0 > b.0 || (a.0 == b.0 && a.1 < b.1)
    }

    #[inline]
    pub(crate) fn offer(&mut self, score: f64, start: usize, payload: usize) {
        if self.m == 0 {
            return;
        }
        if self.items.len() == self.m {
            let worst = self.items[self.m - 1];
            if !Self::better((score, start), (worst.0, worst.1)) {
                return;
            }
            self.items.pop();
        }
        let at = self
            .items
            .partition_point(|&(s, st, _)| Self::better((s, st), (score, start)));
        self.items.insert(at, (score, start, payload));
    }

    pub(crate) fn into_sorted(self) -> Vec<(f64, usize, usize)> {
        self.items
    }
}

/// `w_i = exp(ρ_i/τ) / Σ_j exp(ρ_j/τ)` over the selected scores, with max subtraction.
pub fn softmax_weights(scores: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(RaftError::param("tau", format!("must be positive, got {tau}")));
    }
    if scores.is_empty() {
        return Ok(Vec::new());
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| ((s - max) / tau).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

pub fn uniform_weights(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

/// `Σ_{i∈J} w_i · v_i` over the selected value patches.
pub fn aggregate_sparse(weights: &[f64], values: &[ArrayView2<'_, f64>], shape: (usize, usize)) -> Array2<f64> {
    let mut out = Array2::zeros(shape);
    for (w, v) in weights.iter().zip(values) {
        out.scaled_add(*w, v);
    }
    out
}

/// The same sum taken over every candidate, with zero weight outside the selection.
pub fn aggregate_dense(weights: &[f64], values: &[ArrayView2<'_, f64>], shape: (usize, usize)) -> Array2<f64> {
    let mut out = Array2::zeros(shape);
    for (w, v) in weights.iter().zip(values) {
        out.scaled_add(*w, v);
    }
    out
}
