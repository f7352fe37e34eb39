use ndarray::ArrayView2;

use crate::error::{RaftError, Result};

fn check(pred: &ArrayView2<'_, f64>, truth: &ArrayView2<'_, f64>) -> Result<()> {
    if pred.dim() != truth.dim() {
        return Err(RaftError::shape(format!("{:?}", truth.dim()), format!("{:?}", pred.dim())));
    }
    if pred.is_empty() {
        return Err(RaftError::Empty("metric over zero entries".into()));
    }
    Ok(())
}

pub fn mse(pred: &ArrayView2<'_, f64>, truth: &ArrayView2<'_, f64>) -> Result<f64> {
    check(pred, truth)?;
    Ok(pred.iter().zip(truth).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / pred.len() as f64)
}

pub fn mae(pred: &ArrayView2<'_, f64>, truth: &ArrayView2<'_, f64>) -> Result<f64> {
    check(pred, truth)?;
    Ok(pred.iter().zip(truth).map(|(a, b)| (a - b).abs()).sum::<f64>() / pred.len() as f64)
}

/// Running sums for MSE and MAE over many windows.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ErrorAccumulator {
    sq: f64,
    abs: f64,
    count: usize,
}

impl ErrorAccumulator {
    pub fn add(&mut self, pred: &ArrayView2<'_, f64>, truth: &ArrayView2<'_, f64>) {
        for (a, b) in pred.iter().zip(truth) {
            let d = a - b;
            self.sq += d * d;
            self.abs += d.abs();
        }
        self.count += pred.len();
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn mse(&self) -> f64 {
        self.sq / self.count as f64
    }

    pub fn mae(&self) -> f64 {
        self.abs / self.count as f64
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample Pearson correlation; 0 when either column is constant.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(RaftError::shape(x.len().to_string(), y.len().to_string()));
    }
    if x.len() < 2 {
        return Err(RaftError::InsufficientRecords { needed: 2, found: x.len() });
    }
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Ok(0.0);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// 1-based ranks with ties sharing their average rank.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation (Pearson on average ranks). Needs 3 or more pairs.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(RaftError::shape(x.len().to_string(), y.len().to_string()));
    }
    if x.len() < 3 {
        return Err(RaftError::InsufficientRecords { needed: 3, found: x.len() });
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(RaftError::param("spearman", "non-finite value"));
    }
    pearson(&average_ranks(x), &average_ranks(y))
}
