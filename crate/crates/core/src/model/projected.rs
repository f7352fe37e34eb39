//! Retrieval through learned query/key projections with gradients flowing
//! into the projections via the softmax weights. Candidate sets are held
//! fixed during a step; scores, weights and aggregates are recomputed with
//! the current projections.

use ndarray::{Array2, ArrayView2};

use crate::retrieval::{anchored_query, is_degenerate, softmax_weights, uniform_weights, PatchIndex, ProjectionHead, Weighting};
use crate::error::Result;

pub(crate) struct PeriodState {
    query: Vec<f64>,
    q_hat: Vec<f64>,
    q_norm: f64,
    keys: Vec<Vec<f64>>,
    k_hat: Vec<Vec<f64>>,
    k_norm: Vec<f64>,
    scores: Vec<f64>,
    weights: Vec<f64>,
    values: Vec<Vec<f64>>,
}

fn embed(proj: &Array2<f64>, x: &[f64]) -> Vec<f64> {
    proj.outer_iter().map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

/// Unit vector and norm; degenerate inputs give the zero vector and norm 0.
fn unit(e: Vec<f64>) -> (Vec<f64>, f64) {
    let ss: f64 = e.iter().map(|v| v * v).sum();
    if is_degenerate(ss, &e) {
        return (vec![0.0; e.len()], 0.0);
    }
    let n = ss.sqrt();
    (e.into_iter().map(|v| v / n).collect(), n)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Aggregates (`C × ⌊F/p⌋` per period) for fixed candidate sets.
pub(crate) fn forward(
    index: &PatchIndex,
    heads: &[ProjectionHead],
    query: ArrayView2<'_, f64>,
    candidates: &[Vec<usize>],
    tau: f64,
    weighting: Weighting,
) -> Result<(Vec<Array2<f64>>, Vec<PeriodState>)> {
    let c = index.n_channels();
    let mut aggregates = Vec::with_capacity(heads.len());
    let mut states = Vec::with_capacity(heads.len());
    for (k, (head, cands)) in heads.iter().zip(candidates).enumerate() {
        let q = anchored_query(query, index.periods()[k]);
        let (q_hat, q_norm) = unit(embed(&head.query, &q));
        let kw = index.key_width(k);
        let vw = index.value_width(k);
        let mut keys = Vec::with_capacity(cands.len());
        let mut k_hat = Vec::with_capacity(cands.len());
        let mut k_norm = Vec::with_capacity(cands.len());
        let mut values = Vec::with_capacity(cands.len());
        let mut scores = Vec::with_capacity(cands.len());
        for &cand in cands {
            let mut key = vec![0.0; c * kw];
            index.write_key(k, cand, &mut key);
            let (kh, kn) = unit(embed(&head.key, &key));
            scores.push(dot(&q_hat, &kh));
            let mut value = vec![0.0; c * vw];
            index.write_value(k, cand, &mut value);
            keys.push(key);
            k_hat.push(kh);
            k_norm.push(kn);
            values.push(value);
        }
        let weights = if cands.is_empty() {
            Vec::new()
        } else {
            match weighting {
                Weighting::Softmax => softmax_weights(&scores, tau)?,
                Weighting::Uniform => uniform_weights(cands.len()),
            }
        };
        let mut agg = vec![0.0; c * vw];
        for (w, v) in weights.iter().zip(&values) {
            for (a, b) in agg.iter_mut().zip(v) {
                *a += w * b;
            }
        }
        aggregates.push(Array2::from_shape_vec((c, vw), agg).expect("aggregate shape"));
        states.push(PeriodState { query: q, q_hat, q_norm, keys, k_hat, k_norm, scores, weights, values });
    }
    Ok((aggregates, states))
}

/// Accumulate projection gradients given `∂L/∂ṽ⁽ᵖ⁾` (flattened `C × ⌊F/p⌋`) per period.
pub(crate) fn backward(
    states: &[PeriodState],
    d_aggregate: &[Vec<f64>],
    tau: f64,
    weighting: Weighting,
    grads: &mut [ProjectionHead],
) {
    if weighting == Weighting::Uniform {
        return;
    }
    for ((st, dv), grad) in states.iter().zip(d_aggregate).zip(grads.iter_mut()) {
        if st.weights.is_empty() {
            continue;
        }
        let g: Vec<f64> = st.values.iter().map(|v| dot(dv, v)).collect();
        let g_bar = dot(&st.weights, &g);
        let mut d_eq = vec![0.0; st.q_hat.len()];
        for i in 0..g.len() {
            let d_rho = st.weights[i] * (g[i] - g_bar) / tau;
            if d_rho == 0.0 {
                continue;
            }
            let rho = st.scores[i];
            if st.q_norm > 0.0 {
                for (d, (kh, qh)) in d_eq.iter_mut().zip(st.k_hat[i].iter().zip(&st.q_hat)) {
                    *d += d_rho * (kh - rho * qh) / st.q_norm;
                }
            }
            if st.k_norm[i] > 0.0 {
                for (r, mut row) in grad.key.outer_iter_mut().enumerate() {
                    let d_ek = d_rho * (st.q_hat[r] - rho * st.k_hat[i][r]) / st.k_norm[i];
                    row.scaled_add(d_ek, &ndarray::aview1(&st.keys[i]));
                }
            }
        }
        for (r, mut row) in grad.query.outer_iter_mut().enumerate() {
            row.scaled_add(d_eq[r], &ndarray::aview1(&st.query));
        }
    }
}
