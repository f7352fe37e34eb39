use serde::{Deserialize, Serialize};

use super::Parameters;
use crate::error::{RaftError, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

impl std::str::FromStr for OptimizerKind {
    type Err = RaftError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(Self::Adam),
            "sgd" => Ok(Self::Sgd),
            other => Err(RaftError::UnknownVariant(other.to_string())),
        }
    }
}

pub trait Optimizer {
    fn step(&mut self, params: &mut Parameters, grads: &Parameters);
}

/// Plain gradient descent.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub learning_rate: f64,
}

impl Optimizer for Sgd {
    fn step(&mut self, params: &mut Parameters, grads: &Parameters) {
        for (p, g) in params.tensors_mut().into_iter().zip(grads.tensors()) {
            for (w, d) in p.iter_mut().zip(g) {
                *w -= self.learning_rate * d;
            }
        }
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(learning_rate: f64, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self { learning_rate, beta1, beta2, epsilon, t: 0, m: Vec::new(), v: Vec::new() }
    }
}

impl Optimizer for Adam {
    fn step(&mut self, params: &mut Parameters, grads: &Parameters) {
        let gs = grads.tensors();
        if self.m.is_empty() {
            self.m = gs.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (k, (p, g)) in params.tensors_mut().into_iter().zip(gs).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let mhat = m[i] / c1;
                let vhat = v[i] / c2;
                p[i] -= self.learning_rate * mhat / (vhat.sqrt() + self.epsilon);
            }
        }
    }
}
