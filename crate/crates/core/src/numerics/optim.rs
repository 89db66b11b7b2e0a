use serde::{Deserialize, Serialize};

use super::{Matrix, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

/// Applies accumulated gradients to a store and clears them.
pub trait Optimizer {
    fn step(&mut self, params: &mut ParamStore);
}

#[derive(Debug, Clone)]
pub struct Sgd {
    pub learning_rate: f64,
}

impl Optimizer for Sgd {
    fn step(&mut self, params: &mut ParamStore) {
        let lr = self.learning_rate;
        for (value, grad) in params.values_and_grads_mut() {
            for (v, g) in value.as_mut_slice().iter_mut().zip(grad.as_slice()) {
                *v -= lr * g;
            }
        }
        params.zero_grads();
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    t: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }
}

impl Optimizer for Adam {
    fn step(&mut self, params: &mut ParamStore) {
        if self.m.is_empty() {
            for (value, _) in params.values_and_grads_mut() {
                self.m.push(Matrix::zeros(value.rows(), value.cols()));
                self.v.push(Matrix::zeros(value.rows(), value.cols()));
            }
        }
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let lr = self.learning_rate;
        let eps = self.epsilon;
        for (((value, grad), m), v) in params
            .values_and_grads_mut()
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            for (((p, g), m), v) in value
                .as_mut_slice()
                .iter_mut()
                .zip(grad.as_slice())
                .zip(m.as_mut_slice())
                .zip(v.as_mut_slice())
            {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
        params.zero_grads();
    }
}

/// Boxed optimizer chosen by kind.
pub fn build(kind: OptimizerKind, learning_rate: f64) -> Box<dyn Optimizer + Send> {
    match kind {
        OptimizerKind::Sgd => Box::new(Sgd { learning_rate }),
        OptimizerKind::Adam => Box::new(Adam::new(learning_rate)),
    }
}
