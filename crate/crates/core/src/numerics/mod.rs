//! Dense `f64` matrices and reverse-mode differentiation over a recorded graph.

mod graph;
mod matrix;
mod optim;
mod params;

pub use graph::{Graph, Var};
pub use matrix::Matrix;
pub use optim::{build as build_optimizer, Adam, Optimizer, OptimizerKind, Sgd};
pub use params::{ParamId, ParamStore};

/// Rowwise numerically stable softmax.
pub fn rowwise_softmax(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

/// Rowwise log-softmax.
pub fn rowwise_log_softmax(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}

/// Log-probability of `index` under categorical `logits`.
pub fn log_prob(logits: &[f64], index: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    logits[index] - lse
}
