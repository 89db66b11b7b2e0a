//! Independent oracles shared by the integration tests.

#![allow(dead_code)]

use curriculum_core::numerics::{Graph, Matrix, ParamStore, Var};
use rand::Rng;

/// Central-difference derivative of `f` around `x` in every coordinate.
pub fn numeric_gradient(x: &Matrix, h: f64, mut f: impl FnMut(&Matrix) -> f64) -> Matrix {
    let mut g = Matrix::zeros(x.rows(), x.cols());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.as_slice()[i];
        probe.as_mut_slice()[i] = orig + h;
        let up = f(&probe);
        probe.as_mut_slice()[i] = orig - h;
        let down = f(&probe);
        probe.as_mut_slice()[i] = orig;
        g.as_mut_slice()[i] = (up - down) / (2.0 * h);
    }
    g
}

/// Largest relative error between two gradients, with `floor` guarding
/// against division by tiny magnitudes.
pub fn max_rel_err(analytic: &Matrix, numeric: &Matrix, floor: f64) -> f64 {
    analytic
        .as_slice()
        .iter()
        .zip(numeric.as_slice())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Checks the tape's gradient of a scalar-valued `build` against central
/// differences in every input. Returns the worst relative error.
pub fn check_op(inputs: &[Matrix], build: impl Fn(&mut Graph, &[Var]) -> Var) -> f64 {
    let eval = |xs: &[Matrix]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|m| g.input(m.clone())).collect();
        let out = build(&mut g, &vars);
        let s = g.sum(out);
        (g, vars, s)
    };
    let (g, vars, s) = eval(inputs);
    let grads = g.gradients(s).expect("finite graph");
    let mut worst: f64 = 0.0;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v).cloned().unwrap_or_else(|| Matrix::zeros(inputs[k].rows(), inputs[k].cols()));
        let numeric = numeric_gradient(&inputs[k], 1e-6, |probe| {
            let mut xs = inputs.to_vec();
            xs[k] = probe.clone();
            let (g, _, s) = eval(&xs);
            g.scalar(s)
        });
        worst = worst.max(max_rel_err(&analytic, &numeric, 1e-6));
    }
    worst
}

/// Worst relative error of `grads` (a store carrying gradients) against
/// central differences of `loss` in every parameter of `params`.
pub fn check_params(params: &ParamStore, grads: &ParamStore, h: f64, mut loss: impl FnMut(&ParamStore) -> f64) -> f64 {
    let mut worst: f64 = 0.0;
    let mut probe = params.clone();
    for id in params.ids().collect::<Vec<_>>() {
        for i in 0..params.value(id).len() {
            let orig = probe.value(id).as_slice()[i];
            probe.value_mut(id).as_mut_slice()[i] = orig + h;
            let up = loss(&probe);
            probe.value_mut(id).as_mut_slice()[i] = orig - h;
            let down = loss(&probe);
            probe.value_mut(id).as_mut_slice()[i] = orig;
            let n = (up - down) / (2.0 * h);
            let a = grads.grad(id).as_slice()[i];
            worst = worst.max((a - n).abs() / a.abs().max(n.abs()).max(1e-5));
        }
    }
    worst
}

pub fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect())
}

/// Plain-loop scaled dot-product attention over all rows: the reference
/// for the fused channel.
pub fn reference_attention(m: &Matrix, wq: &Matrix, wk: &Matrix, wv: &Matrix, heads: usize) -> Matrix {
    let n = m.rows();
    let q = m.matmul(wq);
    let k = m.matmul(wk);
    let v = m.matmul(wv);
    let d = q.cols();
    let dh = d / heads;
    let mut out = Matrix::zeros(n, d);
    for h in 0..heads {
        let cols = h * dh..(h + 1) * dh;
        for i in 0..n {
            let scores: Vec<f64> = (0..n)
                .map(|j| cols.clone().map(|c| q.get(i, c) * k.get(j, c)).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let total: f64 = w.iter().sum();
            for c in cols.clone() {
                let val: f64 = (0..n).map(|j| w[j] / total * v.get(j, c)).sum();
                out.set(i, c, val);
            }
        }
    }
    out
}

/// Logistic-regression probe trained by full-batch gradient descent on
/// standardized features; returns held-out accuracy.
pub fn linear_probe(train: &[(Vec<f64>, bool)], test: &[(Vec<f64>, bool)]) -> f64 {
    let d = train[0].0.len();
    let n = train.len() as f64;
    let mean: Vec<f64> = (0..d).map(|j| train.iter().map(|(x, _)| x[j]).sum::<f64>() / n).collect();
    let sd: Vec<f64> = (0..d)
        .map(|j| {
            let v = train.iter().map(|(x, _)| (x[j] - mean[j]).powi(2)).sum::<f64>() / n;
            v.sqrt().max(1e-12)
        })
        .collect();
    let z = |x: &[f64]| -> Vec<f64> { (0..d).map(|j| (x[j] - mean[j]) / sd[j]).collect() };
    let train_z: Vec<(Vec<f64>, f64)> = train.iter().map(|(x, y)| (z(x), if *y { 1.0 } else { 0.0 })).collect();
    let (mut w, mut b) = (vec![0.0; d], 0.0);
    for _ in 0..2000 {
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        for (x, y) in &train_z {
            let s: f64 = b + x.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
            let p = 1.0 / (1.0 + (-s).exp());
            for j in 0..d {
                gw[j] += (p - y) * x[j] / n;
            }
            gb += (p - y) / n;
        }
        for j in 0..d {
            // Light ridge term keeps separable data from diverging.
            w[j] -= 0.5 * (gw[j] + 1e-3 * w[j]);
        }
        b -= 0.5 * gb;
    }
    let hits = test
        .iter()
        .filter(|(x, y)| {
            let zx = z(x);
            let s: f64 = b + zx.iter().zip(&w).map(|(a, c)| a * c).sum::<f64>();
            (s > 0.0) == *y
        })
        .count();
    hits as f64 / test.len() as f64
}

/// Upper-tail probability of a chi-square statistic with `dof` degrees of
/// freedom, from the regularized incomplete gamma function.
pub fn chi_square_p_value(stat: f64, dof: usize) -> f64 {
    use statrs::distribution::{ChiSquared, ContinuousCDF};
    1.0 - ChiSquared::new(dof as f64).expect("dof > 0").cdf(stat)
}

/// Prints the one-line verdict and fails the test on FAIL.
pub fn verdict(criterion: u32, pass: bool, detail: &str) {
    println!("criterion {criterion:>2}: {} ({detail})", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "criterion {criterion} failed: {detail}");
}
