//! Synthetic Lipschitz contextual bandits with known means, for measuring
//! regret, discretization error and their scaling with the horizon.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bandit::{default_alpha, epsilon_star, ContextualRouter, MeshGrid, UpdateRule};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded};

const LIPSCHITZ_GRID: usize = 10_001;

/// Tent-shaped arms `r_k(x) = max(0, 1 - L |x - c_k|)` over contexts in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzBandit {
    anchors: Vec<f64>,
    lipschitz: f64,
}

impl LipschitzBandit {
    pub fn new(anchors: Vec<f64>, lipschitz: f64) -> Result<Self> {
        if anchors.is_empty() {
            return Err(Error::contract("a bandit needs at least one arm"));
        }
        if !(lipschitz > 0.0 && lipschitz.is_finite()) {
            return Err(Error::contract(format!("Lipschitz constant must be positive, got {lipschitz}")));
        }
        if anchors.iter().any(|c| !c.is_finite()) {
            return Err(Error::contract("anchors must be finite"));
        }
        let b = LipschitzBandit { anchors, lipschitz };
        let worst = b.lipschitz_violation();
        if worst > 1e-12 {
            return Err(Error::InvalidState(format!("reward family exceeds its Lipschitz constant by {worst}")));
        }
        Ok(b)
    }

    /// Anchors spread evenly at `(k + 0.5) / K`.
    pub fn evenly_spaced(arm_count: usize, lipschitz: f64) -> Result<Self> {
        let anchors = (0..arm_count).map(|k| (k as f64 + 0.5) / arm_count as f64).collect();
        Self::new(anchors, lipschitz)
    }

    /// Anchors drawn uniformly from [0, 1].
    pub fn random<R: Rng + ?Sized>(arm_count: usize, lipschitz: f64, rng: &mut R) -> Result<Self> {
        let anchors = (0..arm_count).map(|_| rng.gen::<f64>()).collect();
        Self::new(anchors, lipschitz)
    }

    pub fn arm_count(&self) -> usize {
        self.anchors.len()
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    pub fn anchors(&self) -> &[f64] {
        &self.anchors
    }

    pub fn mean(&self, arm: usize, x: f64) -> f64 {
        (1.0 - self.lipschitz * (x - self.anchors[arm]).abs()).max(0.0)
    }

    /// Best arm at `x`; ties go to the lowest index.
    pub fn best_arm(&self, x: f64) -> usize {
        let mut best = 0;
        for k in 1..self.arm_count() {
            if self.mean(k, x) > self.mean(best, x) {
                best = k;
            }
        }
        best
    }

    pub fn best_mean(&self, x: f64) -> f64 {
        self.mean(self.best_arm(x), x)
    }

    /// Largest excess of `|r(x) - r(x')| - L |x - x'|` over neighbouring
    /// points of a uniform grid and all arms. The family is piecewise linear,
    /// so neighbouring pairs bound every pair.
    pub fn lipschitz_violation(&self) -> f64 {
        let step = 1.0 / (LIPSCHITZ_GRID - 1) as f64;
        let mut worst = f64::NEG_INFINITY;
        for k in 0..self.arm_count() {
            let mut prev = self.mean(k, 0.0);
            for i in 1..LIPSCHITZ_GRID {
                let x = i as f64 * step;
                let cur = self.mean(k, x);
                worst = worst.max((cur - prev).abs() - self.lipschitz * step);
                prev = cur;
            }
        }
        worst
    }
}

/// Best response restricted to mesh points: `x -> argmax_k r_k(f_S(x))`.
#[derive(Debug, Clone)]
pub struct DiscretizedPolicy {
    grid: MeshGrid,
    arms: Vec<usize>,
}

impl DiscretizedPolicy {
    pub fn arm(&self, x: f64) -> Result<usize> {
        Ok(self.arms[self.grid.index(x)?])
    }

    pub fn arms_at_points(&self) -> &[usize] {
        &self.arms
    }
}

pub fn discretized_best_response(instance: &LipschitzBandit, grid: &MeshGrid) -> DiscretizedPolicy {
    DiscretizedPolicy {
        grid: grid.clone(),
        arms: grid.points().iter().map(|p| instance.best_arm(*p)).collect(),
    }
}

/// Per-round mean rewards of the learner, the best response and the
/// discretized best response.
#[derive(Debug, Clone, PartialEq)]
pub struct RegretTrace {
    pub epsilon: f64,
    pub realized: Vec<f64>,
    pub best_response: Vec<f64>,
    pub discretized_best: Vec<f64>,
}

impl RegretTrace {
    pub fn horizon(&self) -> usize {
        self.realized.len()
    }
}

/// Exp3 routed over mesh points: contexts are snapped to the mesh and each
/// point owns an independent instance tuned for `T / d` rounds.
pub fn run_mesh_exp3(
    instance: &LipschitzBandit,
    horizon: u64,
    epsilon: f64,
    rule: UpdateRule,
    seed: u64,
) -> Result<RegretTrace> {
    let grid = MeshGrid::new(epsilon)?;
    let policy = discretized_best_response(instance, &grid);
    let k = instance.arm_count();
    let per_point = (horizon / grid.len() as u64).max(2);
    let mut router = ContextualRouter::new(k, default_alpha(k, Some(per_point)), rule)?;
    let mut rng = seeded(seed);
    let n = horizon as usize;
    let mut trace = RegretTrace {
        epsilon,
        realized: Vec::with_capacity(n),
        best_response: Vec::with_capacity(n),
        discretized_best: Vec::with_capacity(n),
    };
    for _ in 0..n {
        let x: f64 = rng.gen();
        let key = grid.index(x)?;
        let (dist, arm) = router.act(&key, &mut rng)?;
        let mean = instance.mean(arm, x);
        let reward = if rng.gen::<f64>() < mean { 1.0 } else { 0.0 };
        router.update(&key, arm, reward, dist.probs()[arm])?;
        trace.realized.push(mean);
        trace.best_response.push(instance.best_mean(x));
        trace.discretized_best.push(instance.mean(policy.arms[key], x));
    }
    Ok(trace)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegretSummary {
    pub r_s: f64,
    pub de: f64,
    pub r: f64,
}

/// `R_S = sum(discretized - realized)`, `DE = sum(best - discretized)`,
/// `R = R_S + DE`.
pub fn regret_and_de(trace: &RegretTrace) -> RegretSummary {
    let r_s: f64 = trace.discretized_best.iter().zip(&trace.realized).map(|(d, r)| d - r).sum();
    let de: f64 = trace.best_response.iter().zip(&trace.discretized_best).map(|(b, d)| b - d).sum();
    RegretSummary { r_s, de, r: r_s + de }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedResult {
    pub horizon: u64,
    pub seed: u64,
    pub epsilon: f64,
    pub summary: RegretSummary,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HorizonRow {
    pub horizon: u64,
    pub epsilon: f64,
    pub mean_regret: f64,
    pub sd_regret: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScalingStudy {
    pub rule: UpdateRule,
    pub arm_count: usize,
    pub lipschitz: f64,
    pub rows: Vec<HorizonRow>,
    pub runs: Vec<SeedResult>,
    /// Least-squares slope of log mean regret against log horizon.
    pub slope: f64,
}

impl ScalingStudy {
    /// Ratio of mean regret between consecutive horizons.
    pub fn ratios(&self) -> Vec<f64> {
        self.rows.windows(2).map(|w| w[1].mean_regret / w[0].mean_regret).collect()
    }
}

pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let cov: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    cov / var
}

/// Mesh-Exp3 regret at each horizon, with `epsilon_star` per horizon and
/// `seeds` independent runs each.
pub fn scaling_study(
    instance: &LipschitzBandit,
    horizons: &[u64],
    seeds: u64,
    rule: UpdateRule,
    base_seed: u64,
) -> Result<ScalingStudy> {
    if horizons.len() < 2 {
        return Err(Error::contract("a scaling study needs at least two horizons"));
    }
    if seeds == 0 {
        return Err(Error::contract("a scaling study needs at least one seed"));
    }
    let jobs: Vec<(u64, u64)> = horizons.iter().flat_map(|h| (0..seeds).map(move |s| (*h, s))).collect();
    let runs: Vec<SeedResult> = jobs
        .par_iter()
        .map(|&(horizon, seed)| {
            let epsilon = epsilon_star(instance.arm_count(), horizon, instance.lipschitz())?;
            let trace = run_mesh_exp3(instance, horizon, epsilon, rule, derive_seed(base_seed ^ horizon, seed))?;
            Ok(SeedResult {
                horizon,
                seed,
                epsilon,
                summary: regret_and_de(&trace),
            })
        })
        .collect::<Result<_>>()?;
    let rows: Vec<HorizonRow> = horizons
        .iter()
        .map(|&h| {
            let rs: Vec<&SeedResult> = runs.iter().filter(|r| r.horizon == h).collect();
            let n = rs.len() as f64;
            let mean = rs.iter().map(|r| r.summary.r).sum::<f64>() / n;
            let var = rs.iter().map(|r| (r.summary.r - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
            HorizonRow {
                horizon: h,
                epsilon: rs[0].epsilon,
                mean_regret: mean,
                sd_regret: var.sqrt(),
            }
        })
        .collect();
    let xs: Vec<f64> = rows.iter().map(|r| r.horizon as f64).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.mean_regret.max(1e-12)).collect();
    Ok(ScalingStudy {
        rule,
        arm_count: instance.arm_count(),
        lipschitz: instance.lipschitz(),
        slope: loglog_slope(&xs, &ys),
        rows,
        runs,
    })
}

/// Exp3 routed over a finite context set where context `c` has optimal arm
/// `c mod K` (Bernoulli mean `high`, others `low`). Returns each context's
/// cumulative pseudo-regret curve indexed by its own visits.
pub fn finite_context_study(
    arm_count: usize,
    contexts: usize,
    horizon: u64,
    (high, low): (f64, f64),
    rule: UpdateRule,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    if contexts == 0 || arm_count == 0 {
        return Err(Error::contract("need at least one context and one arm"));
    }
    let per_context = (horizon / contexts as u64).max(2);
    let mut router = ContextualRouter::new(arm_count, default_alpha(arm_count, Some(per_context)), rule)?;
    let mut rng = seeded(seed);
    let mut curves = vec![Vec::new(); contexts];
    for _ in 0..horizon {
        let c = rng.gen_range(0..contexts);
        let (dist, arm) = router.act(&c, &mut rng)?;
        let best = c % arm_count;
        let mean = if arm == best { high } else { low };
        let reward = if rng.gen::<f64>() < mean { 1.0 } else { 0.0 };
        router.update(&c, arm, reward, dist.probs()[arm])?;
        let prev = curves[c].last().copied().unwrap_or(0.0);
        curves[c].push(prev + high - mean);
    }
    Ok(curves)
}

/// Regret added over the first and the last tenth of a cumulative curve.
pub fn decile_increments(curve: &[f64]) -> (f64, f64) {
    let n = curve.len();
    let d = (n / 10).max(1);
    let at = |i: usize| if i == 0 { 0.0 } else { curve[i - 1] };
    (at(d) - at(0), at(n) - at(n - d))
}
