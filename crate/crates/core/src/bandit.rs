//! Exp3 mechanics, the per-context Exp3 router, and the uniform context mesh.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Weights are divided by their maximum once it exceeds this value.
pub const WEIGHT_OVERFLOW_GUARD: f64 = 1e100;

/// How an observed reward is folded into the chosen arm's weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum UpdateRule {
    /// `w <- w * exp(alpha * r / K)`.
    #[default]
    PaperLiteral,
    /// `w <- w * exp(alpha * (r / p) / K)`, the classical importance-weighted estimator.
    ImportanceWeighted,
}

impl std::str::FromStr for UpdateRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper_literal" | "literal" => Ok(UpdateRule::PaperLiteral),
            "importance_weighted" | "iw" => Ok(UpdateRule::ImportanceWeighted),
            other => Err(Error::Config(format!("unknown update rule `{other}`"))),
        }
    }
}

impl std::fmt::Display for UpdateRule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            UpdateRule::PaperLiteral => "paper_literal",
            UpdateRule::ImportanceWeighted => "importance_weighted",
        })
    }
}

/// Default mixing rate: `min(1, sqrt(K ln K / ((e - 1) T)))` when a horizon
/// estimate is known, otherwise 0.1.
pub fn default_alpha(arm_count: usize, horizon: Option<u64>) -> f64 {
    match horizon {
        Some(t) if t > 0 && arm_count > 1 => {
            let k = arm_count as f64;
            let e_minus_one = std::f64::consts::E - 1.0;
            (k * k.ln() / (e_minus_one * t as f64)).sqrt().min(1.0)
        }
        Some(_) if arm_count == 1 => 1.0,
        _ => 0.1,
    }
}

/// One arm-weight table with its mixing rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Exp3Instance {
    weights: Vec<f64>,
    alpha: f64,
    rule: UpdateRule,
}

impl Exp3Instance {
    /// Fresh instance with uniform unit weights.
    pub fn new(arm_count: usize, alpha: f64, rule: UpdateRule) -> Result<Self> {
        Self::from_weights(vec![1.0; arm_count], alpha, rule)
    }

    pub fn from_weights(weights: Vec<f64>, alpha: f64, rule: UpdateRule) -> Result<Self> {
        if weights.is_empty() {
            return Err(Error::contract("Exp3 needs at least one arm"));
        }
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(Error::contract(format!("alpha {alpha} outside (0, 1]")));
        }
        let inst = Exp3Instance {
            weights,
            alpha,
            rule,
        };
        inst.check_weights()?;
        Ok(inst)
    }

    pub fn arm_count(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn rule(&self) -> UpdateRule {
        self.rule
    }

    fn check_weights(&self) -> Result<()> {
        match self.weights.iter().position(|w| !(w.is_finite() && *w > 0.0)) {
            Some(k) => Err(Error::InvalidState(format!(
                "weight {k} is {} (must be finite and positive)",
                self.weights[k]
            ))),
            None => Ok(()),
        }
    }

    /// `p_k = (1 - alpha) w_k / sum_j w_j + alpha / K`.
    pub fn probabilities(&self) -> Result<ArmDistribution> {
        self.check_weights()?;
        let k = self.weights.len() as f64;
        let total: f64 = self.weights.iter().sum();
        let floor = self.alpha / k;
        let probs = self
            .weights
            .iter()
            .map(|w| (1.0 - self.alpha) * (w / total) + floor)
            .collect();
        Ok(ArmDistribution { probs })
    }

    /// Credits `reward` (already in `[0, 1]`) to `arm`.
    ///
    /// `chosen_prob` is the probability the arm was sampled with; only the
    /// importance-weighted rule reads it.
    pub fn update(&mut self, arm: usize, reward: f64, chosen_prob: f64) -> Result<()> {
        if arm >= self.weights.len() {
            return Err(Error::contract(format!(
                "arm {arm} out of range for {} arms",
                self.weights.len()
            )));
        }
        if !(0.0..=1.0).contains(&reward) {
            return Err(Error::contract(format!("reward {reward} outside [0, 1]")));
        }
        let estimate = match self.rule {
            UpdateRule::PaperLiteral => reward,
            UpdateRule::ImportanceWeighted => {
                if !(chosen_prob > 0.0 && chosen_prob <= 1.0) {
                    return Err(Error::contract(format!(
                        "chosen probability {chosen_prob} must lie in (0, 1]"
                    )));
                }
                reward / chosen_prob
            }
        };
        let k = self.weights.len() as f64;
        self.weights[arm] *= (self.alpha * estimate / k).exp();
        self.renormalize_if_needed();
        self.check_weights()
    }

    fn renormalize_if_needed(&mut self) {
        let max = self.weights.iter().cloned().fold(f64::MIN, f64::max);
        if max > WEIGHT_OVERFLOW_GUARD || max.is_infinite() {
            if max.is_infinite() {
                // exp overflowed: the infinite arm dominates completely.
                for w in &mut self.weights {
                    *w = if w.is_infinite() { 1.0 } else { f64::MIN_POSITIVE };
                }
                return;
            }
            for w in &mut self.weights {
                *w = (*w / max).max(f64::MIN_POSITIVE);
            }
        }
    }
}

/// A probability vector over arms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmDistribution {
    probs: Vec<f64>,
}

impl ArmDistribution {
    /// Validates an explicit distribution: non-negative entries summing to one.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::contract("empty distribution"));
        }
        if probs.iter().any(|p| !(p.is_finite() && *p >= 0.0 && *p <= 1.0)) {
            return Err(Error::contract("probabilities must lie in [0, 1]"));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::contract(format!("probabilities sum to {total}")));
        }
        Ok(ArmDistribution { probs })
    }

    pub fn uniform(arm_count: usize) -> Self {
        ArmDistribution {
            probs: vec![1.0 / arm_count as f64; arm_count],
        }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Inverse-CDF draw: the first index whose cumulative sum strictly
    /// exceeds a uniform draw in `[0, 1)`.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (k, p) in self.probs.iter().enumerate() {
            acc += p;
            if acc > u {
                return k;
            }
        }
        // Rounding left the total just under `u`; fall back to the last arm with mass.
        self.probs.iter().rposition(|p| *p > 0.0).unwrap_or(0)
    }
}

/// Free-function form of [`ArmDistribution::sample`].
pub fn sample_arm<R: Rng + ?Sized>(dist: &ArmDistribution, rng: &mut R) -> usize {
    dist.sample(rng)
}

/// One independent Exp3 instance per context key, created lazily.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ContextualRouter<K: Ord> {
    arm_count: usize,
    alpha: f64,
    rule: UpdateRule,
    instances: BTreeMap<K, Exp3Instance>,
}

impl<K: Ord + Clone> ContextualRouter<K> {
    pub fn new(arm_count: usize, alpha: f64, rule: UpdateRule) -> Result<Self> {
        // Validate once so lazy creation cannot fail later.
        Exp3Instance::new(arm_count, alpha, rule)?;
        Ok(ContextualRouter {
            arm_count,
            alpha,
            rule,
            instances: BTreeMap::new(),
        })
    }

    pub fn instance_mut(&mut self, key: &K) -> &mut Exp3Instance {
        let (arms, alpha, rule) = (self.arm_count, self.alpha, self.rule);
        self.instances
            .entry(key.clone())
            .or_insert_with(|| Exp3Instance::new(arms, alpha, rule).expect("validated in new"))
    }

    pub fn get(&self, key: &K) -> Option<&Exp3Instance> {
        self.instances.get(key)
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn act<R: Rng + ?Sized>(&mut self, key: &K, rng: &mut R) -> Result<(ArmDistribution, usize)> {
        let dist = self.instance_mut(key).probabilities()?;
        let arm = dist.sample(rng);
        Ok((dist, arm))
    }

    pub fn update(&mut self, key: &K, arm: usize, reward: f64, chosen_prob: f64) -> Result<()> {
        self.instance_mut(key).update(arm, reward, chosen_prob)
    }
}

/// Integer multiples of `epsilon` in `[0, 1]`, with 1 always present.
#[derive(Debug, Clone, PartialEq)]
pub struct MeshGrid {
    epsilon: f64,
    points: Vec<f64>,
}

impl MeshGrid {
    pub fn new(epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon <= 1.0) {
            return Err(Error::contract(format!("mesh step {epsilon} outside (0, 1]")));
        }
        let steps = (1.0 / epsilon + 1e-9).floor() as usize;
        let mut points: Vec<f64> = (0..=steps).map(|i| (i as f64 * epsilon).min(1.0)).collect();
        let last = *points.last().expect("at least the origin");
        if (1.0 - last).abs() <= 1e-9 {
            *points.last_mut().unwrap() = 1.0;
        } else {
            points.push(1.0);
        }
        Ok(MeshGrid { epsilon, points })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Index of the closest mesh point; exact ties go to the smaller point.
    pub fn index(&self, x: f64) -> Result<usize> {
        if !(0.0..=1.0).contains(&x) {
            return Err(Error::contract(format!("context {x} outside [0, 1]")));
        }
        let upper = self.points.partition_point(|p| *p < x);
        if upper == 0 {
            return Ok(0);
        }
        if upper == self.points.len() {
            return Ok(self.points.len() - 1);
        }
        let below = x - self.points[upper - 1];
        let above = self.points[upper] - x;
        Ok(if below <= above { upper - 1 } else { upper })
    }
}

pub fn mesh_index(x: f64, grid: &MeshGrid) -> Result<usize> {
    grid.index(x)
}

/// `(K ln T / (T L^2))^(1/3)`, clamped into `(0, 1]`.
pub fn epsilon_star(arm_count: usize, horizon: u64, lipschitz: f64) -> Result<f64> {
    if arm_count == 0 || horizon < 2 || !(lipschitz > 0.0) {
        return Err(Error::contract(format!(
            "epsilon_star needs K >= 1, T >= 2, L > 0 (got {arm_count}, {horizon}, {lipschitz})"
        )));
    }
    let t = horizon as f64;
    let eps = (arm_count as f64 * t.ln() / (t * lipschitz * lipschitz)).cbrt();
    Ok(eps.clamp(f64::MIN_POSITIVE, 1.0))
}
