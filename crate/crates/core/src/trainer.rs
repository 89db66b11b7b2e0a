//! Clipped-surrogate policy optimisation for both hierarchy levels.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{build_optimizer, rowwise_log_softmax, Graph, Matrix, Optimizer, OptimizerKind, Var};
use crate::rng::{seeded, Rng};
use crate::student::HierarchicalPolicy;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub kl_coefficient: f64,
    pub sgd_iterations: usize,
    pub learning_rate: f64,
    pub entropy_coefficient: f64,
    pub clip: f64,
    pub value_clip: f64,
    pub value_coefficient: f64,
    pub optimizer: OptimizerKind,
    /// Minibatch size as a fraction of the batch, with a floor of 32 rows.
    pub minibatch_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            gamma: 0.99,
            gae_lambda: 1.0,
            kl_coefficient: 0.5,
            sgd_iterations: 10,
            learning_rate: 1e-4,
            entropy_coefficient: 0.0,
            clip: 0.3,
            value_clip: 10.0,
            value_coefficient: 1.0,
            optimizer: OptimizerKind::Sgd,
            minibatch_fraction: 0.25,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) || !(0.0..=1.0).contains(&self.gae_lambda) {
            return Err(Error::Config("trainer.gamma and gae_lambda must lie in [0,1]".into()));
        }
        if !(self.clip > 0.0) || !(self.learning_rate > 0.0) || !(self.value_clip > 0.0) {
            return Err(Error::Config("trainer.clip, value_clip and learning_rate must be positive".into()));
        }
        if self.sgd_iterations == 0 {
            return Err(Error::Config("trainer.sgd_iterations must be positive".into()));
        }
        if !(self.minibatch_fraction > 0.0 && self.minibatch_fraction <= 1.0) {
            return Err(Error::Config("trainer.minibatch_fraction must be in (0,1]".into()));
        }
        if self.kl_coefficient < 0.0 || self.entropy_coefficient < 0.0 || self.value_coefficient < 0.0 {
            return Err(Error::Config("trainer loss coefficients must be non-negative".into()));
        }
        Ok(())
    }

    pub fn minibatch_size(&self, n: usize) -> usize {
        ((n as f64 * self.minibatch_fraction) as usize).max(32).min(n.max(1))
    }
}

/// Aligned per-sample arrays for one hierarchy level.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LevelBatch {
    pub obs: Vec<Vec<f64>>,
    /// Skill inputs of the low level; empty for the high level.
    pub aux: Vec<Vec<f64>>,
    /// Discrete action or option index (0 for continuous skills).
    pub actions: Vec<usize>,
    /// Pre-squash samples for continuous skills; empty otherwise.
    pub continuous: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub log_probs: Vec<f64>,
    /// Logits (categorical) or means (Gaussian) under the collecting policy.
    pub dist_params: Vec<Vec<f64>>,
    /// Same agent's next sample in the episode; `None` ends its trajectory.
    pub next: Vec<Option<usize>>,
    pub agent: Vec<usize>,
    /// Rows that attend to each other (high level only).
    pub groups: Vec<(usize, usize)>,
    /// Gaussian log-std of the collecting policy.
    pub old_log_std: Option<Vec<f64>>,
}

impl LevelBatch {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        let lens = [
            self.obs.len(),
            self.actions.len(),
            self.values.len(),
            self.log_probs.len(),
            self.dist_params.len(),
            self.next.len(),
            self.agent.len(),
        ];
        if lens.iter().any(|l| *l != n) || (!self.aux.is_empty() && self.aux.len() != n) {
            return Err(Error::InvalidState("trajectory arrays have different lengths".into()));
        }
        if !self.continuous.is_empty() && self.continuous.len() != n {
            return Err(Error::InvalidState("continuous samples misaligned".into()));
        }
        for (i, nx) in self.next.iter().enumerate() {
            if let Some(j) = nx {
                if *j <= i || *j >= n {
                    return Err(Error::InvalidState(format!("sample {i} links forward to {j}")));
                }
            }
        }
        Ok(())
    }

    /// Appends `other`, shifting its links and groups.
    pub fn append(&mut self, mut other: LevelBatch) {
        let off = self.len();
        self.obs.append(&mut other.obs);
        self.aux.append(&mut other.aux);
        self.actions.append(&mut other.actions);
        self.continuous.append(&mut other.continuous);
        self.rewards.append(&mut other.rewards);
        self.values.append(&mut other.values);
        self.log_probs.append(&mut other.log_probs);
        self.dist_params.append(&mut other.dist_params);
        self.next.extend(other.next.into_iter().map(|n| n.map(|j| j + off)));
        self.agent.append(&mut other.agent);
        self.groups.extend(other.groups.into_iter().map(|(s, l)| (s + off, l)));
        if self.old_log_std.is_none() {
            self.old_log_std = other.old_log_std;
        }
    }

    /// Follows `next` links from every trajectory start.
    pub fn sequences(&self) -> Vec<(Vec<Vec<f64>>, Vec<usize>)> {
        let mut has_prev = vec![false; self.len()];
        for j in self.next.iter().flatten() {
            has_prev[*j] = true;
        }
        let mut out = Vec::new();
        for start in (0..self.len()).filter(|i| !has_prev[*i]) {
            let (mut obs, mut acts) = (Vec::new(), Vec::new());
            let mut cur = Some(start);
            while let Some(i) = cur {
                obs.push(self.obs[i].clone());
                acts.push(self.actions[i]);
                cur = self.next[i];
            }
            out.push((obs, acts));
        }
        out
    }
}

/// Both levels of one or more episodes, stamped with the policy version
/// that collected them.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryBatch {
    pub low: LevelBatch,
    pub high: LevelBatch,
    pub policy_version: u64,
}

impl TrajectoryBatch {
    pub fn merge(batches: impl IntoIterator<Item = TrajectoryBatch>) -> Result<TrajectoryBatch> {
        let mut out: Option<TrajectoryBatch> = None;
        for b in batches {
            match &mut out {
                None => out = Some(b),
                Some(acc) => {
                    if acc.policy_version != b.policy_version {
                        return Err(Error::InvalidState("cannot merge batches from different policy versions".into()));
                    }
                    acc.low.append(b.low);
                    acc.high.append(b.high);
                }
            }
        }
        out.ok_or_else(|| Error::contract("no batches to merge"))
    }
}

/// Generalized advantage estimation over `next` links with a zero bootstrap
/// at trajectory ends. Returns `(returns, advantages)`, unnormalised.
pub fn compute_returns_and_advantages(
    rewards: &[f64],
    values: &[f64],
    next: &[Option<usize>],
    gamma: f64,
    lambda: f64,
) -> (Vec<f64>, Vec<f64>) {
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    for i in (0..n).rev() {
        let (next_value, next_adv) = match next[i] {
            Some(j) => (values[j], adv[j]),
            None => (0.0, 0.0),
        };
        let delta = rewards[i] + gamma * next_value - values[i];
        adv[i] = delta + gamma * lambda * next_adv;
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    (returns, adv)
}

/// Zero mean and unit (population) variance; a constant batch is only centred.
pub fn normalize_advantages(adv: &mut [f64]) {
    if adv.len() < 2 {
        return;
    }
    let n = adv.len() as f64;
    let mean = adv.iter().sum::<f64>() / n;
    let var = adv.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    for a in adv.iter_mut() {
        *a -= mean;
        if std > 1e-12 {
            *a /= std;
        }
    }
}

/// `-mean(min(r A, clip(r, 1-eps, 1+eps) A))`.
pub fn clipped_surrogate(g: &mut Graph, ratio: Var, adv: Var, clip: f64) -> Var {
    let unclipped = g.mul(ratio, adv);
    let clamped = g.clamp(ratio, 1.0 - clip, 1.0 + clip);
    let clipped = g.mul(clamped, adv);
    let m = g.minimum(unclipped, clipped);
    let mean = g.mean(m);
    g.neg(mean)
}

/// `0.5 mean(max((v - R)^2, (v_old + clip(v - v_old, -c, c) - R)^2))`.
pub fn clipped_value_loss(g: &mut Graph, value: Var, old_value: Var, returns: Var, value_clip: f64) -> Var {
    let dv = g.sub(value, old_value);
    let dv = g.clamp(dv, -value_clip, value_clip);
    let v_clipped = g.add(old_value, dv);
    let e1 = g.sub(value, returns);
    let e1 = g.square(e1);
    let e2 = g.sub(v_clipped, returns);
    let e2 = g.square(e2);
    let worst = g.maximum(e1, e2);
    let mean = g.mean(worst);
    g.scale(mean, 0.5)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Low,
    High,
}

impl std::fmt::Display for Level {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Level::Low => "low",
            Level::High => "high",
        })
    }
}

/// Loss components on one minibatch.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossTerms {
    pub surrogate: f64,
    pub kl: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub clip_fraction: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UpdateMetrics {
    pub level: Level,
    pub surrogate: f64,
    pub kl: f64,
    pub value_loss: f64,
    pub clip_fraction: f64,
    pub samples: usize,
}

fn column(values: impl IntoIterator<Item = f64>) -> Matrix {
    let v: Vec<f64> = values.into_iter().collect();
    Matrix::column(&v)
}

/// Builds the full loss for `rows` of `level` on a fresh graph. High-level
/// rows must be whole attention groups, given as `groups` relative to `rows`.
#[allow(clippy::too_many_arguments)]
pub fn build_loss(
    g: &mut Graph,
    policy: &HierarchicalPolicy,
    level: Level,
    batch: &LevelBatch,
    rows: &[usize],
    groups: &[(usize, usize)],
    advantages: &[f64],
    returns: &[f64],
    config: &TrainConfig,
) -> (Var, LossTerms) {
    let m = rows.len();
    let obs = g.input(Matrix::from_rows(&rows.iter().map(|i| batch.obs[*i].clone()).collect::<Vec<_>>()));
    let (head, value) = match level {
        Level::Low => {
            let skills = g.input(Matrix::from_rows(&rows.iter().map(|i| batch.aux[*i].clone()).collect::<Vec<_>>()));
            policy.low_forward(g, obs, skills)
        }
        Level::High => {
            let f = policy.high_forward(g, obs, groups);
            (f.head, f.value)
        }
    };
    let adv = g.input(column(rows.iter().map(|i| advantages[*i])));
    let ret = g.input(column(rows.iter().map(|i| returns[*i])));
    let old_value = g.input(column(rows.iter().map(|i| batch.values[*i])));
    let old_lp = g.input(column(rows.iter().map(|i| batch.log_probs[*i])));
    let old_params = Matrix::from_rows(&rows.iter().map(|i| batch.dist_params[*i].clone()).collect::<Vec<_>>());

    let gaussian = level == Level::High && !batch.continuous.is_empty();
    let (new_lp, kl, entropy) = if gaussian {
        let ls_id = policy.high_log_std_id().expect("continuous policy has log_std");
        let ls = g.param(policy.params(), ls_id);
        let lsb = g.broadcast_rows(ls, m);
        let u = g.input(Matrix::from_rows(&rows.iter().map(|i| batch.continuous[*i].clone()).collect::<Vec<_>>()));
        let d = batch.continuous[rows[0]].len();
        let c = 0.5 * (2.0 * std::f64::consts::PI).ln();
        // log N(u; mean, exp(ls))
        let diff = g.sub(u, head);
        let neg_ls = g.neg(lsb);
        let inv_std = g.exp(neg_ls);
        let z = g.mul(diff, inv_std);
        let z2 = g.square(z);
        let half_z2 = g.scale(z2, -0.5);
        let per_dim = g.sub(half_z2, lsb);
        let lp = g.row_sum(per_dim);
        let lp = g.add_scalar(lp, -(d as f64) * c);
        // KL(old || new) for diagonal Gaussians.
        let old_ls = batch.old_log_std.clone().unwrap_or_else(|| vec![0.0; d]);
        let old_ls_m = Matrix::from_rows(&vec![old_ls.clone(); m]);
        let old_var = g.input(old_ls_m.map(|x| (2.0 * x).exp()));
        let old_lsv = g.input(old_ls_m);
        let old_mean = g.input(old_params);
        let dm = g.sub(old_mean, head);
        let dm2 = g.square(dm);
        let num = g.add(dm2, old_var);
        let two_neg_ls = g.scale(lsb, -2.0);
        let inv_var = g.exp(two_neg_ls);
        let frac = g.mul(num, inv_var);
        let frac = g.scale(frac, 0.5);
        let log_ratio = g.sub(lsb, old_lsv);
        let kl_el = g.add(log_ratio, frac);
        let kl_el = g.add_scalar(kl_el, -0.5);
        let kl_rows = g.row_sum(kl_el);
        let kl = g.mean(kl_rows);
        let ent_rows = g.row_sum(lsb);
        let ent_rows = g.add_scalar(ent_rows, d as f64 * (c + 0.5));
        let ent = g.mean(ent_rows);
        (lp, kl, ent)
    } else {
        let logp = g.log_softmax(head);
        let actions: Vec<usize> = rows.iter().map(|i| batch.actions[*i]).collect();
        let lp = g.pick(logp, &actions);
        let old_logp_m = rowwise_log_softmax(&old_params);
        let old_p = g.input(old_logp_m.map(f64::exp));
        let old_logp = g.input(old_logp_m);
        let gap = g.sub(old_logp, logp);
        let w = g.mul(old_p, gap);
        let kl_rows = g.row_sum(w);
        let kl = g.mean(kl_rows);
        let p = g.exp(logp);
        let plogp = g.mul(p, logp);
        let ent_rows = g.row_sum(plogp);
        let ent = g.mean(ent_rows);
        let ent = g.neg(ent);
        (lp, kl, ent)
    };
    let log_ratio = g.sub(new_lp, old_lp);
    let ratio = g.exp(log_ratio);
    let surrogate = clipped_surrogate(g, ratio, adv, config.clip);
    let value_loss = clipped_value_loss(g, value, old_value, ret, config.value_clip);
    let kl_term = g.scale(kl, config.kl_coefficient);
    let v_term = g.scale(value_loss, config.value_coefficient);
    let e_term = g.scale(entropy, -config.entropy_coefficient);
    let total = g.add(surrogate, kl_term);
    let total = g.add(total, v_term);
    let total = g.add(total, e_term);

    let clipped = g
        .value(ratio)
        .as_slice()
        .iter()
        .filter(|r| (**r - 1.0).abs() > config.clip)
        .count();
    let terms = LossTerms {
        surrogate: g.scalar(surrogate),
        kl: g.scalar(kl),
        value_loss: g.scalar(value_loss),
        entropy: g.scalar(entropy),
        clip_fraction: clipped as f64 / m.max(1) as f64,
        total: g.scalar(total),
    };
    (total, terms)
}

/// Splits a level into shuffled minibatches; high-level minibatches hold
/// whole attention groups. Returns (rows, groups relative to rows).
fn minibatches(level: Level, batch: &LevelBatch, size: usize, rng: &mut Rng) -> Vec<(Vec<usize>, Vec<(usize, usize)>)> {
    match level {
        Level::Low => {
            let mut idx: Vec<usize> = (0..batch.len()).collect();
            idx.shuffle(rng);
            idx.chunks(size).map(|c| (c.to_vec(), Vec::new())).collect()
        }
        Level::High => {
            let mut groups = batch.groups.clone();
            groups.shuffle(rng);
            let mut out = Vec::new();
            let (mut rows, mut rel) = (Vec::new(), Vec::new());
            for (start, len) in groups {
                rel.push((rows.len(), len));
                rows.extend(start..start + len);
                if rows.len() >= size {
                    out.push((std::mem::take(&mut rows), std::mem::take(&mut rel)));
                }
            }
            if !rows.is_empty() {
                out.push((rows, rel));
            }
            out
        }
    }
}

/// Owns the optimizer state and the minibatch shuffling stream.
pub struct Trainer {
    config: TrainConfig,
    optimizer: Box<dyn Optimizer + Send>,
    rng: Rng,
    updates: u64,
}

impl Trainer {
    pub fn new(config: TrainConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(Trainer {
            optimizer: build_optimizer(config.optimizer, config.learning_rate),
            config,
            rng: seeded(seed),
            updates: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    /// One optimisation phase on a freshly collected batch. Rejects batches
    /// gathered under any other policy version, including a batch that was
    /// already used for an update.
    pub fn update(&mut self, policy: &mut HierarchicalPolicy, batch: &TrajectoryBatch) -> Result<Vec<UpdateMetrics>> {
        if batch.policy_version != policy.version() {
            return Err(Error::InvalidState(format!(
                "batch was collected under policy version {} but the policy is at {}; recollect before updating",
                batch.policy_version,
                policy.version()
            )));
        }
        batch.low.validate()?;
        batch.high.validate()?;
        let mut metrics = Vec::new();
        let levels = [(Level::Low, &batch.low), (Level::High, &batch.high)];
        let mut prepared = Vec::new();
        for (level, lb) in levels {
            if lb.is_empty() {
                continue;
            }
            let (returns, mut adv) =
                compute_returns_and_advantages(&lb.rewards, &lb.values, &lb.next, self.config.gamma, self.config.gae_lambda);
            normalize_advantages(&mut adv);
            prepared.push((level, lb, returns, adv, LossTerms::default(), 0usize));
        }
        for _ in 0..self.config.sgd_iterations {
            for (level, lb, returns, adv, acc, steps) in prepared.iter_mut() {
                let size = self.config.minibatch_size(lb.len());
                for (rows, groups) in minibatches(*level, lb, size, &mut self.rng) {
                    let mut g = Graph::new();
                    let (loss, terms) = build_loss(&mut g, policy, *level, lb, &rows, &groups, adv, returns, &self.config);
                    g.backward(loss, policy.params_mut()).map_err(|e| match e {
                        Error::Numeric { node, op, detail } => Error::Numeric {
                            node,
                            op,
                            detail: format!(
                                "{detail} ({level} level, update {}, surrogate {}, kl {}, value loss {})",
                                self.updates, terms.surrogate, terms.kl, terms.value_loss
                            ),
                        },
                        other => other,
                    })?;
                    self.optimizer.step(policy.params_mut());
                    acc.surrogate += terms.surrogate;
                    acc.kl += terms.kl;
                    acc.value_loss += terms.value_loss;
                    acc.clip_fraction += terms.clip_fraction;
                    *steps += 1;
                }
            }
        }
        for (level, lb, _, _, acc, steps) in prepared {
            let s = steps.max(1) as f64;
            metrics.push(UpdateMetrics {
                level,
                surrogate: acc.surrogate / s,
                kl: acc.kl / s,
                value_loss: acc.value_loss / s,
                clip_fraction: acc.clip_fraction / s,
                samples: lb.len(),
            });
        }
        policy.bump_version();
        self.updates += 1;
        Ok(metrics)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{MultiAgentEnv, StepOutcome};
    use crate::student::{hierarchical_rollout, SkillMode, StudentConfig};

    #[test]
    fn telescoping_reward_to_go() {
        let r = [1.0, 0.0, 2.0, -1.0];
        let next = [Some(1), Some(2), Some(3), None];
        let (ret, adv) = compute_returns_and_advantages(&r, &[0.0; 4], &next, 1.0, 1.0);
        assert_eq!(adv, vec![2.0, 1.0, 1.0, -1.0]);
        assert_eq!(ret, adv);
    }

    #[test]
    fn single_terminal_transition() {
        let (_, adv) = compute_returns_and_advantages(&[2.5], &[0.75], &[None], 0.99, 0.95);
        assert_eq!(adv, vec![1.75]);
    }

    #[test]
    fn three_step_fixture_matches_hand_recursion() {
        let (g, l) = (0.9, 0.8);
        let (r, v) = ([1.0, 0.0, 2.0], [0.5, 0.5, 0.5]);
        let d2 = 2.0 - 0.5;
        let d1 = 0.0 + g * 0.5 - 0.5;
        let d0 = 1.0 + g * 0.5 - 0.5;
        let a2 = d2;
        let a1 = d1 + g * l * a2;
        let a0 = d0 + g * l * a1;
        let (ret, adv) = compute_returns_and_advantages(&r, &v, &[Some(1), Some(2), None], g, l);
        for (x, y) in adv.iter().zip([a0, a1, a2]) {
            assert!((x - y).abs() < 1e-9);
        }
        assert!((ret[0] - (a0 + 0.5)).abs() < 1e-12);
    }

    #[test]
    fn interleaved_agents_follow_their_links() {
        // Two agents, two steps, interleaved rows.
        let r = [1.0, 10.0, 2.0, 20.0];
        let next = [Some(2), Some(3), None, None];
        let (_, adv) = compute_returns_and_advantages(&r, &[0.0; 4], &next, 1.0, 1.0);
        assert_eq!(adv, vec![3.0, 30.0, 2.0, 20.0]);
    }

    #[test]
    fn advantage_normalisation() {
        let mut a: Vec<f64> = (0..50).map(|i| (i as f64 * 0.37).sin() * 4.0 + 2.0).collect();
        normalize_advantages(&mut a);
        let n = a.len() as f64;
        let mean = a.iter().sum::<f64>() / n;
        let var = a.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-6);
    }

    #[test]
    fn clip_inactive_equals_plain_surrogate() {
        let mut g = Graph::new();
        let ratio = g.input(Matrix::column(&[0.8, 1.0, 1.2, 0.95]));
        let adv = g.input(Matrix::column(&[1.0, -2.0, 0.5, -0.3]));
        let s = clipped_surrogate(&mut g, ratio, adv, 0.3);
        let plain = -(0.8 - 2.0 + 0.6 - 0.285) / 4.0;
        assert!((g.scalar(s) - plain).abs() < 1e-9);
    }

    #[test]
    fn clipped_branch_has_zero_ratio_gradient() {
        let mut g = Graph::new();
        let ratio = g.input(Matrix::column(&[2.0]));
        let adv = g.input(Matrix::column(&[1.5]));
        let s = clipped_surrogate(&mut g, ratio, adv, 0.3);
        assert!((g.scalar(s) + 1.3 * 1.5).abs() < 1e-12);
        let grads = g.gradients(s).unwrap();
        assert_eq!(grads.wrt(ratio).unwrap().get(0, 0), 0.0);
        // Finite differences agree.
        let f = |r: f64| {
            let mut g = Graph::new();
            let ratio = g.input(Matrix::column(&[r]));
            let adv = g.input(Matrix::column(&[1.5]));
            let s = clipped_surrogate(&mut g, ratio, adv, 0.3);
            g.scalar(s)
        };
        assert_eq!((f(2.0 + 1e-5) - f(2.0 - 1e-5)) / 2e-5, 0.0);
    }

    fn tiny_policy(mode: SkillMode, seed: u64) -> HierarchicalPolicy {
        let cfg = StudentConfig {
            obs_dim: 3,
            d_m: 4,
            heads: 2,
            d_skill: 2,
            skill_mode: mode,
            interval: 2,
            hidden: 5,
        };
        HierarchicalPolicy::new(cfg, &mut seeded(seed)).unwrap()
    }

    /// One state, several steps; action 2 pays 1.
    struct OneState {
        n: usize,
        t: usize,
        len: usize,
    }

    impl MultiAgentEnv for OneState {
        fn population(&self) -> usize {
            self.n
        }
        fn observations(&self) -> Vec<Vec<f64>> {
            (0..self.n).map(|j| vec![1.0, j as f64 * 0.1, self.t as f64 * 0.05]).collect()
        }
        fn step(&mut self, actions: &[usize]) -> Result<StepOutcome> {
            self.t += 1;
            let r = actions.iter().filter(|a| **a == 2).count() as f64 / self.n as f64;
            Ok(StepOutcome {
                observations: self.observations(),
                shared_reward: r,
                done: self.t >= self.len,
                coverage: 0.0,
            })
        }
        fn is_done(&self) -> bool {
            self.t >= self.len
        }
    }

    fn collect(policy: &HierarchicalPolicy, episodes: usize, seed: u64) -> (TrajectoryBatch, f64) {
        let mut rng = seeded(seed);
        let mut batches = Vec::new();
        let mut total = 0.0;
        for _ in 0..episodes {
            let mut env = OneState { n: 2, t: 0, len: 5 };
            let ep = hierarchical_rollout(&mut env, policy, 5, 0.99, &mut rng, false, None).unwrap();
            total += ep.total_reward;
            batches.push(ep.batch);
        }
        (TrajectoryBatch::merge(batches).unwrap(), total / episodes as f64)
    }

    #[test]
    fn unchanged_policy_has_unit_ratio() {
        for mode in [SkillMode::Discrete, SkillMode::Continuous] {
            let policy = tiny_policy(mode, 1);
            let (batch, _) = collect(&policy, 3, 2);
            let cfg = TrainConfig::default();
            for (level, lb) in [(Level::Low, &batch.low), (Level::High, &batch.high)] {
                let (ret, mut adv) = compute_returns_and_advantages(&lb.rewards, &lb.values, &lb.next, 0.99, 1.0);
                normalize_advantages(&mut adv);
                let rows: Vec<usize> = (0..lb.len()).collect();
                let mut g = Graph::new();
                let (_, terms) = build_loss(&mut g, &policy, level, lb, &rows, &lb.groups, &adv, &ret, &cfg);
                let mean_adv = adv.iter().sum::<f64>() / adv.len() as f64;
                assert!((terms.surrogate + mean_adv).abs() < 1e-9, "{mode:?} {level}");
                assert!(terms.kl.abs() < 1e-12, "{mode:?} {level}: kl {}", terms.kl);
                assert_eq!(terms.clip_fraction, 0.0);
            }
        }
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        for mode in [SkillMode::Discrete, SkillMode::Continuous] {
            let mut policy = tiny_policy(mode, 3);
            let (batch, _) = collect(&policy, 2, 4);
            // Move away from the collecting parameters so every term is live.
            for (i, id) in policy.params().ids().collect::<Vec<_>>().into_iter().enumerate() {
                for (k, v) in policy.params_mut().value_mut(id).as_mut_slice().iter_mut().enumerate() {
                    *v += 0.05 * ((i * 7 + k) as f64).sin();
                }
            }
            let cfg = TrainConfig {
                entropy_coefficient: 0.1,
                clip: 0.05,
                value_clip: 0.2,
                ..TrainConfig::default()
            };
            for (level, lb) in [(Level::Low, &batch.low), (Level::High, &batch.high)] {
                let (ret, mut adv) = compute_returns_and_advantages(&lb.rewards, &lb.values, &lb.next, 0.99, 1.0);
                normalize_advantages(&mut adv);
                let rows: Vec<usize> = (0..lb.len()).collect();
                let loss_at = |p: &HierarchicalPolicy| {
                    let mut g = Graph::new();
                    let (l, _) = build_loss(&mut g, p, level, lb, &rows, &lb.groups, &adv, &ret, &cfg);
                    g.scalar(l)
                };
                let mut work = policy.clone();
                work.params_mut().zero_grads();
                let mut g = Graph::new();
                let (l, _) = build_loss(&mut g, &work, level, lb, &rows, &lb.groups, &adv, &ret, &cfg);
                g.backward(l, work.params_mut()).unwrap();
                let mut worst: f64 = 0.0;
                for id in work.params().ids().collect::<Vec<_>>() {
                    let analytic = work.params().grad(id).clone();
                    for k in 0..analytic.len() {
                        let h = 1e-5;
                        let mut p = policy.clone();
                        p.params_mut().value_mut(id).as_mut_slice()[k] += h;
                        let up = loss_at(&p);
                        p.params_mut().value_mut(id).as_mut_slice()[k] -= 2.0 * h;
                        let down = loss_at(&p);
                        let num = (up - down) / (2.0 * h);
                        let a = analytic.as_slice()[k];
                        let rel = (a - num).abs() / a.abs().max(num.abs()).max(1e-4);
                        worst = worst.max(rel);
                    }
                }
                assert!(worst < 1e-4, "{mode:?} {level}: {worst}");
            }
        }
    }

    #[test]
    fn second_update_on_same_batch_is_rejected() {
        let mut policy = tiny_policy(SkillMode::Discrete, 5);
        let (batch, _) = collect(&policy, 2, 6);
        let mut trainer = Trainer::new(TrainConfig::default(), 7).unwrap();
        let m = trainer.update(&mut policy, &batch).unwrap();
        assert_eq!(m.len(), 2);
        assert!(matches!(trainer.update(&mut policy, &batch), Err(Error::InvalidState(_))));
    }

    #[test]
    fn one_state_task_improves() {
        let mut policy = tiny_policy(SkillMode::Discrete, 8);
        let cfg = TrainConfig {
            learning_rate: 0.05,
            ..TrainConfig::default()
        };
        let mut trainer = Trainer::new(cfg, 9).unwrap();
        let mut means = Vec::new();
        for u in 0..20 {
            let (batch, mean) = collect(&policy, 8, 100 + u);
            means.push(mean);
            trainer.update(&mut policy, &batch).unwrap();
        }
        let (_, last) = collect(&policy, 64, 999);
        let (first, _) = (means[0], ());
        assert!(last > first + 1.0, "first {first}, last {last}");
    }

    #[test]
    fn minibatch_sizes() {
        let c = TrainConfig::default();
        assert_eq!(c.minibatch_size(1000), 250);
        assert_eq!(c.minibatch_size(100), 32);
        assert_eq!(c.minibatch_size(10), 10);
    }

    #[test]
    fn high_minibatches_keep_groups_whole() {
        let policy = tiny_policy(SkillMode::Discrete, 10);
        let (batch, _) = collect(&policy, 20, 11);
        let mb = minibatches(Level::High, &batch.high, 16, &mut seeded(1));
        let mut seen = 0;
        for (rows, groups) in &mb {
            let total: usize = groups.iter().map(|g| g.1).sum();
            assert_eq!(total, rows.len());
            for &(s, l) in groups {
                let first = rows[s];
                assert!(batch.high.groups.contains(&(first, l)));
            }
            seen += rows.len();
        }
        assert_eq!(seen, batch.high.len());
    }
}
