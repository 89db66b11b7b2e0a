//! Population-invariant hierarchical student.
//!
//! Each agent encodes its observation into a message; messages pass through
//! a self-attention channel whose weights do not depend on the number of
//! agents. A shared high-level policy picks a skill from the observation and
//! attended message every `interval` steps, and a shared low-level policy
//! picks environment actions conditioned on the held skill.

use rand::Rng;
use rand_distr_free::standard_normal;
use serde::{Deserialize, Serialize};

use crate::env::{MultiAgentEnv, ACTION_COUNT};
use crate::error::{Error, Result};
use crate::numerics::{rowwise_softmax, Graph, Matrix, ParamId, ParamStore, Var};
use crate::trainer::{LevelBatch, TrajectoryBatch};

const POLICY_HEAD_GAIN: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SkillMode {
    #[default]
    Discrete,
    Continuous,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudentConfig {
    pub obs_dim: usize,
    pub d_m: usize,
    pub heads: usize,
    pub d_skill: usize,
    pub skill_mode: SkillMode,
    pub interval: usize,
    pub hidden: usize,
}

impl Default for StudentConfig {
    fn default() -> Self {
        StudentConfig {
            obs_dim: 76,
            d_m: 32,
            heads: 1,
            d_skill: 4,
            skill_mode: SkillMode::Discrete,
            interval: 5,
            hidden: 64,
        }
    }
}

impl StudentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.obs_dim == 0 || self.d_m == 0 || self.d_skill == 0 || self.hidden == 0 {
            return Err(Error::Config("student widths must be positive".into()));
        }
        if self.heads == 0 || self.d_m % self.heads != 0 {
            return Err(Error::Config(format!(
                "student.heads ({}) must divide d_m ({})",
                self.heads, self.d_m
            )));
        }
        if self.interval == 0 {
            return Err(Error::Config("student.interval must be at least 1".into()));
        }
        Ok(())
    }
}

/// A high-level action: a one-hot option or a squashed embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillAction {
    pub mode: SkillMode,
    pub value: Vec<f64>,
}

impl SkillAction {
    pub fn one_hot(index: usize, width: usize) -> Self {
        let mut value = vec![0.0; width];
        value[index] = 1.0;
        SkillAction {
            mode: SkillMode::Discrete,
            value,
        }
    }

    /// Option index of a discrete skill.
    pub fn index(&self) -> Option<usize> {
        match self.mode {
            SkillMode::Discrete => self.value.iter().position(|v| *v == 1.0),
            SkillMode::Continuous => None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Ids {
    enc_w: ParamId,
    enc_b: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    high: Mlp,
    high_log_std: Option<ParamId>,
    low: Mlp,
}

/// Tanh trunk with a policy head and a scalar value head.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct Mlp {
    layers: Vec<(ParamId, ParamId)>,
    pi: (ParamId, ParamId),
    v: (ParamId, ParamId),
}

impl Mlp {
    fn build<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        depth: usize,
        out: usize,
        rng: &mut R,
    ) -> Mlp {
        let mut layers = Vec::new();
        let mut width = input;
        for l in 0..depth {
            let w = store.add_glorot(&format!("{prefix}.w{}", l + 1), width, hidden, 1.0, rng);
            let b = store.add_zeros(&format!("{prefix}.b{}", l + 1), 1, hidden);
            layers.push((w, b));
            width = hidden;
        }
        let pi = (
            store.add_glorot(&format!("{prefix}.w_pi"), hidden, out, POLICY_HEAD_GAIN, rng),
            store.add_zeros(&format!("{prefix}.b_pi"), 1, out),
        );
        let v = (
            store.add_glorot(&format!("{prefix}.w_v"), hidden, 1, 1.0, rng),
            store.add_zeros(&format!("{prefix}.b_v"), 1, 1),
        );
        Mlp { layers, pi, v }
    }

    fn lookup(store: &ParamStore, prefix: &str, depth: usize) -> Result<Mlp> {
        let get = |n: String| store.id(&n).ok_or_else(|| Error::Checkpoint(format!("missing parameter {n}")));
        let mut layers = Vec::new();
        for l in 0..depth {
            layers.push((get(format!("{prefix}.w{}", l + 1))?, get(format!("{prefix}.b{}", l + 1))?));
        }
        Ok(Mlp {
            layers,
            pi: (get(format!("{prefix}.w_pi"))?, get(format!("{prefix}.b_pi"))?),
            v: (get(format!("{prefix}.w_v"))?, get(format!("{prefix}.b_v"))?),
        })
    }

    fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> (Var, Var) {
        let mut h = x;
        for (w, b) in &self.layers {
            h = affine(g, store, h, *w, *b);
            h = g.tanh(h);
        }
        let pi = affine(g, store, h, self.pi.0, self.pi.1);
        let v = affine(g, store, h, self.v.0, self.v.1);
        (pi, v)
    }
}

fn affine(g: &mut Graph, store: &ParamStore, x: Var, w: ParamId, b: ParamId) -> Var {
    let wv = g.param(store, w);
    let bv = g.param(store, b);
    let xw = g.matmul(x, wv);
    g.add_row(xw, bv)
}

const HIGH_DEPTH: usize = 1;
const LOW_DEPTH: usize = 2;

/// Graph handles for a high-level forward pass.
pub struct HighForward {
    pub messages: Var,
    pub attended: Var,
    /// Logits (discrete) or Gaussian means (continuous), one row per agent.
    pub head: Var,
    pub value: Var,
}

pub struct HighDecision {
    pub skills: Vec<SkillAction>,
    /// Sampled option index, or 0 in continuous mode.
    pub indices: Vec<usize>,
    /// Pre-squash Gaussian samples in continuous mode.
    pub raw: Vec<Vec<f64>>,
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
    /// Logits or means that produced the choice.
    pub dist_params: Vec<Vec<f64>>,
    pub attended: Matrix,
}

pub struct LowDecision {
    pub actions: Vec<usize>,
    pub log_probs: Vec<f64>,
    pub values: Vec<f64>,
    pub logits: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct HierarchicalPolicy {
    config: StudentConfig,
    params: ParamStore,
    ids: Ids,
    version: u64,
}

impl HierarchicalPolicy {
    pub fn new<R: Rng + ?Sized>(config: StudentConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut s = ParamStore::new();
        let (o, d, h) = (config.obs_dim, config.d_m, config.hidden);
        let enc_w = s.add_glorot("comm.encoder.w", o, d, 1.0, rng);
        let enc_b = s.add_zeros("comm.encoder.b", 1, d);
        let wq = s.add_glorot("comm.WQ", d, d, 1.0, rng);
        let wk = s.add_glorot("comm.WK", d, d, 1.0, rng);
        let wv = s.add_glorot("comm.WV", d, d, 1.0, rng);
        let high = Mlp::build(&mut s, "high", o + d, h, HIGH_DEPTH, config.d_skill, rng);
        let high_log_std = match config.skill_mode {
            SkillMode::Continuous => Some(s.add("high.log_std", Matrix::filled(1, config.d_skill, -0.5))),
            SkillMode::Discrete => None,
        };
        let low = Mlp::build(&mut s, "low", o + config.d_skill, h, LOW_DEPTH, ACTION_COUNT, rng);
        Ok(HierarchicalPolicy {
            config,
            params: s,
            ids: Ids {
                enc_w,
                enc_b,
                wq,
                wk,
                wv,
                high,
                high_log_std,
                low,
            },
            version: 0,
        })
    }

    /// Rebuilds a policy around a loaded parameter store.
    pub fn from_params(config: StudentConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let mut fresh = HierarchicalPolicy::new(config.clone(), &mut crate::rng::seeded(0))?;
        fresh.params.load_from(&params).map_err(Error::Checkpoint)?;
        let get = |n: &str| {
            fresh
                .params
                .id(n)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {n}")))
        };
        let ids = Ids {
            enc_w: get("comm.encoder.w")?,
            enc_b: get("comm.encoder.b")?,
            wq: get("comm.WQ")?,
            wk: get("comm.WK")?,
            wv: get("comm.WV")?,
            high: Mlp::lookup(&fresh.params, "high", HIGH_DEPTH)?,
            high_log_std: match config.skill_mode {
                SkillMode::Continuous => Some(get("high.log_std")?),
                SkillMode::Discrete => None,
            },
            low: Mlp::lookup(&fresh.params, "low", LOW_DEPTH)?,
        };
        fresh.ids = ids;
        Ok(fresh)
    }

    pub fn config(&self) -> &StudentConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Incremented by every optimisation step; batches remember the version
    /// that produced them.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub(crate) fn bump_version(&mut self) {
        self.version += 1;
    }

    pub fn high_log_std_id(&self) -> Option<ParamId> {
        self.ids.high_log_std
    }

    fn check_obs(&self, obs: &Matrix) -> Result<()> {
        if obs.cols() != self.config.obs_dim {
            return Err(Error::contract(format!(
                "observation width {} differs from the configured {}",
                obs.cols(),
                self.config.obs_dim
            )));
        }
        Ok(())
    }

    pub fn encode_var(&self, g: &mut Graph, obs: Var) -> Var {
        let h = affine(g, &self.params, obs, self.ids.enc_w, self.ids.enc_b);
        g.tanh(h)
    }

    /// Multi-head attention over each row group of `messages`.
    pub fn channel_var(&self, g: &mut Graph, messages: Var, groups: &[(usize, usize)]) -> Var {
        let p = &self.params;
        let (wq, wk, wv) = (g.param(p, self.ids.wq), g.param(p, self.ids.wk), g.param(p, self.ids.wv));
        let q = g.matmul(messages, wq);
        let k = g.matmul(messages, wk);
        let v = g.matmul(messages, wv);
        let heads = self.config.heads;
        let dh = self.config.d_m / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        if heads == 1 {
            return g.grouped_attention(q, k, v, groups, scale);
        }
        let outs: Vec<Var> = (0..heads)
            .map(|h| {
                let qh = g.slice_cols(q, h * dh, dh);
                let kh = g.slice_cols(k, h * dh, dh);
                let vh = g.slice_cols(v, h * dh, dh);
                g.grouped_attention(qh, kh, vh, groups, scale)
            })
            .collect();
        g.concat_cols(&outs)
    }

    pub fn high_forward(&self, g: &mut Graph, obs: Var, groups: &[(usize, usize)]) -> HighForward {
        let messages = self.encode_var(g, obs);
        let attended = self.channel_var(g, messages, groups);
        let x = g.concat_cols(&[obs, attended]);
        let (head, value) = self.ids.high.forward(g, &self.params, x);
        HighForward {
            messages,
            attended,
            head,
            value,
        }
    }

    /// Returns (logits, value) for each row of `obs` and `skills`.
    pub fn low_forward(&self, g: &mut Graph, obs: Var, skills: Var) -> (Var, Var) {
        let x = g.concat_cols(&[obs, skills]);
        self.ids.low.forward(g, &self.params, x)
    }

    /// `m_j = f(o_j)` for each row.
    pub fn encode(&self, obs: &Matrix) -> Result<Matrix> {
        self.check_obs(obs)?;
        let mut g = Graph::new();
        let o = g.input(obs.clone());
        let m = self.encode_var(&mut g, o);
        Ok(g.value(m).clone())
    }

    /// Attention channel applied to one population's message matrix.
    pub fn channel(&self, messages: &Matrix) -> Result<Matrix> {
        if messages.cols() != self.config.d_m || messages.rows() == 0 {
            return Err(Error::contract("message matrix must be n x d_m with n >= 1"));
        }
        let mut g = Graph::new();
        let m = g.input(messages.clone());
        let out = self.channel_var(&mut g, m, &[(0, messages.rows())]);
        Ok(g.value(out).clone())
    }

    /// Encodes, attends and selects a skill for every agent of one population.
    pub fn high_step<R: Rng + ?Sized>(&self, obs: &Matrix, rng: &mut R, greedy: bool) -> Result<HighDecision> {
        self.check_obs(obs)?;
        let n = obs.rows();
        let mut g = Graph::new();
        let o = g.input(obs.clone());
        let f = self.high_forward(&mut g, o, &[(0, n)]);
        g.check_finite()?;
        let head = g.value(f.head);
        let values = g.value(f.value).as_slice().to_vec();
        let d = self.config.d_skill;
        let mut out = HighDecision {
            skills: Vec::with_capacity(n),
            indices: Vec::with_capacity(n),
            raw: Vec::new(),
            log_probs: Vec::with_capacity(n),
            values,
            dist_params: Vec::with_capacity(n),
            attended: g.value(f.attended).clone(),
        };
        match self.config.skill_mode {
            SkillMode::Discrete => {
                let probs = rowwise_softmax(head);
                for r in 0..n {
                    let idx = if greedy {
                        argmax(probs.row(r))
                    } else {
                        sample_categorical(probs.row(r), rng)
                    };
                    out.log_probs.push(crate::numerics::log_prob(head.row(r), idx));
                    out.skills.push(SkillAction::one_hot(idx, d));
                    out.indices.push(idx);
                    out.dist_params.push(head.row(r).to_vec());
                }
            }
            SkillMode::Continuous => {
                let log_std = self.params.value(self.ids.high_log_std.expect("continuous mode has log_std"));
                for r in 0..n {
                    let mean = head.row(r);
                    let u: Vec<f64> = mean
                        .iter()
                        .zip(log_std.as_slice())
                        .map(|(m, ls)| if greedy { *m } else { m + ls.exp() * standard_normal(rng) })
                        .collect();
                    out.log_probs.push(gaussian_log_prob(&u, mean, log_std.as_slice()));
                    out.skills.push(SkillAction {
                        mode: SkillMode::Continuous,
                        value: u.iter().map(|x| x.tanh()).collect(),
                    });
                    out.indices.push(0);
                    out.raw.push(u);
                    out.dist_params.push(mean.to_vec());
                }
            }
        }
        Ok(out)
    }

    pub fn low_step<R: Rng + ?Sized>(
        &self,
        obs: &Matrix,
        skills: &Matrix,
        rng: &mut R,
        greedy: bool,
    ) -> Result<LowDecision> {
        self.check_obs(obs)?;
        if skills.cols() != self.config.d_skill || skills.rows() != obs.rows() {
            return Err(Error::contract("skill matrix must be n x d_skill"));
        }
        let mut g = Graph::new();
        let o = g.input(obs.clone());
        let s = g.input(skills.clone());
        let (logits, value) = self.low_forward(&mut g, o, s);
        g.check_finite()?;
        let lg = g.value(logits);
        let probs = rowwise_softmax(lg);
        let mut out = LowDecision {
            actions: Vec::with_capacity(obs.rows()),
            log_probs: Vec::with_capacity(obs.rows()),
            values: g.value(value).as_slice().to_vec(),
            logits: Vec::with_capacity(obs.rows()),
        };
        for r in 0..obs.rows() {
            let a = if greedy {
                argmax(probs.row(r))
            } else {
                sample_categorical(probs.row(r), rng)
            };
            out.actions.push(a);
            out.log_probs.push(crate::numerics::log_prob(lg.row(r), a));
            out.logits.push(lg.row(r).to_vec());
        }
        Ok(out)
    }

    /// Action probabilities of the low-level policy, one row per input row.
    pub fn low_probabilities(&self, obs: &Matrix, skills: &Matrix) -> Result<Matrix> {
        let d = self.low_step(obs, skills, &mut crate::rng::seeded(0), true)?;
        Ok(rowwise_softmax(&Matrix::from_rows(&d.logits)))
    }
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}

/// Inverse-CDF draw; the first index whose cumulative mass exceeds the uniform.
pub fn sample_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if acc > u {
            return i;
        }
    }
    probs.len() - 1
}

pub fn gaussian_log_prob(x: &[f64], mean: &[f64], log_std: &[f64]) -> f64 {
    let half_log_two_pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    x.iter()
        .zip(mean)
        .zip(log_std)
        .map(|((x, m), ls)| {
            let z = (x - m) / ls.exp();
            -0.5 * z * z - ls - half_log_two_pi
        })
        .sum()
}

mod rand_distr_free {
    use rand::Rng;

    /// Box-Muller standard normal draw.
    pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
        let u1: f64 = 1.0 - rng.gen::<f64>();
        let u2: f64 = rng.gen();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }
}

/// One executed episode and the data it produced.
#[derive(Debug, Clone)]
pub struct Episode {
    pub batch: TrajectoryBatch,
    pub total_reward: f64,
    pub discounted_return: f64,
    pub final_coverage: f64,
    pub steps: usize,
    /// Shared reward of each step, in order.
    pub step_rewards: Vec<f64>,
}

impl Episode {
    /// Per-agent (observation sequence, action sequence) pairs from the low level.
    pub fn agent_sequences(&self) -> Vec<(Vec<Vec<f64>>, Vec<usize>)> {
        self.batch.low.sequences()
    }
}

/// Optional per-step observer, e.g. for trajectory dumps.
pub type StepHook<'a> = &'a mut dyn FnMut(usize, &[usize], f64, f64);

/// Runs one episode: a high-level decision every `interval` steps (or at
/// step 0), a low-level action every step. Each high-level transition is
/// credited with the sum of the shared rewards over its interval.
pub fn hierarchical_rollout<E: MultiAgentEnv, R: Rng + ?Sized>(
    env: &mut E,
    policy: &HierarchicalPolicy,
    max_steps: usize,
    gamma: f64,
    rng: &mut R,
    greedy: bool,
    mut hook: Option<StepHook<'_>>,
) -> Result<Episode> {
    let n = env.population();
    let interval = policy.config.interval;
    let d_skill = policy.config.d_skill;
    let mut low = LevelBatch::default();
    let mut high = LevelBatch::default();
    let mut obs = env.observations();
    let mut skills = Matrix::zeros(n, d_skill);
    let mut high_rows: Vec<usize> = Vec::new();
    let mut prev_low: Option<usize> = None;
    let mut prev_high: Option<usize> = None;
    let mut step_rewards = Vec::new();
    let (mut total, mut discounted, mut discount, mut coverage) = (0.0, 0.0, 1.0, 0.0);
    let mut t = 0;
    while t < max_steps && !env.is_done() {
        let obs_m = Matrix::from_rows(&obs);
        if t % interval == 0 {
            let dec = policy.high_step(&obs_m, rng, greedy)?;
            let start = high.len();
            for j in 0..n {
                high.obs.push(obs[j].clone());
                high.actions.push(dec.indices[j]);
                if let Some(raw) = dec.raw.get(j) {
                    high.continuous.push(raw.clone());
                }
                high.rewards.push(0.0);
                high.values.push(dec.values[j]);
                high.log_probs.push(dec.log_probs[j]);
                high.dist_params.push(dec.dist_params[j].clone());
                high.next.push(None);
                high.agent.push(j);
                skills.row_mut(j).copy_from_slice(&dec.skills[j].value);
            }
            high.groups.push((start, n));
            if let Some(p) = prev_high {
                for j in 0..n {
                    high.next[p + j] = Some(start + j);
                }
            }
            prev_high = Some(start);
            high_rows = (start..start + n).collect();
        }
        let dec = policy.low_step(&obs_m, &skills, rng, greedy)?;
        let start = low.len();
        for j in 0..n {
            low.obs.push(obs[j].clone());
            low.aux.push(skills.row(j).to_vec());
            low.actions.push(dec.actions[j]);
            low.values.push(dec.values[j]);
            low.log_probs.push(dec.log_probs[j]);
            low.dist_params.push(dec.logits[j].clone());
            low.next.push(None);
            low.agent.push(j);
        }
        if let Some(p) = prev_low {
            for j in 0..n {
                low.next[p + j] = Some(start + j);
            }
        }
        prev_low = Some(start);
        let out = env.step(&dec.actions).map_err(|e| Error::Env {
            step: t,
            source: Box::new(e),
        })?;
        let r = out.shared_reward;
        for _ in 0..n {
            low.rewards.push(r);
        }
        for &row in &high_rows {
            high.rewards[row] += r;
        }
        if let Some(h) = hook.as_mut() {
            h(t, &dec.actions, r, out.coverage);
        }
        step_rewards.push(r);
        total += r;
        discounted += discount * r;
        discount *= gamma;
        coverage = out.coverage;
        obs = out.observations;
        t += 1;
    }
    high.old_log_std = policy
        .ids
        .high_log_std
        .map(|id| policy.params.value(id).as_slice().to_vec());
    Ok(Episode {
        batch: TrajectoryBatch {
            low,
            high,
            policy_version: policy.version,
        },
        total_reward: total,
        discounted_return: discounted,
        final_coverage: coverage,
        steps: t,
        step_rewards,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::StepOutcome;
    use crate::rng::seeded;

    fn small_config() -> StudentConfig {
        StudentConfig {
            obs_dim: 6,
            d_m: 4,
            heads: 1,
            d_skill: 3,
            skill_mode: SkillMode::Discrete,
            interval: 5,
            hidden: 8,
        }
    }

    fn random_matrix(rng: &mut impl Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    /// Emits a fixed reward sequence and stops after it runs out.
    struct Scripted {
        n: usize,
        rewards: Vec<f64>,
        t: usize,
        width: usize,
    }

    impl MultiAgentEnv for Scripted {
        fn population(&self) -> usize {
            self.n
        }
        fn observations(&self) -> Vec<Vec<f64>> {
            (0..self.n).map(|j| vec![self.t as f64 * 0.1 + j as f64; self.width]).collect()
        }
        fn step(&mut self, _actions: &[usize]) -> Result<StepOutcome> {
            let r = self.rewards[self.t];
            self.t += 1;
            Ok(StepOutcome {
                observations: self.observations(),
                shared_reward: r,
                done: self.is_done(),
                coverage: 0.0,
            })
        }
        fn is_done(&self) -> bool {
            self.t >= self.rewards.len()
        }
    }

    #[test]
    fn zero_encoder_gives_zero_messages() {
        let mut p = HierarchicalPolicy::new(small_config(), &mut seeded(0)).unwrap();
        let ids = [p.ids.enc_w, p.ids.enc_b];
        for id in ids {
            p.params_mut().value_mut(id).fill(0.0);
        }
        let m = p.encode(&random_matrix(&mut seeded(1), 3, 6)).unwrap();
        assert!(m.as_slice().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn identical_observations_identical_messages() {
        let p = HierarchicalPolicy::new(small_config(), &mut seeded(0)).unwrap();
        let row = random_matrix(&mut seeded(2), 1, 6);
        let m = p.encode(&Matrix::vcat(&[&row, &row])).unwrap();
        assert_eq!(m.row(0), m.row(1));
        assert!(p.encode(&Matrix::zeros(1, 5)).is_err());
    }

    #[test]
    fn singleton_channel_is_value_projection() {
        let p = HierarchicalPolicy::new(small_config(), &mut seeded(3)).unwrap();
        let m = random_matrix(&mut seeded(4), 1, 4);
        let out = p.channel(&m).unwrap();
        let expected = m.matmul(p.params().value(p.ids.wv));
        assert!(out.max_abs_diff(&expected) < 1e-15);
    }

    #[test]
    fn zero_queries_average_values() {
        let mut p = HierarchicalPolicy::new(small_config(), &mut seeded(5)).unwrap();
        let (wq, wk, wv) = (p.ids.wq, p.ids.wk, p.ids.wv);
        p.params_mut().value_mut(wq).fill(0.0);
        p.params_mut().value_mut(wk).fill(0.0);
        let m = random_matrix(&mut seeded(6), 5, 4);
        let out = p.channel(&m).unwrap();
        let v = m.matmul(p.params().value(wv));
        for c in 0..4 {
            let mean = (0..5).map(|r| v.get(r, c)).sum::<f64>() / 5.0;
            for r in 0..5 {
                assert!((out.get(r, c) - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn multi_head_channel_is_equivariant() {
        let cfg = StudentConfig {
            heads: 2,
            ..small_config()
        };
        let p = HierarchicalPolicy::new(cfg, &mut seeded(7)).unwrap();
        let mut rng = seeded(8);
        for n in [2, 4, 8] {
            let m = random_matrix(&mut rng, n, 4);
            let perm: Vec<usize> = (0..n).rev().collect();
            let a = p.channel(&m.select_rows(&perm)).unwrap();
            let b = p.channel(&m).unwrap().select_rows(&perm);
            assert!(a.max_abs_diff(&b) < 1e-12);
        }
    }

    #[test]
    fn equal_logits_give_uniform_options_and_consistent_log_probs() {
        let mut p = HierarchicalPolicy::new(small_config(), &mut seeded(9)).unwrap();
        let (w, b) = p.ids.high.pi;
        p.params_mut().value_mut(w).fill(0.0);
        p.params_mut().value_mut(b).fill(0.0);
        let obs = random_matrix(&mut seeded(10), 2, 6);
        let d = p.high_step(&obs, &mut seeded(11), false).unwrap();
        for lp in &d.log_probs {
            assert!((lp - (1.0f64 / 3.0).ln()).abs() < 1e-12);
        }
        let fresh = HierarchicalPolicy::new(small_config(), &mut seeded(12)).unwrap();
        let d1 = fresh.high_step(&obs, &mut seeded(13), false).unwrap();
        let d2 = fresh.high_step(&obs, &mut seeded(13), false).unwrap();
        assert_eq!(d1.indices, d2.indices);
        for (r, idx) in d1.indices.iter().enumerate() {
            let probs = rowwise_softmax(&Matrix::row_vector(&d1.dist_params[r]));
            assert!((d1.log_probs[r] - probs.get(0, *idx).ln()).abs() < 1e-9);
        }
    }

    #[test]
    fn low_policy_shared_and_skill_conditioned() {
        let p = HierarchicalPolicy::new(small_config(), &mut seeded(14)).unwrap();
        let row = random_matrix(&mut seeded(15), 1, 6);
        let obs = Matrix::vcat(&[&row, &row]);
        let same = Matrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![1.0, 0.0, 0.0]]);
        let probs = p.low_probabilities(&obs, &same).unwrap();
        assert_eq!(probs.row(0), probs.row(1));
        let diff = Matrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]);
        let probs = p.low_probabilities(&obs, &diff).unwrap();
        assert_ne!(probs.row(0), probs.row(1));
    }

    #[test]
    fn continuous_skills_are_squashed() {
        let cfg = StudentConfig {
            skill_mode: SkillMode::Continuous,
            ..small_config()
        };
        let p = HierarchicalPolicy::new(cfg, &mut seeded(16)).unwrap();
        let obs = random_matrix(&mut seeded(17), 3, 6);
        let d = p.high_step(&obs, &mut seeded(18), false).unwrap();
        for (s, raw) in d.skills.iter().zip(&d.raw) {
            assert!(s.value.iter().all(|v| v.abs() < 1.0));
            assert_eq!(s.value, raw.iter().map(|x| x.tanh()).collect::<Vec<_>>());
        }
        assert!(d.log_probs.iter().all(|lp| lp.is_finite()));
    }

    #[test]
    fn interval_five_sums_scripted_rewards() {
        let p = HierarchicalPolicy::new(small_config(), &mut seeded(19)).unwrap();
        let rewards = vec![0.0, 0.0, 1.0, 0.0, 2.0, 4.0, 0.0, 0.5, 0.0, 0.0, 1.0, 1.0];
        let mut env = Scripted {
            n: 2,
            rewards: rewards.clone(),
            t: 0,
            width: 6,
        };
        let ep = hierarchical_rollout(&mut env, &p, 100, 0.99, &mut seeded(20), false, None).unwrap();
        assert_eq!(ep.steps, 12);
        let h = &ep.batch.high;
        assert_eq!(h.len(), 2 * 3);
        assert_eq!(h.rewards[0], 3.0);
        assert_eq!(h.rewards[1], 3.0);
        assert_eq!(h.rewards[2], 4.5);
        assert_eq!(h.rewards[4], 2.0);
        assert_eq!(h.groups, vec![(0, 2), (2, 2), (4, 2)]);
        assert_eq!(h.next[0], Some(2));
        assert_eq!(h.next[4], None);
        let low_sum: f64 = ep.batch.low.rewards.iter().sum();
        let high_sum: f64 = h.rewards.iter().sum();
        assert_eq!(low_sum, high_sum);
    }

    #[test]
    fn interval_one_matches_low_level() {
        let cfg = StudentConfig {
            interval: 1,
            ..small_config()
        };
        let p = HierarchicalPolicy::new(cfg, &mut seeded(21)).unwrap();
        let mut env = Scripted {
            n: 3,
            rewards: vec![1.0, -0.5, 0.0, 5.0],
            t: 0,
            width: 6,
        };
        let ep = hierarchical_rollout(&mut env, &p, 25, 0.9, &mut seeded(22), false, None).unwrap();
        assert_eq!(ep.batch.high.rewards, ep.batch.low.rewards);
        assert!((ep.discounted_return - (1.0 - 0.45 + 5.0 * 0.729)).abs() < 1e-12);
    }

    #[test]
    fn high_transition_count_is_ceiling() {
        let p = HierarchicalPolicy::new(small_config(), &mut seeded(23)).unwrap();
        for len in 1..=13 {
            let mut env = Scripted {
                n: 1,
                rewards: vec![0.0; len],
                t: 0,
                width: 6,
            };
            let ep = hierarchical_rollout(&mut env, &p, 100, 0.99, &mut seeded(24), false, None).unwrap();
            assert_eq!(ep.batch.high.len(), len.div_ceil(5));
            assert_eq!(ep.batch.low.len(), len);
        }
    }

    #[test]
    fn parameters_reload_into_a_fresh_policy() {
        let p = HierarchicalPolicy::new(small_config(), &mut seeded(25)).unwrap();
        let q = HierarchicalPolicy::from_params(small_config(), p.params().clone()).unwrap();
        assert_eq!(p.params(), q.params());
        let obs = random_matrix(&mut seeded(26), 4, 6);
        let a = p.high_step(&obs, &mut seeded(1), false).unwrap();
        let b = q.high_step(&obs, &mut seeded(1), false).unwrap();
        assert_eq!(a.log_probs, b.log_probs);
    }
}
