use rand::Rng as _;
use rayon::prelude::*;

use crate::env::{Env, EnvConfig, ACTION_COUNT};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded, Rng};
use crate::student::{hierarchical_rollout, HierarchicalPolicy};
use crate::teacher::TaskSpec;

/// Something that can play one evaluation episode.
pub trait EvalPolicy: Sync {
    /// Returns (discounted return, final coverage).
    fn play(&self, env: &mut Env, gamma: f64, rng: &mut Rng) -> Result<(f64, f64)>;
}

impl EvalPolicy for HierarchicalPolicy {
    fn play(&self, env: &mut Env, gamma: f64, rng: &mut Rng) -> Result<(f64, f64)> {
        let steps = env.spec().max_steps;
        let ep = hierarchical_rollout(env, self, steps, gamma, rng, true, None)?;
        Ok((ep.discounted_return, ep.final_coverage))
    }
}

/// A fixed rule mapping the world to one action per agent.
pub struct Scripted<F>(pub F);

impl<F: Fn(&Env) -> Vec<usize> + Sync> EvalPolicy for Scripted<F> {
    fn play(&self, env: &mut Env, gamma: f64, _rng: &mut Rng) -> Result<(f64, f64)> {
        play_with(env, gamma, |e, _| (self.0)(e), _rng)
    }
}

/// Uniformly random actions for every agent.
pub struct RandomPolicy;

impl EvalPolicy for RandomPolicy {
    fn play(&self, env: &mut Env, gamma: f64, rng: &mut Rng) -> Result<(f64, f64)> {
        play_with(
            env,
            gamma,
            |e, r| (0..e.population()).map(|_| r.gen_range(0..ACTION_COUNT)).collect(),
            rng,
        )
    }
}

fn play_with(
    env: &mut Env,
    gamma: f64,
    mut act: impl FnMut(&Env, &mut Rng) -> Vec<usize>,
    rng: &mut Rng,
) -> Result<(f64, f64)> {
    let (mut ret, mut discount) = (0.0, 1.0);
    let mut coverage = env.coverage();
    while !env.is_done() {
        let a = act(env, rng);
        let out = env.step(&a)?;
        ret += discount * out.shared_reward;
        discount *= gamma;
        coverage = out.coverage;
    }
    Ok((ret, coverage))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub mean_return: f64,
    pub mean_coverage: f64,
    pub returns: Vec<f64>,
    pub coverages: Vec<f64>,
}

/// Plays `episodes` episodes on fresh instances seeded from `seed`; greedy
/// for learned policies.
pub fn evaluate_target<P: EvalPolicy + ?Sized>(
    policy: &P,
    env_config: &EnvConfig,
    target: &TaskSpec,
    episodes: usize,
    gamma: f64,
    seed: u64,
) -> Result<EvalResult> {
    if episodes == 0 {
        return Err(Error::contract("evaluation needs at least one episode"));
    }
    let results: Vec<(f64, f64)> = (0..episodes as u64)
        .into_par_iter()
        .map(|e| {
            let s = derive_seed(seed, e);
            let mut env = Env::new(target, env_config, s)?;
            let mut rng = seeded(derive_seed(s, 1));
            policy.play(&mut env, gamma, &mut rng)
        })
        .collect::<Result<_>>()?;
    let n = episodes as f64;
    Ok(EvalResult {
        mean_return: results.iter().map(|r| r.0).sum::<f64>() / n,
        mean_coverage: results.iter().map(|r| r.1).sum::<f64>() / n,
        returns: results.iter().map(|r| r.0).collect(),
        coverages: results.iter().map(|r| r.1).collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub value: f64,
    /// Some task had p > 0 but q = 0; its term was added unweighted.
    pub support_violation: bool,
}

/// `sum_phi q(phi) * (p(phi)/q(phi)) * V(phi)`.
pub fn estimate_objective(q: &[f64], p: &[f64], values: &[f64]) -> Result<Objective> {
    if q.len() != p.len() || p.len() != values.len() || q.is_empty() {
        return Err(Error::contract("q, p and values must share a non-zero length"));
    }
    for d in [q, p] {
        let total: f64 = d.iter().sum();
        if d.iter().any(|x| !(*x >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::contract("q and p must be probability distributions"));
        }
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::contract("value estimates must be finite"));
    }
    let mut out = Objective {
        value: 0.0,
        support_violation: false,
    };
    for i in 0..q.len() {
        if p[i] == 0.0 {
            continue;
        }
        if q[i] == 0.0 {
            out.support_violation = true;
            out.value += p[i] * values[i];
        } else {
            out.value += q[i] * (p[i] / q[i]) * values[i];
        }
    }
    Ok(out)
}
