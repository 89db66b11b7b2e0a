//! The curriculum teacher: clusters policy contexts, keeps one Exp3 instance
//! per cluster and samples training tasks from the active one.
//!
//! Calls must follow `observe_context -> sample_task -> report_return`
//! cyclically; anything else is a [`Error::ProtocolOrder`].

use std::collections::{BTreeMap, VecDeque};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bandit::{default_alpha, ArmDistribution, Exp3Instance, UpdateRule};
use crate::clustering::{CfTree, CfTreeConfig, RunningStandardizer};
use crate::env::EnvFamily;
use crate::error::{Error, Result};

/// One arm of the teacher: an environment family at a population size.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub env_family: EnvFamily,
    pub population: usize,
    pub max_steps: usize,
    pub task_id: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherConfig {
    /// Mixing rate. `None` picks the classical tuning from `horizon`, or 0.1.
    pub alpha: Option<f64>,
    /// Expected number of teacher rounds, used only for the default alpha.
    pub horizon: Option<u64>,
    pub update_rule: UpdateRule,
    pub clustering: CfTreeConfig,
    pub buffer_capacity: usize,
    /// Standardize contexts by running mean and variance before clustering.
    pub normalize_contexts: bool,
    /// New clusters copy the weights of the nearest existing cluster.
    pub warm_start: bool,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig {
            alpha: None,
            horizon: None,
            update_rule: UpdateRule::PaperLiteral,
            clustering: CfTreeConfig::default(),
            buffer_capacity: 512,
            normalize_contexts: true,
            warm_start: false,
        }
    }
}

impl TeacherConfig {
    pub fn resolved_alpha(&self, arm_count: usize) -> f64 {
        self.alpha.unwrap_or_else(|| default_alpha(arm_count, self.horizon))
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(a) = self.alpha {
            if !(a > 0.0 && a <= 1.0) {
                return Err(Error::Config(format!("teacher.alpha must be in (0,1], got {a}")));
            }
        }
        if self.buffer_capacity == 0 {
            return Err(Error::Config("teacher.buffer_capacity must be positive".into()));
        }
        self.clustering.validate()
    }
}

/// Running min/max squash of raw returns into [0, 1].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReturnNormalizer {
    min: Option<f64>,
    max: Option<f64>,
}

impl ReturnNormalizer {
    /// Widens the running range to include `raw`, then squashes it.
    /// A zero-width range maps to 0.5.
    pub fn normalize(&mut self, raw: f64) -> f64 {
        let lo = self.min.map_or(raw, |m| m.min(raw));
        let hi = self.max.map_or(raw, |m| m.max(raw));
        self.min = Some(lo);
        self.max = Some(hi);
        if hi - lo <= f64::EPSILON * hi.abs().max(lo.abs()).max(1.0) {
            0.5
        } else {
            ((raw - lo) / (hi - lo)).clamp(0.0, 1.0)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
enum Phase {
    AwaitContext,
    AwaitSample,
    AwaitReturn,
}

impl Phase {
    fn expected(self) -> &'static str {
        match self {
            Phase::AwaitContext => "observe_context",
            Phase::AwaitSample => "sample_task",
            Phase::AwaitReturn => "report_return",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Pending {
    arm: usize,
    prob: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Teacher {
    config: TeacherConfig,
    tasks: Vec<TaskSpec>,
    alpha: f64,
    buffer: VecDeque<Vec<f64>>,
    standardizer: Option<RunningStandardizer>,
    tree: Option<CfTree>,
    instances: BTreeMap<usize, Exp3Instance>,
    normalizer: ReturnNormalizer,
    phase: Phase,
    active_cluster: Option<usize>,
    pending: Option<Pending>,
}

impl Teacher {
    pub fn new(tasks: Vec<TaskSpec>, config: TeacherConfig) -> Result<Self> {
        config.validate()?;
        if tasks.is_empty() {
            return Err(Error::Config("the task set must contain at least one task".into()));
        }
        for (i, t) in tasks.iter().enumerate() {
            if t.task_id != i || t.max_steps == 0 || t.population == 0 {
                return Err(Error::Config(format!("task {i} is malformed: {t:?}")));
            }
        }
        let alpha = config.resolved_alpha(tasks.len());
        Ok(Teacher {
            config,
            tasks,
            alpha,
            buffer: VecDeque::new(),
            standardizer: None,
            tree: None,
            instances: BTreeMap::new(),
            normalizer: ReturnNormalizer::default(),
            phase: Phase::AwaitContext,
            active_cluster: None,
            pending: None,
        })
    }

    pub fn tasks(&self) -> &[TaskSpec] {
        &self.tasks
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn config(&self) -> &TeacherConfig {
        &self.config
    }

    pub fn active_cluster(&self) -> Option<usize> {
        self.active_cluster
    }

    pub fn buffer(&self) -> impl Iterator<Item = &[f64]> {
        self.buffer.iter().map(|v| v.as_slice())
    }

    pub fn instances(&self) -> &BTreeMap<usize, Exp3Instance> {
        &self.instances
    }

    pub fn tree(&self) -> Option<&CfTree> {
        self.tree.as_ref()
    }

    fn expect(&self, phase: Phase, operation: &'static str) -> Result<()> {
        if self.phase == phase {
            Ok(())
        } else {
            Err(Error::ProtocolOrder {
                operation,
                expected: self.phase.expected(),
            })
        }
    }

    /// Buffers and clusters a context; returns the active cluster id.
    pub fn observe_context(&mut self, x: &[f64]) -> Result<usize> {
        self.expect(Phase::AwaitContext, "observe_context")?;
        if x.is_empty() || x.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("context must be non-empty and finite"));
        }
        if let Some(tree) = &self.tree {
            if tree.dim() != x.len() {
                return Err(Error::contract(format!(
                    "context width {} differs from the established width {}",
                    x.len(),
                    tree.dim()
                )));
            }
        } else {
            self.tree = Some(CfTree::new(x.len(), self.config.clustering)?);
            if self.config.normalize_contexts {
                self.standardizer = Some(RunningStandardizer::new(x.len()));
            }
        }
        if self.buffer.len() == self.config.buffer_capacity {
            self.buffer.pop_front();
        }
        self.buffer.push_back(x.to_vec());

        let z = match &mut self.standardizer {
            Some(s) => {
                s.update(x);
                s.standardize(x)
            }
            None => x.to_vec(),
        };
        let tree = self.tree.as_mut().expect("tree initialised above");
        let assignment = tree.insert(&z)?;
        self.sync_instances()?;
        self.active_cluster = Some(assignment.cluster_id);
        self.phase = Phase::AwaitSample;
        Ok(assignment.cluster_id)
    }

    /// Keeps exactly one Exp3 instance per published cluster id.
    fn sync_instances(&mut self) -> Result<()> {
        let tree = self.tree.as_ref().expect("tree exists once a context is seen");
        let centers = tree.centers();
        let published: Vec<usize> = centers.iter().map(|(id, _)| *id).collect();
        let old_centers = self.instances.keys().cloned().collect::<Vec<_>>();
        for (id, center) in &centers {
            if self.instances.contains_key(id) {
                continue;
            }
            let fresh = if self.config.warm_start && !old_centers.is_empty() {
                let donor = centers
                    .iter()
                    .filter(|(other, _)| *other != *id && self.instances.contains_key(other))
                    .min_by(|a, b| sq_dist(&a.1, center).total_cmp(&sq_dist(&b.1, center)))
                    .map(|(other, _)| *other);
                match donor {
                    Some(d) => self.instances[&d].clone(),
                    None => Exp3Instance::new(self.tasks.len(), self.alpha, self.config.update_rule)?,
                }
            } else {
                Exp3Instance::new(self.tasks.len(), self.alpha, self.config.update_rule)?
            };
            self.instances.insert(*id, fresh);
        }
        self.instances.retain(|id, _| published.contains(id));
        Ok(())
    }

    /// Distribution of the active cluster's instance, without sampling.
    pub fn distribution(&self) -> Result<ArmDistribution> {
        let id = self.active_cluster.ok_or(Error::ProtocolOrder {
            operation: "distribution",
            expected: "observe_context",
        })?;
        self.instances[&id].probabilities()
    }

    pub fn sample_task<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<(TaskSpec, ArmDistribution)> {
        self.expect(Phase::AwaitSample, "sample_task")?;
        let dist = self.distribution()?;
        let arm = dist.sample(rng);
        self.pending = Some(Pending {
            arm,
            prob: dist.probs()[arm],
        });
        self.phase = Phase::AwaitReturn;
        Ok((self.tasks[arm].clone(), dist))
    }

    /// Squashes the raw return and credits the sampled arm of the active instance.
    pub fn report_return(&mut self, raw_return: f64) -> Result<f64> {
        self.expect(Phase::AwaitReturn, "report_return")?;
        if !raw_return.is_finite() {
            return Err(Error::contract("raw return must be finite"));
        }
        let pending = self.pending.take().expect("pending set by sample_task");
        let reward = self.normalizer.normalize(raw_return);
        let id = self.active_cluster.expect("active cluster set by observe_context");
        self.instances
            .get_mut(&id)
            .expect("active cluster has an instance")
            .update(pending.arm, reward, pending.prob)?;
        self.phase = Phase::AwaitContext;
        Ok(reward)
    }

    /// Abandons a sampled round without crediting any arm.
    pub fn abort_round(&mut self) {
        self.pending = None;
        self.phase = Phase::AwaitContext;
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Final distribution and per-arm sample counts under each context mode.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoModeOutcome {
    pub last: [ArmDistribution; 2],
    pub counts: [Vec<u64>; 2],
}

/// Two alternating context modes, each rewarding only its own arm.
pub fn two_mode_experiment(
    arm_count: usize,
    rounds: usize,
    config: TeacherConfig,
    optimal: [usize; 2],
    seed: u64,
) -> Result<TwoModeOutcome> {
    use crate::rng::{seeded, stream};
    let tasks = (0..arm_count)
        .map(|i| TaskSpec {
            env_family: EnvFamily::SimpleSpread,
            population: 2,
            max_steps: 25,
            task_id: i,
        })
        .collect();
    let mut teacher = Teacher::new(tasks, config)?;
    let mut noise = seeded(seed);
    let mut sampler = stream(seed, 1);
    let modes = [[-2.0, 1.0, 0.5], [2.0, -1.0, -0.5]];
    let mut last = [ArmDistribution::uniform(arm_count), ArmDistribution::uniform(arm_count)];
    let mut counts = [vec![0u64; arm_count], vec![0u64; arm_count]];
    for round in 0..rounds {
        let m = round % 2;
        let x: Vec<f64> = modes[m].iter().map(|c| c + noise.gen_range(-0.05..0.05)).collect();
        teacher.observe_context(&x)?;
        let (task, dist) = teacher.sample_task(&mut sampler)?;
        let raw = if task.task_id == optimal[m] { 1.0 } else { 0.0 };
        teacher.report_return(raw)?;
        counts[m][task.task_id] += 1;
        last[m] = dist;
    }
    Ok(TwoModeOutcome { last, counts })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn tasks(k: usize) -> Vec<TaskSpec> {
        (0..k)
            .map(|i| TaskSpec {
                env_family: EnvFamily::SimpleSpread,
                population: [2, 4, 8, 16][i % 4],
                max_steps: 25,
                task_id: i,
            })
            .collect()
    }

    #[test]
    fn first_context_creates_uniform_cluster_zero() {
        let mut t = Teacher::new(tasks(4), TeacherConfig::default()).unwrap();
        assert_eq!(t.observe_context(&[0.3, -1.0]).unwrap(), 0);
        assert_eq!(t.instances().len(), 1);
        assert_eq!(t.distribution().unwrap().probs(), &[0.25; 4]);
        let (_, d) = t.sample_task(&mut seeded(0)).unwrap();
        assert_eq!(d.probs(), &[0.25; 4]);
    }

    #[test]
    fn protocol_order_is_enforced() {
        let mut t = Teacher::new(tasks(3), TeacherConfig::default()).unwrap();
        let mut rng = seeded(1);
        assert!(matches!(t.sample_task(&mut rng), Err(Error::ProtocolOrder { .. })));
        assert!(matches!(t.report_return(1.0), Err(Error::ProtocolOrder { .. })));
        t.observe_context(&[1.0]).unwrap();
        assert!(matches!(t.observe_context(&[1.0]), Err(Error::ProtocolOrder { .. })));
        assert!(matches!(t.report_return(1.0), Err(Error::ProtocolOrder { .. })));
        t.sample_task(&mut rng).unwrap();
        assert!(matches!(t.sample_task(&mut rng), Err(Error::ProtocolOrder { .. })));
        t.report_return(1.0).unwrap();
        t.observe_context(&[1.0]).unwrap();
    }

    #[test]
    fn normalizer_trace() {
        let mut n = ReturnNormalizer::default();
        let out: Vec<f64> = [0.0, 10.0, 5.0].iter().map(|r| n.normalize(*r)).collect();
        assert_eq!(out, vec![0.5, 1.0, 0.5]);
        assert_eq!(n.normalize(-2.0), 0.0);
        assert_eq!(n.normalize(10.0), 1.0);
        let mut c = ReturnNormalizer::default();
        for _ in 0..5 {
            assert_eq!(c.normalize(3.0), 0.5);
        }
    }

    #[test]
    fn distant_contexts_get_distinct_clusters_and_repeats_are_stable() {
        let mut t = Teacher::new(tasks(2), TeacherConfig::default()).unwrap();
        let mut rng = seeded(2);
        let mut ids = vec![];
        for x in [[0.0, 0.0], [10.0, 10.0], [0.0, 0.0], [10.0, 10.0], [10.0, 10.0]] {
            ids.push(t.observe_context(&x).unwrap());
            t.sample_task(&mut rng).unwrap();
            t.report_return(0.0).unwrap();
        }
        assert_ne!(ids[0], ids[1]);
        assert_eq!(ids[0], ids[2]);
        assert_eq!(ids[1], ids[3]);
        assert_eq!(ids[3], ids[4]);
        assert_eq!(t.instances().len(), t.tree().unwrap().centers().len());
    }

    #[test]
    fn rewarded_arm_gains_mass() {
        let cfg = TeacherConfig {
            alpha: Some(0.1),
            ..TeacherConfig::default()
        };
        let mut t = Teacher::new(tasks(4), cfg).unwrap();
        let mut rng = seeded(3);
        let mut prev = 0.25;
        let mut grew = 0;
        for _ in 0..500 {
            t.observe_context(&[1.0, 2.0]).unwrap();
            let (task, d) = t.sample_task(&mut rng).unwrap();
            assert!(d.probs()[2] >= prev - 1e-15);
            if d.probs()[2] > prev {
                grew += 1;
            }
            prev = d.probs()[2];
            t.report_return(if task.task_id == 2 { 1.0 } else { 0.0 }).unwrap();
        }
        assert!(grew > 0);
        assert!(t.distribution().unwrap().probs()[2] > 0.25);
    }

    #[test]
    fn alpha_one_is_uniform_forever() {
        let cfg = TeacherConfig {
            alpha: Some(1.0),
            ..TeacherConfig::default()
        };
        let mut t = Teacher::new(tasks(4), cfg).unwrap();
        let mut rng = seeded(4);
        for i in 0..200 {
            t.observe_context(&[i as f64 % 3.0]).unwrap();
            let (task, d) = t.sample_task(&mut rng).unwrap();
            assert!(d.probs().iter().all(|p| (p - 0.25).abs() < 1e-15));
            t.report_return(task.task_id as f64).unwrap();
        }
    }

    #[test]
    fn floor_holds_for_every_task() {
        let cfg = TeacherConfig {
            alpha: Some(0.2),
            ..TeacherConfig::default()
        };
        let mut t = Teacher::new(tasks(4), cfg).unwrap();
        let mut rng = seeded(5);
        for _ in 0..2000 {
            t.observe_context(&[0.0]).unwrap();
            let (task, d) = t.sample_task(&mut rng).unwrap();
            assert!(d.probs().iter().all(|p| *p >= 0.2 / 4.0 - 1e-12));
            t.report_return(if task.task_id == 0 { 1.0 } else { 0.0 }).unwrap();
        }
    }

    #[test]
    fn two_mode_contexts_learn_their_own_arms() {
        let cfg = TeacherConfig {
            alpha: Some(0.1),
            ..TeacherConfig::default()
        };
        let out = two_mode_experiment(4, 4000, cfg, [1, 3], 7).unwrap();
        let [d0, d1] = &out.last;
        assert_eq!(out.counts[0].iter().sum::<u64>(), 2000);
        assert!(d0.probs()[1] > 0.6, "{:?}", d0.probs());
        assert!(d1.probs()[3] > 0.6, "{:?}", d1.probs());
    }

    #[test]
    fn non_finite_context_rejected() {
        let mut t = Teacher::new(tasks(2), TeacherConfig::default()).unwrap();
        assert!(matches!(t.observe_context(&[f64::NAN]), Err(Error::Contract(_))));
        t.observe_context(&[1.0, 2.0]).unwrap();
        t.abort_round();
        assert!(matches!(t.observe_context(&[1.0]), Err(Error::Contract(_))));
    }

    #[test]
    fn buffer_is_bounded() {
        let cfg = TeacherConfig {
            buffer_capacity: 3,
            ..TeacherConfig::default()
        };
        let mut t = Teacher::new(tasks(2), cfg).unwrap();
        for i in 0..5 {
            t.observe_context(&[i as f64]).unwrap();
            t.abort_round();
        }
        let kept: Vec<f64> = t.buffer().map(|x| x[0]).collect();
        assert_eq!(kept, vec![2.0, 3.0, 4.0]);
    }

    #[test]
    fn round_trips_through_json() {
        let mut t = Teacher::new(tasks(3), TeacherConfig::default()).unwrap();
        let mut rng = seeded(9);
        for i in 0..20 {
            t.observe_context(&[i as f64, (i * i) as f64]).unwrap();
            t.sample_task(&mut rng).unwrap();
            t.report_return(i as f64).unwrap();
        }
        let json = serde_json::to_string(&t).unwrap();
        let back: Teacher = serde_json::from_str(&json).unwrap();
        assert_eq!(back.instances(), t.instances());
    }
}
