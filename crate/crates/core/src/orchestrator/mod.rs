//! The teacher-student round loop, its logs and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod eval;

use std::collections::VecDeque;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

pub use config::{ExperimentConfig, ImitationConfig, RunConfig, TaskSpace, TeacherBlock};
pub use eval::{estimate_objective, evaluate_target, EvalPolicy, EvalResult, Objective, RandomPolicy, Scripted};

use crate::env::Env;
use crate::error::{Error, Result};
use crate::imitation::{ContextVector, ImitationModel, Sequence};
use crate::rng::{derive_seed, seeded, stream, Rng};
use crate::student::{hierarchical_rollout, Episode, HierarchicalPolicy};
use crate::teacher::{TaskSpec, Teacher};
use crate::trainer::{Trainer, TrajectoryBatch, UpdateMetrics};

/// One completed teacher round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundRecord {
    pub round: usize,
    pub cluster_id: usize,
    pub task_id: usize,
    pub distribution: Vec<f64>,
    /// Value handed to the teacher: the target-task mean discounted return.
    pub raw_return: f64,
    pub norm_reward: f64,
    pub target_return: f64,
    pub target_coverage: f64,
    pub j_hat: f64,
    pub support_violation: bool,
    pub context: Vec<f64>,
    pub updates: Vec<UpdateMetrics>,
    /// Mean undiscounted reward of this round's training episodes.
    pub train_return: f64,
    pub env_steps: u64,
    /// Steps of the first training episode, when dumping is on.
    pub dump: Vec<DumpStep>,
}

/// One line of the trajectory dump.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DumpStep {
    pub round: usize,
    pub task_id: usize,
    pub step: usize,
    pub actions: Vec<usize>,
    pub reward: f64,
    pub coverage: f64,
}

/// All mutable state of a run.
pub struct Experiment {
    config: ExperimentConfig,
    policy: HierarchicalPolicy,
    trainer: Trainer,
    teacher: Teacher,
    imitation: ImitationModel,
    recent: VecDeque<Sequence>,
    teacher_rng: Rng,
    round: usize,
    env_steps: u64,
    value_estimates: Vec<f64>,
    target: TaskSpec,
    pool: rayon::ThreadPool,
}

fn abort(round: usize, stage: &'static str) -> impl FnOnce(Error) -> Error {
    move |e| Error::RoundAborted {
        round,
        stage,
        source: Box::new(e),
    }
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let seed = config.run.seed;
        let policy = HierarchicalPolicy::new(config.student.clone(), &mut stream(seed, 1))?;
        let imitation = ImitationModel::new(config.student.obs_dim, config.imitation.hidden, &mut stream(seed, 2))?;
        let tasks = config.training_tasks();
        let teacher = Teacher::new(tasks.clone(), config.teacher.teacher_config())?;
        let trainer = Trainer::new(config.trainer.clone(), derive_seed(seed, 4))?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(config.run.workers)
            .build()
            .map_err(|e| Error::Config(format!("cannot start rollout workers: {e}")))?;
        Ok(Experiment {
            target: config.target_task(),
            value_estimates: vec![0.0; tasks.len()],
            teacher_rng: stream(seed, 3),
            config,
            policy,
            trainer,
            teacher,
            imitation,
            recent: VecDeque::new(),
            round: 0,
            env_steps: 0,
            pool,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn policy(&self) -> &HierarchicalPolicy {
        &self.policy
    }

    pub fn teacher(&self) -> &Teacher {
        &self.teacher
    }

    pub fn imitation(&self) -> &ImitationModel {
        &self.imitation
    }

    pub fn rounds_completed(&self) -> usize {
        self.round
    }

    pub fn env_steps(&self) -> u64 {
        self.env_steps
    }

    pub fn target(&self) -> &TaskSpec {
        &self.target
    }

    /// Seed of the fixed evaluation layouts used every round.
    pub fn eval_seed(&self) -> u64 {
        derive_seed(self.config.run.seed, 5)
    }

    /// Stochastic episodes of the current policy on `task`, in parallel.
    fn rollouts(&self, task: &TaskSpec, count: usize, base: u64, dump: bool) -> Result<Vec<(Episode, Vec<DumpStep>)>> {
        let cfg = &self.config;
        let policy = &self.policy;
        let round = self.round;
        self.pool.install(|| {
            (0..count as u64)
                .into_par_iter()
                .map(|e| {
                    let mut env = Env::new(task, &cfg.env, derive_seed(base, e))?;
                    let mut rng = seeded(derive_seed(base, 1_000_000 + e));
                    let mut steps = Vec::new();
                    let mut hook = |step: usize, actions: &[usize], reward: f64, coverage: f64| {
                        steps.push(DumpStep {
                            round,
                            task_id: task.task_id,
                            step,
                            actions: actions.to_vec(),
                            reward,
                            coverage,
                        })
                    };
                    let hook_ref: Option<crate::student::StepHook<'_>> =
                        if dump && e == 0 { Some(&mut hook) } else { None };
                    let ep = hierarchical_rollout(
                        &mut env,
                        policy,
                        task.max_steps,
                        cfg.trainer.gamma,
                        &mut rng,
                        false,
                        hook_ref,
                    )?;
                    Ok((ep, steps))
                })
                .collect()
        })
    }

    fn remember(&mut self, episodes: &[(Episode, Vec<DumpStep>)]) {
        for (ep, _) in episodes {
            self.env_steps += ep.steps as u64;
            self.recent.extend(ep.agent_sequences());
        }
        let window = self.config.imitation.window_transitions;
        let mut total: usize = self.recent.iter().map(|s| s.1.len()).sum();
        while total > window && self.recent.len() > 1 {
            total -= self.recent.pop_front().expect("non-empty").1.len();
        }
    }

    /// Refreshes the imitation model on recent behaviour and summarises it.
    fn context(&mut self, round_base: u64) -> Result<ContextVector> {
        if self.recent.is_empty() {
            let target = self.target.clone();
            let eps = self.rollouts(&target, self.config.teacher.episodes_per_round, derive_seed(round_base, 2), false)?;
            self.remember(&eps);
        }
        let data: Vec<Sequence> = self.recent.iter().cloned().collect();
        let im = &self.config.imitation;
        if im.epochs > 0 {
            self.imitation
                .train(&data, im.epochs, im.learning_rate, derive_seed(round_base, 3))?;
        }
        let take = im.context_trajectories.min(data.len());
        let obs: Vec<Vec<Vec<f64>>> = data[data.len() - take..].iter().map(|s| s.0.clone()).collect();
        self.imitation.extract_context(&obs)
    }

    /// Runs one teacher round end to end.
    pub fn spc_round(&mut self) -> Result<RoundRecord> {
        let round = self.round;
        let base = derive_seed(self.config.run.seed, 1_000 + round as u64);

        let context = self.context(base).map_err(abort(round, "context"))?;
        let cluster_id = self
            .teacher
            .observe_context(context.values())
            .map_err(abort(round, "observe_context"))?;
        let (task, dist) = self
            .teacher
            .sample_task(&mut self.teacher_rng)
            .map_err(abort(round, "sample_task"))?;

        let result = self.train_and_evaluate(&task, base);
        let (episodes, updates, eval) = match result {
            Ok(v) => v,
            Err((stage, e)) => {
                self.teacher.abort_round();
                return Err(abort(round, stage)(e));
            }
        };
        let norm_reward = self
            .teacher
            .report_return(eval.mean_return)
            .map_err(abort(round, "report_return"))?;

        let n_eps = episodes.len() as f64;
        let train_return = episodes.iter().map(|(e, _)| e.total_reward).sum::<f64>() / n_eps;
        self.value_estimates[task.task_id] = episodes.iter().map(|(e, _)| e.discounted_return).sum::<f64>() / n_eps;

        let q = dist.probs().to_vec();
        let objective = if self.target.task_id < q.len() {
            let mut p = vec![0.0; q.len()];
            p[self.target.task_id] = 1.0;
            let mut v = self.value_estimates.clone();
            v[self.target.task_id] = eval.mean_return;
            estimate_objective(&q, &p, &v).map_err(abort(round, "objective"))?
        } else {
            // The target lies beyond the arms, so only its own estimate counts.
            Objective {
                value: eval.mean_return,
                support_violation: false,
            }
        };

        let dump = episodes.iter().flat_map(|(_, d)| d.iter().cloned()).collect();
        self.remember(&episodes);
        self.round += 1;
        Ok(RoundRecord {
            round,
            cluster_id,
            task_id: task.task_id,
            distribution: q,
            raw_return: eval.mean_return,
            norm_reward,
            target_return: eval.mean_return,
            target_coverage: eval.mean_coverage,
            j_hat: objective.value,
            support_violation: objective.support_violation,
            context: context.0,
            updates,
            train_return,
            env_steps: self.env_steps,
            dump,
        })
    }

    #[allow(clippy::type_complexity)]
    fn train_and_evaluate(
        &mut self,
        task: &TaskSpec,
        base: u64,
    ) -> std::result::Result<(Vec<(Episode, Vec<DumpStep>)>, Vec<UpdateMetrics>, EvalResult), (&'static str, Error)> {
        let episodes = self
            .rollouts(task, self.config.teacher.episodes_per_round, base, self.config.run.dump_trajectories)
            .map_err(|e| ("rollout", e))?;
        let batch = TrajectoryBatch::merge(episodes.iter().map(|(e, _)| e.batch.clone())).map_err(|e| ("rollout", e))?;
        let updates = self
            .trainer
            .update(&mut self.policy, &batch)
            .map_err(|e| ("update", e))?;
        let eval = self.evaluate(self.config.run.eval_episodes).map_err(|e| ("evaluate", e))?;
        Ok((episodes, updates, eval))
    }

    /// Greedy evaluation on the fixed target layouts.
    pub fn evaluate(&self, episodes: usize) -> Result<EvalResult> {
        let seed = self.eval_seed();
        let (policy, cfg, target) = (&self.policy, &self.config, &self.target);
        self.pool
            .install(|| evaluate_target(policy, &cfg.env, target, episodes, cfg.trainer.gamma, seed))
    }

    pub fn save_checkpoint(&self, dir: &Path) -> Result<()> {
        checkpoint::save(
            dir,
            &self.config,
            self.round,
            self.env_steps,
            &self.policy,
            &self.imitation,
            &self.teacher,
        )
    }
}

/// CSV writers for a run directory.
pub struct RunLog {
    run: BufWriter<File>,
    updates: BufWriter<File>,
    contexts: BufWriter<File>,
    trajectories: Option<BufWriter<File>>,
    arms: usize,
    update_index: usize,
}

pub fn run_header(arms: usize) -> String {
    let mut cols = vec!["round".to_string(), "cluster_id".into(), "task_id".into()];
    cols.extend((0..arms).map(|i| format!("p_{i}")));
    cols.extend(
        ["raw_return", "norm_reward", "target_return", "target_coverage", "J_hat"]
            .iter()
            .map(|s| s.to_string()),
    );
    cols.join(",")
}

pub const UPDATES_HEADER: &str = "update_index,round,level,surrogate,kl,value_loss,clip_fraction,mean_return";

impl RunLog {
    pub fn create(dir: &Path, arms: usize, context_width: usize, dump: bool) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let mut run = BufWriter::new(File::create(dir.join("run.csv"))?);
        writeln!(run, "{}", run_header(arms))?;
        let mut updates = BufWriter::new(File::create(dir.join("updates.csv"))?);
        writeln!(updates, "{UPDATES_HEADER}")?;
        let mut contexts = BufWriter::new(File::create(dir.join("contexts.csv"))?);
        let ctx_cols: Vec<String> = (0..context_width).map(|i| format!("ctx_{i}")).collect();
        writeln!(contexts, "round,cluster_id,{}", ctx_cols.join(","))?;
        let trajectories = if dump {
            Some(BufWriter::new(File::create(dir.join("trajectories.jsonl"))?))
        } else {
            None
        };
        Ok(RunLog {
            run,
            updates,
            contexts,
            trajectories,
            arms,
            update_index: 0,
        })
    }

    pub fn record(&mut self, r: &RoundRecord) -> Result<()> {
        let probs: Vec<String> = r.distribution.iter().map(|p| p.to_string()).collect();
        writeln!(
            self.run,
            "{},{},{},{},{},{},{},{},{}",
            r.round,
            r.cluster_id,
            r.task_id,
            probs.join(","),
            r.raw_return,
            r.norm_reward,
            r.target_return,
            r.target_coverage,
            r.j_hat
        )?;
        for u in &r.updates {
            writeln!(
                self.updates,
                "{},{},{},{},{},{},{},{}",
                self.update_index, r.round, u.level, u.surrogate, u.kl, u.value_loss, u.clip_fraction, r.train_return
            )?;
            self.update_index += 1;
        }
        let ctx: Vec<String> = r.context.iter().map(|v| v.to_string()).collect();
        writeln!(self.contexts, "{},{},{}", r.round, r.cluster_id, ctx.join(","))?;
        if let Some(t) = self.trajectories.as_mut() {
            for s in &r.dump {
                writeln!(t, "{}", serde_json::to_string(s)?)?;
            }
        }
        self.flush()
    }

    /// A row for a round that did not complete: numeric fields are empty.
    pub fn record_aborted(&mut self, round: usize) -> Result<()> {
        let empties = ",".repeat(self.arms + 5);
        writeln!(self.run, "{round},aborted,{empties}")?;
        self.flush()
    }

    fn flush(&mut self) -> Result<()> {
        self.run.flush()?;
        self.updates.flush()?;
        self.contexts.flush()?;
        if let Some(t) = self.trajectories.as_mut() {
            t.flush()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub rounds: usize,
    pub env_steps: u64,
    pub final_target_return: f64,
    pub final_target_coverage: f64,
    pub checkpoint: Option<PathBuf>,
}

/// Runs every configured round, logging to `run.output_dir` when set.
/// `on_round` sees each record as it is produced.
pub fn run_experiment(config: ExperimentConfig, mut on_round: impl FnMut(&RoundRecord)) -> Result<(Experiment, RunSummary)> {
    let mut exp = Experiment::new(config)?;
    let cfg = exp.config.clone();
    let mut log = match &cfg.run.output_dir {
        Some(dir) => {
            fs::write(dir_create(dir)?.join("config.json"), cfg.to_json())?;
            Some(RunLog::create(
                dir,
                cfg.tasks.populations.len(),
                cfg.imitation.hidden,
                cfg.run.dump_trajectories,
            )?)
        }
        None => None,
    };
    let mut last = None;
    for r in 0..cfg.run.rounds {
        let rec = match exp.spc_round() {
            Ok(rec) => rec,
            Err(e) => {
                if let Some(l) = log.as_mut() {
                    l.record_aborted(r)?;
                }
                return Err(e);
            }
        };
        if let Some(l) = log.as_mut() {
            l.record(&rec)?;
        }
        on_round(&rec);
        if let (Some(dir), true) = (&cfg.run.output_dir, cfg.run.checkpoint_every > 0) {
            if (r + 1) % cfg.run.checkpoint_every == 0 {
                exp.save_checkpoint(&dir.join(format!("checkpoint_{:06}", r + 1)))?;
            }
        }
        last = Some(rec);
    }
    let checkpoint = match &cfg.run.output_dir {
        Some(dir) => {
            let p = dir.join("checkpoint");
            exp.save_checkpoint(&p)?;
            Some(p)
        }
        None => None,
    };
    let summary = RunSummary {
        rounds: exp.round,
        env_steps: exp.env_steps,
        final_target_return: last.as_ref().map_or(f64::NAN, |r| r.target_return),
        final_target_coverage: last.as_ref().map_or(f64::NAN, |r| r.target_coverage),
        checkpoint,
    };
    if let Some(dir) = &cfg.run.output_dir {
        fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    }
    Ok((exp, summary))
}

fn dir_create(dir: &Path) -> Result<&Path> {
    fs::create_dir_all(dir)?;
    Ok(dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny_config() -> ExperimentConfig {
        let mut c = ExperimentConfig::simple_spread(vec![2, 4], 4);
        c.env.slots = 2;
        c.student.obs_dim = c.env.obs_dim();
        c.student.d_m = 8;
        c.student.hidden = 16;
        c.teacher.episodes_per_round = 3;
        c.imitation.hidden = 6;
        c.imitation.epochs = 1;
        c.imitation.window_transitions = 300;
        c.trainer.sgd_iterations = 2;
        c.run.rounds = 3;
        c.run.eval_episodes = 2;
        c
    }

    #[test]
    fn round_zero_distribution_is_uniform() {
        let mut exp = Experiment::new(tiny_config()).unwrap();
        let r = exp.spc_round().unwrap();
        assert_eq!(r.round, 0);
        let (lo, hi) = r
            .distribution
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), p| (a.min(*p), b.max(*p)));
        assert!(hi - lo < 0.01);
        assert!((r.distribution.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert_eq!(r.context.len(), 6);
        assert!(r.env_steps > 0);
        assert_eq!(exp.rounds_completed(), 1);
    }

    #[test]
    fn rounds_are_deterministic_and_worker_independent() {
        let collect = |workers: usize| {
            let mut c = tiny_config();
            c.run.workers = workers;
            let mut recs = Vec::new();
            run_experiment(c, |r| recs.push(r.clone())).unwrap();
            recs
        };
        let a = collect(1);
        assert_eq!(a.len(), 3);
        assert_eq!(a, collect(1));
        assert_eq!(a, collect(2));
    }

    #[test]
    fn teacher_sees_one_context_per_round() {
        let mut exp = Experiment::new(tiny_config()).unwrap();
        for _ in 0..3 {
            exp.spc_round().unwrap();
        }
        assert_eq!(exp.teacher().buffer().count(), 3);
        assert!(exp.policy().version() >= 3);
    }

    #[test]
    fn logs_have_one_row_per_round() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = tiny_config();
        c.run.output_dir = Some(dir.path().to_path_buf());
        c.run.dump_trajectories = true;
        run_experiment(c, |_| {}).unwrap();
        let run = fs::read_to_string(dir.path().join("run.csv")).unwrap();
        let lines: Vec<&str> = run.lines().collect();
        assert_eq!(
            lines[0],
            "round,cluster_id,task_id,p_0,p_1,raw_return,norm_reward,target_return,target_coverage,J_hat"
        );
        assert_eq!(lines.len(), 4);
        assert!(lines.iter().all(|l| l.split(',').count() == 10));
        assert!(!run.contains('\r'));
        let ctx = fs::read_to_string(dir.path().join("contexts.csv")).unwrap();
        assert!(ctx.starts_with("round,cluster_id,ctx_0,"));
        let traj = fs::read_to_string(dir.path().join("trajectories.jsonl")).unwrap();
        let first: serde_json::Value = serde_json::from_str(traj.lines().next().unwrap()).unwrap();
        assert_eq!(first["step"], 0);
        assert!(dir.path().join("checkpoint/manifest.json").exists());
        assert!(dir.path().join("summary.json").exists());
    }

    #[test]
    fn aborted_round_is_marked() {
        let dir = tempfile::tempdir().unwrap();
        let mut log = RunLog::create(dir.path(), 2, 3, false).unwrap();
        log.record_aborted(4).unwrap();
        drop(log);
        let run = fs::read_to_string(dir.path().join("run.csv")).unwrap();
        let row = run.lines().nth(1).unwrap();
        assert!(row.starts_with("4,aborted,"));
        assert_eq!(row.split(',').count(), 10);
    }

    #[test]
    fn checkpoint_round_trip_preserves_evaluation() {
        let dir = tempfile::tempdir().unwrap();
        let mut exp = Experiment::new(tiny_config()).unwrap();
        exp.spc_round().unwrap();
        exp.save_checkpoint(dir.path()).unwrap();
        let restored = checkpoint::load(dir.path()).unwrap();
        assert_eq!(restored.policy.params(), exp.policy().params());
        let cfg = exp.config().clone();
        let before = evaluate_target(exp.policy(), &cfg.env, exp.target(), 3, 0.99, 77).unwrap();
        let after = evaluate_target(&restored.policy, &cfg.env, exp.target(), 3, 0.99, 77).unwrap();
        assert_eq!(before, after);
        let im = ImitationModel::from_params(cfg.student.obs_dim, cfg.imitation.hidden, &restored.imitation_params).unwrap();
        assert_eq!(im.params(), exp.imitation().params());
        assert_eq!(restored.manifest.round, 1);
        assert_eq!(
            serde_json::to_string(&restored.teacher).unwrap(),
            serde_json::to_string(exp.teacher()).unwrap()
        );
    }

    #[test]
    fn missing_checkpoint_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(checkpoint::load(dir.path()), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn uniform_teacher_stays_uniform() {
        let mut c = tiny_config();
        c.teacher.alpha = Some(1.0);
        let mut recs = Vec::new();
        run_experiment(c, |r| recs.push(r.clone())).unwrap();
        for r in recs {
            assert!(r.distribution.iter().all(|p| (p - 0.5).abs() < 1e-15));
        }
    }
}
