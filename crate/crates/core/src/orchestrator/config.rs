use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bandit::UpdateRule;
use crate::clustering::CfTreeConfig;
use crate::env::{EnvConfig, EnvFamily};
use crate::error::{Error, Result};
use crate::student::StudentConfig;
use crate::teacher::{TaskSpec, TeacherConfig};
use crate::trainer::TrainConfig;

/// The teacher's arms: one task per training population.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpace {
    pub env_family: EnvFamily,
    pub populations: Vec<usize>,
    #[serde(default = "default_max_steps")]
    pub max_steps: usize,
    pub target_population: usize,
}

fn default_max_steps() -> usize {
    25
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherBlock {
    pub alpha: Option<f64>,
    pub horizon: Option<u64>,
    pub update_rule: UpdateRule,
    pub clustering: CfTreeConfig,
    pub buffer_capacity: usize,
    pub normalize_contexts: bool,
    pub warm_start: bool,
    /// Training episodes collected per teacher round.
    pub episodes_per_round: usize,
}

impl Default for TeacherBlock {
    fn default() -> Self {
        let t = TeacherConfig::default();
        TeacherBlock {
            alpha: t.alpha,
            horizon: t.horizon,
            update_rule: t.update_rule,
            clustering: t.clustering,
            buffer_capacity: t.buffer_capacity,
            normalize_contexts: t.normalize_contexts,
            warm_start: t.warm_start,
            episodes_per_round: 16,
        }
    }
}

impl TeacherBlock {
    pub fn teacher_config(&self) -> TeacherConfig {
        TeacherConfig {
            alpha: self.alpha,
            horizon: self.horizon,
            update_rule: self.update_rule,
            clustering: self.clustering,
            buffer_capacity: self.buffer_capacity,
            normalize_contexts: self.normalize_contexts,
            warm_start: self.warm_start,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImitationConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Most recent per-agent transitions kept for refreshing the model.
    pub window_transitions: usize,
    /// Most recent per-agent trajectories averaged into the context.
    pub context_trajectories: usize,
}

impl Default for ImitationConfig {
    fn default() -> Self {
        ImitationConfig {
            hidden: 32,
            epochs: 5,
            learning_rate: 1e-3,
            window_transitions: 2000,
            context_trajectories: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub rounds: usize,
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    /// Rounds between checkpoints; 0 keeps only the final one.
    pub checkpoint_every: usize,
    pub eval_episodes: usize,
    /// Rollout threads. Results do not depend on this value.
    pub workers: usize,
    /// Write every evaluation step to `trajectories.jsonl`.
    pub dump_trajectories: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            rounds: 100,
            seed: 0,
            output_dir: None,
            checkpoint_every: 0,
            eval_episodes: 16,
            workers: 1,
            dump_trajectories: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub env: EnvConfig,
    pub tasks: TaskSpace,
    pub teacher: TeacherBlock,
    pub student: StudentConfig,
    pub trainer: TrainConfig,
    pub imitation: ImitationConfig,
    pub run: RunConfig,
}

impl ExperimentConfig {
    /// A small Simple-Spread setup with every block at its default.
    pub fn simple_spread(populations: Vec<usize>, target_population: usize) -> Self {
        let env = EnvConfig::default();
        let student = StudentConfig {
            obs_dim: env.obs_dim(),
            ..StudentConfig::default()
        };
        ExperimentConfig {
            env,
            tasks: TaskSpace {
                env_family: EnvFamily::SimpleSpread,
                populations,
                max_steps: 25,
                target_population,
            },
            teacher: TeacherBlock::default(),
            student,
            trainer: TrainConfig::default(),
            imitation: ImitationConfig::default(),
            run: RunConfig::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.student.validate()?;
        self.trainer.validate()?;
        self.teacher.teacher_config().validate()?;
        let t = &self.tasks;
        if t.populations.is_empty() {
            return Err(Error::Config("tasks.populations must not be empty".into()));
        }
        if t.max_steps == 0 {
            return Err(Error::Config("tasks.max_steps must be positive".into()));
        }
        for p in t.populations.iter().chain(std::iter::once(&t.target_population)) {
            if !self.env.populations.contains(p) {
                return Err(Error::Config(format!(
                    "population {p} is not one of env.populations {:?}",
                    self.env.populations
                )));
            }
        }
        let max_train = *t.populations.iter().max().expect("non-empty");
        if !t.populations.contains(&t.target_population) && t.target_population < max_train {
            return Err(Error::Config(format!(
                "target population {} must be a training population or exceed all of them",
                t.target_population
            )));
        }
        if self.student.obs_dim != self.env.obs_dim() {
            return Err(Error::Config(format!(
                "student.obs_dim {} differs from the environment's {}",
                self.student.obs_dim,
                self.env.obs_dim()
            )));
        }
        if self.teacher.episodes_per_round == 0 || self.run.eval_episodes == 0 {
            return Err(Error::Config("episodes_per_round and eval_episodes must be positive".into()));
        }
        let im = &self.imitation;
        if im.hidden == 0 || im.window_transitions == 0 || im.context_trajectories == 0 || !(im.learning_rate > 0.0) {
            return Err(Error::Config("imitation widths, window and learning rate must be positive".into()));
        }
        if self.run.workers == 0 {
            return Err(Error::Config("run.workers must be at least 1".into()));
        }
        Ok(())
    }

    /// Teacher arms in population order.
    pub fn training_tasks(&self) -> Vec<TaskSpec> {
        self.tasks
            .populations
            .iter()
            .enumerate()
            .map(|(i, &n)| TaskSpec {
                env_family: self.tasks.env_family,
                population: n,
                max_steps: self.tasks.max_steps,
                task_id: i,
            })
            .collect()
    }

    /// The target task; its id is the matching arm, or one past the arms.
    pub fn target_task(&self) -> TaskSpec {
        let t = &self.tasks;
        let id = t
            .populations
            .iter()
            .position(|p| *p == t.target_population)
            .unwrap_or(t.populations.len());
        TaskSpec {
            env_family: t.env_family,
            population: t.target_population,
            max_steps: t.max_steps,
            task_id: id,
        }
    }
}
