//! Curriculum learning over a finite task set with a clustered contextual
//! Exp3 teacher and a population-invariant hierarchical multi-agent student.
//!
//! The crate is organised bottom-up:
//!
//! - [`bandit`]: Exp3 weight mechanics, the per-context router and the
//!   uniform context mesh.
//! - [`clustering`]: clustering-feature tree that discretises
//!   high-dimensional contexts online.
//! - [`teacher`]: the sampling/training protocol that ties the two together.
//! - [`regret`]: synthetic Lipschitz bandits for measuring regret and
//!   discretisation error.
//! - [`numerics`]: dense matrices and a define-by-run reverse-mode tape.
//! - [`env`]: Simple-Spread and Push-Ball particle worlds.
//! - [`student`], [`imitation`], [`trainer`]: the learned components.
//! - [`orchestrator`]: teacher rounds, configuration, logs and checkpoints.

pub mod bandit;
pub mod clustering;
pub mod env;
pub mod error;
pub mod imitation;
pub mod numerics;
pub mod orchestrator;
pub mod regret;
pub mod rng;
pub mod student;
pub mod teacher;
pub mod trainer;

pub use bandit::{ArmDistribution, ContextualRouter, Exp3Instance, MeshGrid, UpdateRule};
pub use clustering::{CfTree, CfTreeConfig, ClusterAssignment, ClusteringFeature};
pub use env::{Env, EnvConfig, EnvFamily, StepOutcome, WorldState};
pub use error::{Error, Result};
pub use imitation::{ContextVector, ImitationModel};
pub use numerics::{Graph, Matrix, ParamStore, Var};
pub use student::{HierarchicalPolicy, SkillAction, SkillMode, StudentConfig};
pub use teacher::{TaskSpec, Teacher, TeacherConfig};
pub use trainer::{TrainConfig, TrajectoryBatch};
pub use orchestrator::{ExperimentConfig, Experiment, RoundRecord};
