//! Hyperparameter optimisation for replay-based continual learning.
//!
//! The crate builds class-disjoint task streams ([`streamgen`]), trains a
//! small MLP with replay methods ([`neural`], [`memory`], [`clmethods`]), and
//! runs the tuning frameworks that decide when and on what data the learning
//! rate and method coefficients are chosen ([`hpo`]). Results are evaluated in
//! class-incremental and task-incremental mode and persisted ([`evalreport`]);
//! [`runner`] drives whole experiment plans from a config file.

pub mod clmethods;
pub mod error;
pub mod evalreport;
pub mod hpo;
pub mod memory;
pub mod neural;
pub mod runner;
pub mod seed;
pub mod streamgen;

pub use clmethods::{MethodKind, TrainConfig, TrainTrace, TrainerState};
pub use error::{Error, Result};
pub use evalreport::{EvalMode, EvalReport};
pub use hpo::{
    make_grid, run_framework, CostLedger, Framework, Grid, HyperparamConfig, Learner, Phase,
    RunOptions, RunOutcome, RunRecord,
};
pub use memory::ReplayBuffer;
pub use neural::MlpModel;
pub use streamgen::{Dataset, Example, Task, TaskStream};
