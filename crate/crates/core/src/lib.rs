//! Proposer/solver co-evolution driven by consensus-entropy rewards, small
//! enough to run on a laptop.
//!
//! - [`reward`]: answer canonicalization, empirical answer distributions,
//!   consensus entropy and the solver/proposer rewards.
//! - [`policy`]: categorical policies with exact score functions and KL.
//! - [`sim`]: a synthetic difficulty/skill world with exact-enumeration
//!   oracles.
//! - [`trainer`]: the closed REINFORCE loop with EMA baselines and adaptive
//!   KL control.
//! - [`backend`]: inference-only scoring against a chat-completions endpoint,
//!   with fixture record/replay.
//! - [`metrics`]: step-log IO and run summaries, plus reward-landscape
//!   tables and run manifests.
//! - [`config`]: TOML config loading with `KEY=VALUE` overrides.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backend;
pub mod config;
pub mod metrics;
pub mod policy;
pub mod reward;
pub mod sim;
pub mod trainer;

pub use policy::CategoricalPolicy;
pub use reward::{
    AnswerDistribution, AnswerSample, ProposerRewardParams, SolverRewardKind, SolverRewardParams,
};
pub use sim::{SimWorld, WorldConfig};
pub use trainer::{run, RunOutput, StepRecord, Trainer, TrainerConfig};
