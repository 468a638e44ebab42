//! Closed-loop self-improvement for ReAct-style text agents.
//!
//! The loop couples four pieces:
//! - a reason-then-act policy agent and an act-then-reason annotator that
//!   explains sampled actions a posteriori ([`agent`]),
//! - an exploration composer that splices annotated random actions into
//!   fresh trajectories for failed tasks ([`composer`]),
//! - a reward-shaped weighted log-likelihood objective with an exact-gradient
//!   toy policy ([`objective`], [`backend`]),
//! - a multi-round orchestrator that accumulates trajectories, retrains the
//!   policy, and reports per-round quality metrics ([`orchestrator`]).
//!
//! Two bundled desk-scale environments (a binary-reward household text world
//! and a graded-reward shopping world) make the whole loop runnable offline.

pub mod agent;
pub mod backend;
pub mod composer;
pub mod env;
pub mod objective;
pub mod orchestrator;
pub mod prompt;
pub mod trajectory;
pub mod util;

pub use trajectory::{Trajectory, TrajectoryStore};

use thiserror::Error;

/// Top-level error for CLI and orchestration entry points.
#[derive(Debug, Error)]
pub enum A3tError {
    #[error(transparent)]
    Trajectory(#[from] trajectory::TrajectoryError),
    #[error(transparent)]
    Env(#[from] env::EnvError),
    #[error(transparent)]
    Backend(#[from] backend::BackendError),
    #[error(transparent)]
    Agent(#[from] agent::AgentError),
    #[error(transparent)]
    Compose(#[from] composer::ComposeError),
    #[error(transparent)]
    Objective(#[from] objective::ObjectiveError),
    #[error(transparent)]
    Run(#[from] orchestrator::RunError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}
