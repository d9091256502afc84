//! Reinforcement-learning environment and agent for loop-nest optimization.
//!
//! Operations are perfectly nested affine loops ([`ir`]), rewritten by a small
//! set of schedule primitives ([`transform`]) and scored by a deterministic
//! cost model ([`cost`]) or by timing a reference interpreter ([`interp`]).

pub mod agent;
pub mod cost;
pub mod dataset;
pub mod env;
pub mod eval;
pub mod features;
pub mod interp;
pub mod ir;
pub mod search;
pub mod transform;

pub use cost::{analytic_cost, CostConfig, CostReport};
pub use env::{Backend, Env, EnvError, RewardMode, StepResult};
pub use features::{EnvLimits, Observation};
pub use ir::{build_operation, LinalgOp, OpKind};
pub use transform::{Action, ActionMask, Schedule, TransformKind};
