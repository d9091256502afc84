//! Episodic optimization environment.
//!
//! An episode starts from one untransformed operation. Each step applies one
//! action; the episode ends on vectorization, after `max_schedule_len` steps
//! or when the cost backend reports a timeout. Rewards are natural-log
//! speedups, either after every step (`Immediate`) or once at the end
//! (`Final`).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::{analytic_cost, CostConfig, CostReport};
use crate::features::{extract, EnvLimits, FeatureError, HistoryTensor, Observation};
use crate::interp::{measure, InterpError, MeasureConfig};
use crate::ir::LinalgOp;
use crate::transform::{
    apply_action, apply_schedule, compute_mask, tile_candidates, Action, ActionMask, Schedule, TransformError,
    TransformKind,
};

/// Reward given when the backend reports a timeout (about a 148x slowdown).
pub const TIMEOUT_PENALTY: f64 = -5.0;

#[derive(Debug, Error)]
pub enum EnvError {
    #[error(transparent)]
    Limits(#[from] FeatureError),
    #[error(transparent)]
    Transform(#[from] TransformError),
    #[error(transparent)]
    Interp(#[from] InterpError),
    #[error("episode is done")]
    EpisodeDone,
    #[error("environment has not been reset")]
    NotReset,
    #[error("action rejected by mask: {0}")]
    MaskedAction(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RewardMode {
    Immediate,
    #[default]
    Final,
}

/// Cost source for rewards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "backend", rename_all = "lowercase")]
pub enum Backend {
    Analytic(CostConfig),
    Measured(MeasureConfig),
}

impl Default for Backend {
    fn default() -> Self {
        Backend::Analytic(CostConfig::default())
    }
}

impl Backend {
    /// `base_time` is the untransformed cost, used by the measured backend
    /// to decide timeouts.
    pub fn evaluate(&self, op: &LinalgOp, base_time: Option<f64>) -> Result<CostReport, EnvError> {
        match self {
            Backend::Analytic(cfg) => Ok(analytic_cost(op, cfg)),
            Backend::Measured(m) => Ok(measure(
                op,
                m.repeats,
                m.timeout_factor,
                base_time.unwrap_or(f64::INFINITY),
                &m.limits,
            )?),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EnvState {
    pub current_op: LinalgOp,
    pub base_cost: f64,
    pub prev_cost: f64,
    pub schedule: Schedule,
    pub history: HistoryTensor,
    pub step_index: usize,
    pub done: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StepInfo {
    /// Backend cost after this step, when it was evaluated.
    pub cost: Option<f64>,
    /// `base_cost / cost`, when the cost is known.
    pub speedup: Option<f64>,
    pub timed_out: bool,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct StepResult {
    pub observation: Observation,
    pub reward: f64,
    pub done: bool,
    pub mask: ActionMask,
    pub info: StepInfo,
}

/// One line of a trajectory dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub op_id: usize,
    pub step: usize,
    pub action: Action,
    pub reward: f64,
    pub cost: Option<f64>,
    pub done: bool,
}

pub struct Env {
    pub limits: EnvLimits,
    pub mode: RewardMode,
    pub backend: Backend,
    state: Option<EnvState>,
}

impl Env {
    pub fn new(limits: EnvLimits, mode: RewardMode, backend: Backend) -> Self {
        Env {
            limits,
            mode,
            backend,
            state: None,
        }
    }

    pub fn state(&self) -> Option<&EnvState> {
        self.state.as_ref()
    }

    fn live_state(&self) -> Result<&EnvState, EnvError> {
        self.state.as_ref().ok_or(EnvError::NotReset)
    }

    pub fn current_op(&self) -> Result<&LinalgOp, EnvError> {
        Ok(&self.live_state()?.current_op)
    }

    pub fn mask(&self) -> Result<ActionMask, EnvError> {
        let s = self.live_state()?;
        Ok(self.mask_for(s))
    }

    fn mask_for(&self, s: &EnvState) -> ActionMask {
        let mut m = compute_mask(
            &s.current_op,
            &s.schedule,
            s.step_index.min(self.limits.max_schedule_len - 1),
            &self.limits,
        );
        if s.done {
            m.transform = [false; 5];
        }
        m
    }

    pub fn tile_candidates(&self) -> Result<Vec<Vec<u64>>, EnvError> {
        Ok(tile_candidates(&self.live_state()?.current_op, &self.limits))
    }

    pub fn reset(&mut self, op: LinalgOp) -> Result<StepResult, EnvError> {
        self.limits.check(&op)?;
        let base = self.backend.evaluate(&op, None)?.total;
        let history = HistoryTensor::new(&self.limits);
        let observation = extract(&op, &history, &self.limits)?;
        let state = EnvState {
            current_op: op,
            base_cost: base,
            prev_cost: base,
            schedule: Schedule::default(),
            history,
            step_index: 0,
            done: false,
        };
        let mask = self.mask_for(&state);
        self.state = Some(state);
        Ok(StepResult {
            observation,
            reward: 0.0,
            done: false,
            mask,
            info: StepInfo {
                cost: Some(base),
                speedup: Some(1.0),
                ..Default::default()
            },
        })
    }

    /// Rejects actions the current mask does not permit.
    pub fn check_action(&self, action: &Action) -> Result<(), EnvError> {
        let s = self.live_state()?;
        if s.done {
            return Err(EnvError::EpisodeDone);
        }
        let mask = self.mask_for(s);
        let kind = action.kind();
        if !mask.allows(kind) {
            return Err(EnvError::MaskedAction(format!("{kind:?} is masked")));
        }
        match action {
            Action::Tiling { sizes } | Action::Parallelization { sizes } => {
                let n = s.current_op.num_loops();
                if sizes.len() != n {
                    return Err(EnvError::MaskedAction(format!("{} tile sizes for {n} loops", sizes.len())));
                }
                let cands = tile_candidates(&s.current_op, &self.limits);
                for (i, &size) in sizes.iter().enumerate() {
                    let legal = size == 0
                        || cands[i]
                            .iter()
                            .zip(&mask.tile_sizes[i])
                            .skip(1)
                            .any(|(&c, &ok)| ok && c == size);
                    if !legal {
                        return Err(EnvError::MaskedAction(format!("tile size {size} on loop {i}")));
                    }
                }
            }
            Action::Interchange { k } => {
                if !mask.interchange.get(*k).copied().unwrap_or(false) {
                    return Err(EnvError::MaskedAction(format!("interchange {k}")));
                }
            }
            Action::Im2col | Action::Vectorization => {}
        }
        Ok(())
    }

    pub fn step(&mut self, action: &Action) -> Result<StepResult, EnvError> {
        self.check_action(action)?;
        let limits = self.limits;
        let mode = self.mode;
        let backend = self.backend;
        let s = self.state.as_mut().ok_or(EnvError::NotReset)?;

        let n_before = s.current_op.num_loops();
        let next = apply_action(&s.current_op, action, limits.max_loops)?;
        s.history.record(action, s.step_index, n_before)?;
        s.schedule.push(action.clone());
        s.step_index += 1;
        s.current_op = next;
        s.done = action.kind() == TransformKind::Vectorization || s.step_index >= limits.max_schedule_len;

        let mut info = StepInfo::default();
        let evaluate_now = mode == RewardMode::Immediate || s.done;
        let mut reward = 0.0;
        if evaluate_now {
            let report = backend.evaluate(&s.current_op, Some(s.base_cost))?;
            if report.timed_out {
                info.timed_out = true;
                reward = TIMEOUT_PENALTY;
                s.done = true;
            } else {
                let cost = report.total;
                reward = match mode {
                    RewardMode::Immediate => (s.prev_cost / cost).ln(),
                    RewardMode::Final => (s.base_cost / cost).ln(),
                };
                s.prev_cost = cost;
                info.cost = Some(cost);
                info.speedup = Some(s.base_cost / cost);
            }
        }

        let observation = extract(&s.current_op, &s.history, &limits)?;
        let done = s.done;
        let snapshot = s.clone();
        let mask = self.mask_for(&snapshot);
        Ok(StepResult {
            observation,
            reward,
            done,
            mask,
            info,
        })
    }
}

/// Applies `schedule` and returns the transformed op with its analytic
/// speedup over the untransformed one.
pub fn run_schedule(
    op: &LinalgOp,
    schedule: &Schedule,
    cfg: &CostConfig,
    max_loops: usize,
) -> Result<(LinalgOp, f64), TransformError> {
    let out = apply_schedule(op, schedule, max_loops)?;
    let speedup = analytic_cost(op, cfg).total / analytic_cost(&out, cfg).total;
    Ok((out, speedup))
}
