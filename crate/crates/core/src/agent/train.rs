//! PPO training loop.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::nn::Optimizer;
use super::policy::{ActionSpaceKind, NetConfig, PolicyParams};
use super::ppo::{ppo_update, PPOConfig};
use super::rollout::collect_rollouts;
use super::AgentError;
use crate::env::{Backend, Env, RewardMode};
use crate::features::EnvLimits;
use crate::ir::LinalgOp;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub limits: EnvLimits,
    pub net: NetConfig,
    pub ppo: PPOConfig,
    pub mode: RewardMode,
    pub space: ActionSpaceKind,
    pub backend: Backend,
    pub seed: u64,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub iteration: usize,
    /// Mean undiscounted episode return.
    pub mean_reward: f64,
    pub mean_speedup: f64,
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub params: PolicyParams,
    pub log: Vec<TrainLogEntry>,
    /// Wall-clock seconds per iteration; kept out of the log so logs stay
    /// reproducible.
    pub iteration_seconds: Vec<f64>,
}

pub fn initial_params(cfg: &TrainConfig) -> PolicyParams {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    PolicyParams::new(cfg.limits, cfg.space, &cfg.net, &mut rng)
}

/// Runs `cfg.ppo.iterations` rounds of rollout collection and PPO updates.
/// `on_iteration` sees every log entry with the updated parameters.
pub fn train(
    dataset: &[LinalgOp],
    cfg: &TrainConfig,
    mut on_iteration: impl FnMut(&TrainLogEntry, &PolicyParams) -> Result<(), AgentError>,
) -> Result<TrainOutput, AgentError> {
    if dataset.is_empty() {
        return Err(AgentError::EmptyDataset);
    }
    let mut params = initial_params(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut env = Env::new(cfg.limits, cfg.mode, cfg.backend);
    let mut opt = Optimizer::new(cfg.ppo.optimizer);
    let mut log = Vec::with_capacity(cfg.ppo.iterations);
    let mut secs = Vec::with_capacity(cfg.ppo.iterations);

    for iteration in 1..=cfg.ppo.iterations {
        let start = Instant::now();
        let (batch, episodes) = collect_rollouts(
            &mut env,
            dataset,
            &params,
            cfg.ppo.batch,
            cfg.ppo.gamma,
            cfg.ppo.lambda,
            &mut rng,
        )?;
        let reports = ppo_update(&mut params, &mut opt, &batch, &cfg.ppo)?;
        secs.push(start.elapsed().as_secs_f64());

        let k = episodes.len() as f64;
        let e = reports.len().max(1) as f64;
        let entry = TrainLogEntry {
            iteration,
            mean_reward: episodes.iter().map(|x| x.total_reward).sum::<f64>() / k,
            mean_speedup: episodes.iter().map(|x| x.speedup).sum::<f64>() / k,
            policy_loss: reports.iter().map(|r| r.policy_loss).sum::<f64>() / e,
            value_loss: reports.iter().map(|r| r.value_loss).sum::<f64>() / e,
            entropy: reports.iter().map(|r| r.entropy).sum::<f64>() / e,
        };
        log::debug!(
            "iteration {iteration}: speedup {:.3} reward {:.3}",
            entry.mean_speedup,
            entry.mean_reward
        );
        on_iteration(&entry, &params)?;
        log.push(entry);
    }
    Ok(TrainOutput {
        params,
        log,
        iteration_seconds: secs,
    })
}
