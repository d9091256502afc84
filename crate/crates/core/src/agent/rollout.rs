//! Episode collection for PPO.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::policy::{decode, flat_mask, forward_policy, greedy_action, sample_action, PolicyParams};
use super::ppo::{gae, RolloutBatch};
use super::AgentError;
use crate::env::Env;
use crate::ir::LinalgOp;
use crate::transform::{Action, Schedule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSummary {
    pub op_index: usize,
    pub schedule: Schedule,
    pub total_reward: f64,
    /// `exp(total_reward)`: the final speedup in both reward modes, or the
    /// penalized value after a timeout.
    pub speedup: f64,
    pub final_cost: Option<f64>,
    pub timed_out: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Episode {
    pub batch: RolloutBatch,
    pub actions: Vec<Action>,
    pub summary: Option<EpisodeSummary>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Selection {
    Sample,
    Greedy,
}

/// Runs one episode on `op` to termination. Advantages are per-episode GAE
/// and not yet normalized.
pub fn run_episode<R: Rng + ?Sized>(
    env: &mut Env,
    params: &PolicyParams,
    op: &LinalgOp,
    op_index: usize,
    selection: Selection,
    gamma: f64,
    lambda: f64,
    rng: &mut R,
) -> Result<Episode, AgentError> {
    let layout = params.layout();
    let space = params.space();
    let limits = env.limits;
    let mut res = env.reset(op.clone())?;
    let mut ep = Episode::default();
    let mut total = 0.0;
    let mut final_cost = None;
    let mut timed_out = false;
    loop {
        let current = env.current_op()?.clone();
        let fm = flat_mask(space, &current, &res.mask, &limits);
        let dists = forward_policy(params, &res.observation, &fm)?;
        let sample = match selection {
            Selection::Sample => sample_action(&dists, rng),
            Selection::Greedy => greedy_action(&dists),
        };
        let action = decode(&sample, &current, &limits)?;
        let value = params.value(&res.observation);
        let next = env.step(&action)?;

        let b = &mut ep.batch;
        b.observations.push(res.observation);
        b.masks.push(fm);
        b.actions.push(sample.group_choices(&layout));
        b.logprobs.push(sample.joint_logprob());
        b.rewards.push(next.reward);
        b.values.push(value);
        ep.actions.push(action);
        total += next.reward;
        if next.info.cost.is_some() {
            final_cost = next.info.cost;
        }
        timed_out |= next.info.timed_out;
        let done = next.done;
        res = next;
        if done {
            break;
        }
    }
    let (adv, ret) = gae(&ep.batch.rewards, &ep.batch.values, 0.0, gamma, lambda)?;
    ep.batch.advantages = adv;
    ep.batch.returns = ret;
    ep.summary = Some(EpisodeSummary {
        op_index,
        schedule: Schedule::new(ep.actions.clone()),
        total_reward: total,
        speedup: total.exp(),
        final_cost: if timed_out { None } else { final_cost },
        timed_out,
    });
    Ok(ep)
}

/// Collects whole episodes on uniformly drawn ops until at least `n`
/// transitions exist, then truncates to exactly `n` and normalizes
/// advantages.
pub fn collect_rollouts<R: Rng + ?Sized>(
    env: &mut Env,
    dataset: &[LinalgOp],
    params: &PolicyParams,
    n: usize,
    gamma: f64,
    lambda: f64,
    rng: &mut R,
) -> Result<(RolloutBatch, Vec<EpisodeSummary>), AgentError> {
    if dataset.is_empty() {
        return Err(AgentError::EmptyDataset);
    }
    let mut batch = RolloutBatch::default();
    let mut episodes = Vec::new();
    while batch.len() < n.max(1) {
        let idx = rng.random_range(0..dataset.len());
        let ep = run_episode(env, params, &dataset[idx], idx, Selection::Sample, gamma, lambda, rng)?;
        let e = ep.batch;
        batch.observations.extend(e.observations);
        batch.masks.extend(e.masks);
        batch.actions.extend(e.actions);
        batch.logprobs.extend(e.logprobs);
        batch.rewards.extend(e.rewards);
        batch.values.extend(e.values);
        batch.advantages.extend(e.advantages);
        batch.returns.extend(e.returns);
        episodes.push(ep.summary.expect("finished episode"));
    }
    batch.truncate(n.max(1));
    batch.normalize_advantages();
    Ok((batch, episodes))
}
