//! Generalized advantage estimation and the clipped PPO update.

use ndarray::{s, Array2};
use serde::{Deserialize, Serialize};

use super::nn::{OptimizerKind, Optimizer};
use super::policy::{Categorical, PolicyGrads, PolicyParams};
use super::AgentError;
use crate::features::Observation;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PPOConfig {
    pub lr: f64,
    pub clip: f64,
    pub gamma: f64,
    pub lambda: f64,
    pub batch: usize,
    pub epochs: usize,
    pub iterations: usize,
    pub value_coef: f64,
    pub entropy_coef: f64,
    pub optimizer: OptimizerKind,
}

impl Default for PPOConfig {
    fn default() -> Self {
        PPOConfig {
            lr: 0.001,
            clip: 0.2,
            gamma: 0.99,
            lambda: 0.95,
            batch: 64,
            epochs: 4,
            iterations: 1000,
            value_coef: 0.5,
            entropy_coef: 0.01,
            optimizer: OptimizerKind::Sgd,
        }
    }
}

/// Advantages and returns of one episode segment.
///
/// `bootstrap` is the value estimate after the last step, 0 at episode end.
pub fn gae(
    rewards: &[f64],
    values: &[f64],
    bootstrap: f64,
    gamma: f64,
    lambda: f64,
) -> Result<(Vec<f64>, Vec<f64>), AgentError> {
    if rewards.len() != values.len() {
        return Err(AgentError::LengthMismatch {
            what: "values",
            expected: rewards.len(),
            got: values.len(),
        });
    }
    let n = rewards.len();
    let mut adv = vec![0.0; n];
    let mut next_value = bootstrap;
    let mut running = 0.0;
    for t in (0..n).rev() {
        let delta = rewards[t] + gamma * next_value - values[t];
        running = delta + gamma * lambda * running;
        adv[t] = running;
        next_value = values[t];
    }
    let returns = adv.iter().zip(values).map(|(a, v)| a + v).collect();
    Ok((adv, returns))
}

/// Transitions for one update. All vectors are parallel.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RolloutBatch {
    pub observations: Vec<Observation>,
    /// Flat action masks, laid out like the policy's logit row.
    pub masks: Vec<Vec<bool>>,
    /// Chosen index per logit group, `None` where the group was not sampled.
    pub actions: Vec<Vec<Option<usize>>>,
    pub logprobs: Vec<f64>,
    pub rewards: Vec<f64>,
    pub values: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }

    pub fn truncate(&mut self, n: usize) {
        self.observations.truncate(n);
        self.masks.truncate(n);
        self.actions.truncate(n);
        self.logprobs.truncate(n);
        self.rewards.truncate(n);
        self.values.truncate(n);
        self.advantages.truncate(n);
        self.returns.truncate(n);
    }

    /// Shifts advantages to zero mean and, when they are not constant, unit
    /// variance.
    pub fn normalize_advantages(&mut self) {
        let n = self.advantages.len();
        if n == 0 {
            return;
        }
        let mean = self.advantages.iter().sum::<f64>() / n as f64;
        let var = self.advantages.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n as f64;
        let std = var.sqrt();
        for a in &mut self.advantages {
            *a -= mean;
            if std > 1e-8 {
                *a /= std;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub policy_loss: f64,
    pub value_loss: f64,
    pub entropy: f64,
    pub total: f64,
    pub approx_kl: f64,
    pub clip_fraction: f64,
}

fn stack(obs: &[Observation]) -> Result<Array2<f64>, AgentError> {
    let width = obs.first().map_or(0, Observation::len);
    let mut flat = Vec::with_capacity(obs.len() * width);
    for o in obs {
        if o.len() != width {
            return Err(AgentError::LengthMismatch {
                what: "observation",
                expected: width,
                got: o.len(),
            });
        }
        flat.extend_from_slice(o.as_slice());
    }
    Array2::from_shape_vec((obs.len(), width), flat).map_err(|e| AgentError::Shape(e.to_string()))
}

/// PPO loss on `batch`, with parameter gradients when `with_grad` is set.
pub fn ppo_loss(
    params: &PolicyParams,
    batch: &RolloutBatch,
    cfg: &PPOConfig,
    with_grad: bool,
) -> Result<(LossReport, Option<PolicyGrads>), AgentError> {
    let b = batch.len();
    if b == 0 {
        return Err(AgentError::BatchSize { expected: cfg.batch, got: 0 });
    }
    let bf = b as f64;
    let layout = params.layout();
    let x = stack(&batch.observations)?;

    let (feats, bb_cache) = params.backbone.forward_cached(x.clone());
    let mut head_out = Vec::new();
    for h in params.head_nets() {
        head_out.push(h.forward_cached(feats.clone()));
    }
    let views: Vec<_> = head_out.iter().map(|(o, _)| o.view()).collect();
    let logits = ndarray::concatenate(ndarray::Axis(1), &views)
        .map_err(|e| AgentError::Shape(e.to_string()))?
        .as_standard_layout()
        .into_owned();
    let (values, v_cache) = params.value_net.forward_cached(x);

    let mut dlogits = Array2::<f64>::zeros(logits.raw_dim());
    let mut rep = LossReport::default();
    for i in 0..b {
        let row = logits.row(i);
        let row = row.as_slice().expect("contiguous");
        let mask = &batch.masks[i];
        let mut dists = Vec::new();
        let mut lp_new = 0.0;
        let mut ent = 0.0;
        for (g, &(s, l)) in layout.groups.iter().enumerate() {
            let Some(c) = batch.actions[i][g] else { continue };
            let d = Categorical::new(&row[s..s + l], &mask[s..s + l])?;
            lp_new += d.log_probs[c];
            ent += d.entropy();
            dists.push((g, c, d));
        }
        let adv = batch.advantages[i];
        let ratio = (lp_new - batch.logprobs[i]).exp();
        let clipped = ratio.clamp(1.0 - cfg.clip, 1.0 + cfg.clip);
        rep.policy_loss -= (ratio * adv).min(clipped * adv) / bf;
        rep.entropy += ent / bf;
        rep.approx_kl += (batch.logprobs[i] - lp_new) / bf;
        if (ratio - 1.0).abs() > cfg.clip {
            rep.clip_fraction += 1.0 / bf;
        }

        if with_grad {
            let unclipped_active = if adv >= 0.0 {
                ratio <= 1.0 + cfg.clip
            } else {
                ratio >= 1.0 - cfg.clip
            };
            let g_lp = if unclipped_active { -ratio * adv / bf } else { 0.0 };
            for (g, c, d) in &dists {
                let (s, l) = layout.groups[*g];
                let h = d.entropy();
                for j in 0..l {
                    if d.log_probs[j] == f64::NEG_INFINITY {
                        continue;
                    }
                    let p = d.probs[j];
                    let onehot = if j == *c { 1.0 } else { 0.0 };
                    dlogits[[i, s + j]] += g_lp * (onehot - p) + cfg.entropy_coef / bf * p * (d.log_probs[j] + h);
                }
            }
        }
    }
    let diff: Vec<f64> = (0..b).map(|i| values[[i, 0]] - batch.returns[i]).collect();
    rep.value_loss = diff.iter().map(|d| d * d).sum::<f64>() / bf;
    rep.total = rep.policy_loss + cfg.value_coef * rep.value_loss - cfg.entropy_coef * rep.entropy;
    if !rep.total.is_finite() {
        return Err(AgentError::NonFiniteLoss(format!("{rep:?}")));
    }
    if !with_grad {
        return Ok((rep, None));
    }

    let mut grads = PolicyGrads::zeros_like(params);
    let mut dfeats = Array2::<f64>::zeros(feats.raw_dim());
    let mut at = 0;
    for ((h, (out, cache)), hg) in params.head_nets().into_iter().zip(&head_out).zip(&mut grads.heads) {
        let w = out.ncols();
        let g = dlogits.slice(s![.., at..at + w]).to_owned();
        dfeats += &h.backward(cache, g, hg);
        at += w;
    }
    params.backbone.backward(&bb_cache, dfeats, &mut grads.backbone);
    let dv = Array2::from_shape_fn((b, 1), |(i, _)| 2.0 * cfg.value_coef * diff[i] / bf);
    params.value_net.backward(&v_cache, dv, &mut grads.value_net);
    Ok((rep, Some(grads)))
}

/// `cfg.epochs` full-batch gradient steps. Returns the loss measured before
/// each step.
pub fn ppo_update(
    params: &mut PolicyParams,
    opt: &mut Optimizer,
    batch: &RolloutBatch,
    cfg: &PPOConfig,
) -> Result<Vec<LossReport>, AgentError> {
    if batch.len() != cfg.batch {
        return Err(AgentError::BatchSize {
            expected: cfg.batch,
            got: batch.len(),
        });
    }
    let mut reports = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let (rep, grads) = ppo_loss(params, batch, cfg, true)?;
        let flat = grads.expect("requested").flatten();
        if flat.iter().any(|g| !g.is_finite()) {
            return Err(AgentError::NonFiniteLoss("gradient".into()));
        }
        opt.step(cfg.lr, &flat, |f| params.visit_mut(&mut |s| f(s)));
        reports.push(rep);
    }
    Ok(reports)
}
