//! Policy and value networks over the hierarchical (or flat) action space.
//!
//! All policy heads read the shared backbone features; their logits are
//! concatenated into one row and cut into independent categorical groups:
//! the transform choice, one tile-size choice per loop and the interchange
//! position. The flat ablation space has a single group.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::nn::{Activation, DenseGrads, DenseNet};
use super::simple::SimpleSpace;
use super::AgentError;
use crate::features::{EnvLimits, Observation};
use crate::ir::LinalgOp;
use crate::transform::{tile_candidates, Action, ActionMask, TransformKind};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionSpaceKind {
    #[default]
    #[serde(alias = "hier")]
    Hierarchical,
    Simple,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub hidden: usize,
    pub backbone_layers: usize,
    pub head_hidden: usize,
    pub value_layers: usize,
    /// Init scale of the final policy layers; small values start near uniform.
    pub policy_out_gain: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            hidden: 512,
            backbone_layers: 4,
            head_hidden: 512,
            value_layers: 4,
            policy_out_gain: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum PolicyHeads {
    Hierarchical {
        transform_head: DenseNet,
        tile_head: DenseNet,
        interchange_head: DenseNet,
    },
    Simple {
        flat_head: DenseNet,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub limits: EnvLimits,
    pub backbone: DenseNet,
    pub heads: PolicyHeads,
    pub value_net: DenseNet,
}

/// Logit groups as `(start, len)` spans of the concatenated head output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub groups: Vec<(usize, usize)>,
    pub width: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyGrads {
    pub backbone: DenseGrads,
    pub heads: Vec<DenseGrads>,
    pub value_net: DenseGrads,
}

impl PolicyGrads {
    pub fn zeros_like(p: &PolicyParams) -> Self {
        PolicyGrads {
            backbone: DenseGrads::zeros_like(&p.backbone),
            heads: p.head_nets().into_iter().map(DenseGrads::zeros_like).collect(),
            value_net: DenseGrads::zeros_like(&p.value_net),
        }
    }

    pub fn visit(&self, f: &mut impl FnMut(&[f64])) {
        self.backbone.visit(f);
        for h in &self.heads {
            h.visit(f);
        }
        self.value_net.visit(f);
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        self.visit(&mut |s| out.extend_from_slice(s));
        out
    }
}

impl PolicyParams {
    pub fn new<R: Rng + ?Sized>(limits: EnvLimits, space: ActionSpaceKind, net: &NetConfig, rng: &mut R) -> Self {
        let obs = limits.observation_len();
        let (h, hh) = (net.hidden, net.head_hidden);
        let (n, m) = (limits.max_loops, limits.tile_choices);

        let mut dims = vec![obs];
        dims.extend(std::iter::repeat_n(h, net.backbone_layers.max(1)));
        let backbone = DenseNet::new(&dims, Activation::Relu, 1.0, rng);
        let g = net.policy_out_gain;
        let heads = match space {
            ActionSpaceKind::Hierarchical => PolicyHeads::Hierarchical {
                transform_head: DenseNet::new(&[h, 5], Activation::None, g, rng),
                tile_head: DenseNet::new(&[h, hh, n * (m + 1)], Activation::None, g, rng),
                interchange_head: DenseNet::new(&[h, hh, n], Activation::None, g, rng),
            },
            ActionSpaceKind::Simple => PolicyHeads::Simple {
                flat_head: DenseNet::new(&[h, hh, SimpleSpace::new(&limits).len()], Activation::None, g, rng),
            },
        };
        let mut vdims = vec![obs];
        vdims.extend(std::iter::repeat_n(h, net.value_layers.max(1)));
        vdims.push(1);
        let value_net = DenseNet::new(&vdims, Activation::None, 1.0, rng);
        PolicyParams {
            limits,
            backbone,
            heads,
            value_net,
        }
    }

    pub fn space(&self) -> ActionSpaceKind {
        match self.heads {
            PolicyHeads::Hierarchical { .. } => ActionSpaceKind::Hierarchical,
            PolicyHeads::Simple { .. } => ActionSpaceKind::Simple,
        }
    }

    pub fn head_nets(&self) -> Vec<&DenseNet> {
        match &self.heads {
            PolicyHeads::Hierarchical {
                transform_head,
                tile_head,
                interchange_head,
            } => vec![transform_head, tile_head, interchange_head],
            PolicyHeads::Simple { flat_head } => vec![flat_head],
        }
    }

    pub fn head_nets_mut(&mut self) -> Vec<&mut DenseNet> {
        match &mut self.heads {
            PolicyHeads::Hierarchical {
                transform_head,
                tile_head,
                interchange_head,
            } => vec![transform_head, tile_head, interchange_head],
            PolicyHeads::Simple { flat_head } => vec![flat_head],
        }
    }

    /// Named networks in a fixed order, used by checkpoints.
    pub fn named_nets(&self) -> Vec<(&'static str, &DenseNet)> {
        let mut v = vec![("backbone", &self.backbone)];
        match &self.heads {
            PolicyHeads::Hierarchical {
                transform_head,
                tile_head,
                interchange_head,
            } => {
                v.push(("transform_head", transform_head));
                v.push(("tile_head", tile_head));
                v.push(("interchange_head", interchange_head));
            }
            PolicyHeads::Simple { flat_head } => v.push(("flat_head", flat_head)),
        }
        v.push(("value_net", &self.value_net));
        v
    }

    pub fn num_params(&self) -> usize {
        self.named_nets().iter().map(|(_, n)| n.num_params()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named_nets().iter().all(|(_, n)| n.is_finite())
    }

    pub fn visit(&self, f: &mut impl FnMut(&[f64])) {
        for (_, n) in self.named_nets() {
            n.visit(f);
        }
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&mut [f64])) {
        self.backbone.visit_mut(f);
        for h in self.head_nets_mut() {
            h.visit_mut(f);
        }
        self.value_net.visit_mut(f);
    }

    pub fn layout(&self) -> Layout {
        layout_for(self.space(), &self.limits)
    }

    /// Concatenated head logits, `batch x layout.width`.
    pub fn logits(&self, obs: &Array2<f64>) -> Array2<f64> {
        let feats = self.backbone.forward(obs);
        let outs: Vec<Array2<f64>> = self.head_nets().iter().map(|h| h.forward(&feats)).collect();
        let views: Vec<_> = outs.iter().map(|a| a.view()).collect();
        ndarray::concatenate(ndarray::Axis(1), &views)
            .expect("same batch")
            .as_standard_layout()
            .into_owned()
    }

    pub fn value(&self, obs: &Observation) -> f64 {
        self.value_net.forward(&row(obs))[[0, 0]]
    }
}

pub(crate) fn row(obs: &Observation) -> Array2<f64> {
    Array2::from_shape_vec((1, obs.len()), obs.0.clone()).expect("1 x len")
}

pub fn layout_for(space: ActionSpaceKind, limits: &EnvLimits) -> Layout {
    match space {
        ActionSpaceKind::Hierarchical => {
            let (n, m) = (limits.max_loops, limits.tile_choices);
            let mut groups = vec![(0, 5)];
            groups.extend((0..n).map(|i| (5 + i * (m + 1), m + 1)));
            groups.push((5 + n * (m + 1), n));
            Layout {
                groups,
                width: 5 + n * (m + 1) + n,
            }
        }
        ActionSpaceKind::Simple => {
            let k = SimpleSpace::new(limits).len();
            Layout {
                groups: vec![(0, k)],
                width: k,
            }
        }
    }
}

/// The environment mask laid out like [`Layout`].
pub fn flat_mask(space: ActionSpaceKind, op: &LinalgOp, mask: &ActionMask, limits: &EnvLimits) -> Vec<bool> {
    match space {
        ActionSpaceKind::Hierarchical => {
            let mut v = mask.transform.to_vec();
            for r in &mask.tile_sizes {
                v.extend_from_slice(r);
            }
            v.extend_from_slice(&mask.interchange);
            v
        }
        ActionSpaceKind::Simple => SimpleSpace::new(limits).mask(op, mask, limits),
    }
}

/// Masked categorical distribution; masked entries get probability 0 and
/// log-probability `-inf`.
#[derive(Debug, Clone, PartialEq)]
pub struct Categorical {
    pub probs: Vec<f64>,
    pub log_probs: Vec<f64>,
}

impl Categorical {
    pub fn new(logits: &[f64], mask: &[bool]) -> Result<Self, AgentError> {
        let max = logits
            .iter()
            .zip(mask)
            .filter(|(_, &ok)| ok)
            .map(|(&l, _)| l)
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(AgentError::AllMasked);
        }
        let sum: f64 = logits
            .iter()
            .zip(mask)
            .filter(|(_, &ok)| ok)
            .map(|(&l, _)| (l - max).exp())
            .sum();
        let lse = max + sum.ln();
        let log_probs: Vec<f64> = logits
            .iter()
            .zip(mask)
            .map(|(&l, &ok)| if ok { l - lse } else { f64::NEG_INFINITY })
            .collect();
        let probs = log_probs.iter().map(|&lp| lp.exp()).collect();
        Ok(Categorical { probs, log_probs })
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn entropy(&self) -> f64 {
        self.probs
            .iter()
            .zip(&self.log_probs)
            .filter(|(_, &lp)| lp > f64::NEG_INFINITY)
            .map(|(&p, &lp)| -p * lp)
            .sum()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut last = 0;
        for (i, (&p, &lp)) in self.probs.iter().zip(&self.log_probs).enumerate() {
            if lp == f64::NEG_INFINITY {
                continue;
            }
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
        last
    }

    /// First most likely legal entry.
    pub fn argmax(&self) -> usize {
        let mut best = None;
        for (i, &lp) in self.log_probs.iter().enumerate() {
            if lp > f64::NEG_INFINITY && best.is_none_or(|b: usize| lp > self.log_probs[b]) {
                best = Some(i);
            }
        }
        best.unwrap_or(0)
    }
}

/// Per-group distributions for one state.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyDists {
    pub space: ActionSpaceKind,
    pub groups: Vec<Categorical>,
}

impl PolicyDists {
    pub fn transform(&self) -> &Categorical {
        &self.groups[0]
    }

    /// Tile distribution of loop `i` (hierarchical only).
    pub fn tile(&self, i: usize) -> &Categorical {
        &self.groups[1 + i]
    }

    pub fn interchange(&self) -> &Categorical {
        self.groups.last().expect("nonempty")
    }

    fn n_tile_groups(&self) -> usize {
        self.groups.len() - 2
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierarchicalSample {
    pub transform: usize,
    pub tile_choices: Option<Vec<usize>>,
    pub swap_index: Option<usize>,
    pub joint_logprob: f64,
    pub entropy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlatSample {
    pub index: usize,
    pub joint_logprob: f64,
    pub entropy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Sample {
    Hierarchical(HierarchicalSample),
    Flat(FlatSample),
}

impl Sample {
    pub fn joint_logprob(&self) -> f64 {
        match self {
            Sample::Hierarchical(h) => h.joint_logprob,
            Sample::Flat(f) => f.joint_logprob,
        }
    }

    pub fn entropy(&self) -> f64 {
        match self {
            Sample::Hierarchical(h) => h.entropy,
            Sample::Flat(f) => f.entropy,
        }
    }

    /// Chosen index per logit group; `None` for groups the sample did not use.
    pub fn group_choices(&self, layout: &Layout) -> Vec<Option<usize>> {
        match self {
            Sample::Flat(f) => vec![Some(f.index)],
            Sample::Hierarchical(h) => {
                let mut v = vec![None; layout.groups.len()];
                v[0] = Some(h.transform);
                if let Some(t) = &h.tile_choices {
                    for (i, &c) in t.iter().enumerate() {
                        v[1 + i] = Some(c);
                    }
                }
                if let Some(k) = h.swap_index {
                    *v.last_mut().expect("nonempty") = Some(k);
                }
                v
            }
        }
    }
}

pub fn forward_policy(params: &PolicyParams, obs: &Observation, mask: &[bool]) -> Result<PolicyDists, AgentError> {
    let layout = params.layout();
    if obs.len() != params.backbone.input_dim() {
        return Err(AgentError::LengthMismatch {
            what: "observation",
            expected: params.backbone.input_dim(),
            got: obs.len(),
        });
    }
    if mask.len() != layout.width {
        return Err(AgentError::LengthMismatch {
            what: "mask",
            expected: layout.width,
            got: mask.len(),
        });
    }
    let logits = params.logits(&row(obs));
    let logits = logits.row(0);
    let logits = logits.as_slice().expect("contiguous");
    let groups = layout
        .groups
        .iter()
        .map(|&(s, l)| Categorical::new(&logits[s..s + l], &mask[s..s + l]))
        .collect::<Result<_, _>>()?;
    Ok(PolicyDists {
        space: params.space(),
        groups,
    })
}

fn pick(dists: &PolicyDists, mut choose: impl FnMut(&Categorical) -> usize) -> Sample {
    match dists.space {
        ActionSpaceKind::Simple => {
            let d = &dists.groups[0];
            let index = choose(d);
            Sample::Flat(FlatSample {
                index,
                joint_logprob: d.log_probs[index],
                entropy: d.entropy(),
            })
        }
        ActionSpaceKind::Hierarchical => {
            let t = dists.transform();
            let transform = choose(t);
            let mut lp = t.log_probs[transform];
            let mut ent = t.entropy();
            let mut tile_choices = None;
            let mut swap_index = None;
            match TransformKind::from_index(transform) {
                Some(TransformKind::Tiling | TransformKind::Parallelization) => {
                    let picks: Vec<usize> = (0..dists.n_tile_groups())
                        .map(|i| {
                            let d = dists.tile(i);
                            let c = choose(d);
                            lp += d.log_probs[c];
                            ent += d.entropy();
                            c
                        })
                        .collect();
                    tile_choices = Some(picks);
                }
                Some(TransformKind::Interchange) => {
                    let d = dists.interchange();
                    let k = choose(d);
                    lp += d.log_probs[k];
                    ent += d.entropy();
                    swap_index = Some(k);
                }
                _ => {}
            }
            Sample::Hierarchical(HierarchicalSample {
                transform,
                tile_choices,
                swap_index,
                joint_logprob: lp,
                entropy: ent,
            })
        }
    }
}

pub fn sample_action<R: Rng + ?Sized>(dists: &PolicyDists, rng: &mut R) -> Sample {
    pick(dists, |d| d.sample(rng))
}

/// Most likely transform, then most likely parameters.
pub fn greedy_action(dists: &PolicyDists) -> Sample {
    pick(dists, Categorical::argmax)
}

/// Turns a sample into an environment action for `op`.
pub fn decode(sample: &Sample, op: &LinalgOp, limits: &EnvLimits) -> Result<Action, AgentError> {
    match sample {
        Sample::Flat(f) => Ok(SimpleSpace::new(limits).action(f.index, op)),
        Sample::Hierarchical(h) => {
            let kind = TransformKind::from_index(h.transform).ok_or(AgentError::BadSample("transform index"))?;
            let n = op.num_loops();
            Ok(match kind {
                TransformKind::Tiling | TransformKind::Parallelization => {
                    let choices = h.tile_choices.as_ref().ok_or(AgentError::BadSample("missing tile choices"))?;
                    let cands = tile_candidates(op, limits);
                    let sizes = (0..n)
                        .map(|i| cands[i].get(choices[i]).copied().unwrap_or(0))
                        .collect();
                    if kind == TransformKind::Tiling {
                        Action::Tiling { sizes }
                    } else {
                        Action::Parallelization { sizes }
                    }
                }
                TransformKind::Interchange => Action::Interchange {
                    k: h.swap_index.ok_or(AgentError::BadSample("missing swap index"))?,
                },
                TransformKind::Im2col => Action::Im2col,
                TransformKind::Vectorization => Action::Vectorization,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::HistoryTensor;
    use crate::ir::{build_operation, OpKind};
    use crate::transform::{compute_mask, Schedule};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> NetConfig {
        NetConfig {
            hidden: 16,
            backbone_layers: 2,
            head_hidden: 8,
            value_layers: 2,
            policy_out_gain: 1.0,
        }
    }

    fn setup(space: ActionSpaceKind, seed: u64) -> (PolicyParams, LinalgOp, Observation, Vec<bool>) {
        let lim = EnvLimits::default();
        let p = PolicyParams::new(lim, space, &small(), &mut ChaCha8Rng::seed_from_u64(seed));
        let op = build_operation(OpKind::Matmul, &[32, 64, 16], 7).unwrap();
        let obs = crate::features::extract(&op, &HistoryTensor::new(&lim), &lim).unwrap();
        let m = compute_mask(&op, &Schedule::default(), 0, &lim);
        let fm = flat_mask(space, &op, &m, &lim);
        (p, op, obs, fm)
    }

    #[test]
    fn zero_weights_give_uniform_transform() {
        let (mut p, _, obs, _) = setup(ActionSpaceKind::Hierarchical, 0);
        p.visit_mut(&mut |s| s.fill(0.0));
        let width = p.layout().width;
        let d = forward_policy(&p, &obs, &vec![true; width]).unwrap();
        assert_eq!(d.transform().probs, vec![0.2; 5]);
    }

    #[test]
    fn masked_entries_have_zero_probability() {
        let (p, _, obs, fm) = setup(ActionSpaceKind::Hierarchical, 3);
        let d = forward_policy(&p, &obs, &fm).unwrap();
        assert_eq!(d.transform().probs[TransformKind::Im2col.index()], 0.0);
        for (g, &(s, l)) in d.groups.iter().zip(&p.layout().groups) {
            assert!((g.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for j in 0..l {
                if !fm[s + j] {
                    assert_eq!(g.probs[j], 0.0);
                }
            }
        }
    }

    #[test]
    fn sample_logprob_bookkeeping() {
        let (p, op, obs, fm) = setup(ActionSpaceKind::Hierarchical, 5);
        let d = forward_policy(&p, &obs, &fm).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut seen = [false; 5];
        for _ in 0..400 {
            let Sample::Hierarchical(s) = sample_action(&d, &mut rng) else { panic!() };
            seen[s.transform] = true;
            let mut lp = d.transform().log_probs[s.transform];
            match TransformKind::from_index(s.transform).unwrap() {
                TransformKind::Tiling | TransformKind::Parallelization => {
                    let t = s.tile_choices.as_ref().unwrap();
                    assert_eq!(t.len(), 7);
                    assert!(s.swap_index.is_none());
                    lp += (0..7).map(|i| d.tile(i).log_probs[t[i]]).sum::<f64>();
                }
                TransformKind::Interchange => {
                    assert!(s.tile_choices.is_none());
                    lp += d.interchange().log_probs[s.swap_index.unwrap()];
                }
                _ => assert!(s.tile_choices.is_none() && s.swap_index.is_none()),
            }
            assert!((lp - s.joint_logprob).abs() < 1e-12);
            let a = decode(&Sample::Hierarchical(s), &op, &EnvLimits::default()).unwrap();
            let legal = crate::transform::apply_action(&op, &a, 7);
            assert!(legal.is_ok(), "{a:?}");
        }
        assert!(!seen[TransformKind::Im2col.index()]);
        assert!(seen.iter().filter(|&&b| b).count() == 4);
    }

    #[test]
    fn sampling_is_deterministic() {
        let (p, _, obs, fm) = setup(ActionSpaceKind::Hierarchical, 1);
        let d = forward_policy(&p, &obs, &fm).unwrap();
        let draw = |seed| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            (0..20).map(|_| sample_action(&d, &mut r)).collect::<Vec<_>>()
        };
        assert_eq!(draw(4), draw(4));
    }

    #[test]
    fn simple_space_flat_group() {
        let (p, op, obs, fm) = setup(ActionSpaceKind::Simple, 2);
        let d = forward_policy(&p, &obs, &fm).unwrap();
        assert_eq!(d.groups.len(), 1);
        let s = greedy_action(&d);
        assert_eq!(s.group_choices(&p.layout()).len(), 1);
        let a = decode(&s, &op, &EnvLimits::default()).unwrap();
        assert!(crate::transform::apply_action(&op, &a, 7).is_ok());
    }

    #[test]
    fn all_masked_is_an_error() {
        assert!(matches!(Categorical::new(&[1.0, 2.0], &[false, false]), Err(AgentError::AllMasked)));
    }

    #[test]
    fn default_network_shape() {
        let lim = EnvLimits::default();
        let p = PolicyParams::new(
            lim,
            ActionSpaceKind::Hierarchical,
            &NetConfig::default(),
            &mut ChaCha8Rng::seed_from_u64(0),
        );
        assert_eq!(p.backbone.layers.len(), 4);
        assert_eq!(p.backbone.input_dim(), 290);
        let h = p.head_nets();
        assert_eq!(h[0].output_dim(), 5);
        assert_eq!(h[1].output_dim(), 7 * 6);
        assert_eq!(h[1].layers[0].output_dim(), 512);
        assert_eq!(h[2].output_dim(), 7);
        assert_eq!(p.value_net.layers.len(), 5);
        assert_eq!(p.value_net.output_dim(), 1);
    }
}
