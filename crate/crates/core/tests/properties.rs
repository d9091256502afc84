mod common;

use optgym::agent::nn::{Optimizer, OptimizerKind};
use optgym::agent::policy::{
    flat_mask, forward_policy, sample_action, ActionSpaceKind, NetConfig, PolicyParams, Sample,
};
use optgym::agent::ppo::{gae, ppo_update, PPOConfig, RolloutBatch};
use optgym::cost::{analytic_cost, CostConfig};
use optgym::dataset::{default_ranges, generate_dataset, uniform_ranges, DimRange};
use optgym::env::{Backend, Env, EnvError, RewardMode};
use optgym::features::{extract, EnvLimits, HistoryTensor};
use optgym::ir::{build_operation, OpKind};
use optgym::search::{search, SearchConstraints};
use optgym::transform::{apply_interchange, apply_tiling, apply_vectorization, compute_mask, Schedule};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn dataset(seed: u64, per_kind: usize) -> Vec<optgym::LinalgOp> {
    let counts = OpKind::ALL.iter().map(|&k| (k, per_kind)).collect();
    generate_dataset(seed, &counts, &default_ranges(), 7)
}

fn tiny_net() -> NetConfig {
    NetConfig {
        hidden: 12,
        backbone_layers: 1,
        head_hidden: 6,
        value_layers: 1,
        policy_out_gain: 1.0,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn generated_accesses_are_well_formed(seed in any::<u64>()) {
        for op in dataset(seed, 4) {
            let n = op.num_loops();
            for m in op.accesses() {
                prop_assert!(m.dims() <= 4);
                prop_assert!(m.rows().iter().all(|r| r.len() == n + 1));
            }
            prop_assert_eq!(build_operation(op.kind, &op.shape, 7).unwrap(), op);
        }
    }

    #[test]
    fn observations_have_fixed_length_and_are_nonnegative(seed in any::<u64>(), steps in 0usize..7) {
        let lim = EnvLimits::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for op in dataset(seed, 2) {
            let mut env = Env::new(lim, RewardMode::Final, Backend::default());
            let mut r = env.reset(op).unwrap();
            for _ in 0..steps {
                prop_assert_eq!(r.observation.len(), lim.observation_len());
                prop_assert!(r.observation.0.iter().all(|x| x.is_finite() && *x >= 0.0));
                if r.done { break; }
                let cur = env.current_op().unwrap().clone();
                let a = common::random_legal_action(&cur, &r.mask, &lim, &mut rng);
                r = env.step(&a).unwrap();
            }
            prop_assert_eq!(r.observation.len(), lim.observation_len());
        }
    }

    #[test]
    fn distinct_access_structure_gives_distinct_observations(seed in any::<u64>()) {
        let lim = EnvLimits::default();
        let h = HistoryTensor::new(&lim);
        let ops = dataset(seed, 3);
        let head = lim.max_loops;
        let len = lim.max_loads * lim.max_dims * (lim.max_loops + 1) + lim.max_dims * (lim.max_loops + 1);
        for a in &ops {
            for b in &ops {
                if a.loads != b.loads || a.store != b.store {
                    let (x, y) = (extract(a, &h, &lim).unwrap(), extract(b, &h, &lim).unwrap());
                    prop_assert_ne!(&x.0[head..head + len], &y.0[head..head + len]);
                }
            }
        }
    }

    #[test]
    fn double_interchange_is_identity(seed in any::<u64>()) {
        for op in dataset(seed, 2) {
            for k in 0..op.num_loops().saturating_sub(1) {
                let twice = apply_interchange(&apply_interchange(&op, k).unwrap(), k).unwrap();
                prop_assert_eq!(&twice, &op);
            }
        }
    }

    #[test]
    fn cost_model_properties(seed in any::<u64>()) {
        let cfg = CostConfig::default();
        for op in dataset(seed, 3) {
            let c = analytic_cost(&op, &cfg);
            prop_assert_eq!(c, analytic_cost(&op, &cfg));
            prop_assert!(c.total > 0.0);
            prop_assert!(analytic_cost(&apply_vectorization(&op).unwrap(), &cfg).total <= c.total);
            let zeros = vec![0; op.num_loops()];
            prop_assert_eq!(analytic_cost(&apply_tiling(&op, &zeros, 7).unwrap(), &cfg), c);
            let id = apply_interchange(&op, op.num_loops() - 1).unwrap();
            prop_assert_eq!(analytic_cost(&id, &cfg), c);
        }
    }

    #[test]
    fn episodes_respect_env_invariants(seed in any::<u64>()) {
        let lim = EnvLimits::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for op in dataset(seed, 2) {
            let mut env = Env::new(lim, RewardMode::Immediate, Backend::default());
            let mut r = env.reset(op).unwrap();
            let mut steps = 0;
            let mut schedule = Schedule::default();
            while !r.done {
                let cur = env.current_op().unwrap().clone();
                let a = common::random_legal_action(&cur, &r.mask, &lim, &mut rng);
                schedule.push(a.clone());
                r = env.step(&a).unwrap();
                steps += 1;
                prop_assert!(r.reward.is_finite());
                if matches!(a, optgym::Action::Vectorization) {
                    prop_assert!(r.done);
                }
            }
            prop_assert!(steps <= lim.max_schedule_len);
            prop_assert!(schedule.validate().is_ok());
            prop_assert!(matches!(env.step(&optgym::Action::Vectorization), Err(EnvError::EpisodeDone)));
        }
    }

    #[test]
    fn masked_entries_are_never_sampled(seed in any::<u64>()) {
        let lim = EnvLimits::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for space in [ActionSpaceKind::Hierarchical, ActionSpaceKind::Simple] {
            let params = PolicyParams::new(lim, space, &tiny_net(), &mut rng);
            let layout = params.layout();
            for op in dataset(seed, 1) {
                let obs = extract(&op, &HistoryTensor::new(&lim), &lim).unwrap();
                let m = compute_mask(&op, &Schedule::default(), 0, &lim);
                let fm = flat_mask(space, &op, &m, &lim);
                let d = forward_policy(&params, &obs, &fm).unwrap();
                for (g, &(s, l)) in d.groups.iter().zip(&layout.groups) {
                    prop_assert!((g.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                    for j in 0..l {
                        if !fm[s + j] {
                            prop_assert_eq!(g.probs[j], 0.0);
                        }
                    }
                }
                for _ in 0..20 {
                    let smp = sample_action(&d, &mut rng);
                    let choices = smp.group_choices(&layout);
                    let mut p = 1.0;
                    for (g, c) in choices.iter().enumerate() {
                        if let Some(c) = c {
                            let (s, _) = layout.groups[g];
                            prop_assert!(fm[s + c]);
                            p *= d.groups[g].probs[*c];
                        }
                    }
                    prop_assert!((p.ln() - smp.joint_logprob()).abs() <= 1e-10);
                    if let Sample::Hierarchical(h) = &smp {
                        prop_assert!(h.tile_choices.is_none() || h.swap_index.is_none());
                    }
                }
            }
        }
    }

    #[test]
    fn gae_lambda_one_is_monte_carlo(
        rewards in prop::collection::vec(-3.0f64..3.0, 1..12),
        seed in any::<u64>(),
        gamma in 0.5f64..1.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let values: Vec<f64> = rewards.iter().map(|_| rand::Rng::random_range(&mut rng, -2.0..2.0)).collect();
        let (adv, ret) = gae(&rewards, &values, 0.0, gamma, 1.0).unwrap();
        for t in 0..rewards.len() {
            let mc: f64 = rewards[t..].iter().enumerate().map(|(l, r)| gamma.powi(l as i32) * r).sum();
            prop_assert!((adv[t] - (mc - values[t])).abs() < 1e-9);
            prop_assert!((ret[t] - mc).abs() < 1e-9);
        }
    }

    #[test]
    fn search_trace_is_monotone(seed in any::<u64>()) {
        let ranges = uniform_ranges(DimRange::new(4, 64));
        let counts = [(OpKind::Matmul, 1), (OpKind::Add, 1), (OpKind::Conv2D, 1)].into_iter().collect();
        for op in generate_dataset(seed, &counts, &ranges, 7) {
            let c = SearchConstraints { budget: Some(400), ..Default::default() };
            let r = search(&op, &c, &CostConfig::default());
            prop_assert!(r.speedup >= 1.0);
            prop_assert!(r.trace.records.windows(2).all(|w| w[1].best_so_far <= w[0].best_so_far));
            prop_assert_eq!(&r, &search(&op, &c, &CostConfig::default()));
        }
    }
}

#[test]
fn zero_advantage_update_leaves_policy_unchanged() {
    let lim = EnvLimits::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut params = PolicyParams::new(lim, ActionSpaceKind::Hierarchical, &tiny_net(), &mut rng);
    let layout = params.layout();
    let mut batch = RolloutBatch::default();
    for op in dataset(5, 2).into_iter().take(8) {
        let obs = extract(&op, &HistoryTensor::new(&lim), &lim).unwrap();
        let fm = flat_mask(
            ActionSpaceKind::Hierarchical,
            &op,
            &compute_mask(&op, &Schedule::default(), 0, &lim),
            &lim,
        );
        let d = forward_policy(&params, &obs, &fm).unwrap();
        let s = sample_action(&d, &mut rng);
        batch.actions.push(s.group_choices(&layout));
        batch.logprobs.push(s.joint_logprob() - 0.3);
        batch.observations.push(obs);
        batch.masks.push(fm);
        batch.rewards.push(1.0);
        batch.values.push(0.0);
        batch.advantages.push(0.0);
        batch.returns.push(2.0);
    }
    let cfg = PPOConfig {
        batch: batch.len(),
        entropy_coef: 0.0,
        value_coef: 0.0,
        ..Default::default()
    };
    let before = params.clone();
    for kind in [OptimizerKind::Adam, OptimizerKind::Sgd] {
        ppo_update(&mut params, &mut Optimizer::new(kind), &batch, &cfg).unwrap();
        assert_eq!(params, before);
    }
}
