//! Greedy policy evaluation against the search baseline.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::agent::policy::PolicyParams;
use crate::agent::rollout::{run_episode, Selection};
use crate::agent::AgentError;
use crate::cost::{analytic_cost, CostConfig};
use crate::env::{Backend, Env, RewardMode};
use crate::ir::{LinalgOp, OpKind};
use crate::search::{search, SearchConstraints};
use crate::transform::Schedule;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub op_id: usize,
    pub kind: OpKind,
    pub base_cost: f64,
    pub rl_cost: f64,
    pub rl_speedup: f64,
    pub baseline_cost: f64,
    pub baseline_speedup: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub op_id: usize,
    pub searcher: String,
    pub schedules: usize,
    pub best_speedup: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub ops: usize,
    pub geomean_ratio: f64,
    pub geomean_rl_speedup: f64,
    pub geomean_baseline_speedup: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub rl_schedules: Vec<Schedule>,
    pub baseline_schedules: Vec<Schedule>,
    pub summary: EvalSummary,
    pub curves: Vec<CurvePoint>,
}

/// `exp(mean(ln x))`; 1.0 for an empty slice.
pub fn geomean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 1.0;
    }
    (xs.iter().map(|x| x.ln()).sum::<f64>() / xs.len() as f64).exp()
}

fn analytic_env(params: &PolicyParams, cfg: &CostConfig) -> Env {
    Env::new(params.limits, RewardMode::Final, Backend::Analytic(*cfg))
}

/// Schedule picked by always taking the most likely action, with its cost.
pub fn greedy_schedule(params: &PolicyParams, op: &LinalgOp, cfg: &CostConfig) -> Result<(Schedule, f64), AgentError> {
    let mut env = analytic_env(params, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let ep = run_episode(&mut env, params, op, 0, Selection::Greedy, 1.0, 1.0, &mut rng)?;
    let s = ep.summary.expect("finished episode");
    let cost = s.final_cost.unwrap_or(f64::INFINITY);
    Ok((s.schedule, cost))
}

/// Best speedup after each of `count` sampled episodes.
pub fn sampled_curve(
    params: &PolicyParams,
    op: &LinalgOp,
    cfg: &CostConfig,
    count: usize,
    seed: u64,
) -> Result<Vec<f64>, AgentError> {
    let mut env = analytic_env(params, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = analytic_cost(op, cfg).total;
    let mut best = 0.0f64;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let ep = run_episode(&mut env, params, op, 0, Selection::Sample, 1.0, 1.0, &mut rng)?;
        if let Some(c) = ep.summary.and_then(|s| s.final_cost) {
            best = best.max(base / c);
        }
        out.push(best);
    }
    Ok(out)
}

/// Best speedup after each of the first `count` baseline evaluations.
pub fn baseline_curve(op: &LinalgOp, constraints: &SearchConstraints, cfg: &CostConfig, count: usize) -> Vec<f64> {
    let c = SearchConstraints {
        budget: Some(count),
        ..*constraints
    };
    let r = search(op, &c, cfg);
    r.trace.records.iter().map(|t| r.base_cost / t.best_so_far).collect()
}

/// Greedy RL schedule vs exhaustive search for every op. `curve_len > 0`
/// also records cumulative-best curves for both searchers.
pub fn evaluate(
    params: &PolicyParams,
    ops: &[LinalgOp],
    cfg: &CostConfig,
    constraints: &SearchConstraints,
    curve_len: usize,
    seed: u64,
) -> Result<EvalReport, AgentError> {
    type PerOp = (EvalRow, Schedule, Schedule, Vec<CurvePoint>);
    let per_op: Vec<PerOp> = ops
        .par_iter()
        .enumerate()
        .map(|(op_id, op)| -> Result<PerOp, AgentError> {
            let base_cost = analytic_cost(op, cfg).total;
            let (rl_sched, rl_cost) = greedy_schedule(params, op, cfg)?;
            let b = search(op, constraints, cfg);
            let rl_speedup = base_cost / rl_cost;
            let row = EvalRow {
                op_id,
                kind: op.kind,
                base_cost,
                rl_cost,
                rl_speedup,
                baseline_cost: b.best_cost,
                baseline_speedup: b.speedup,
                ratio: rl_speedup / b.speedup,
            };
            let mut curves = Vec::new();
            if curve_len > 0 {
                let rl = sampled_curve(params, op, cfg, curve_len, seed.wrapping_add(op_id as u64))?;
                for (i, s) in rl.into_iter().enumerate() {
                    curves.push(CurvePoint {
                        op_id,
                        searcher: "rl".into(),
                        schedules: i + 1,
                        best_speedup: s,
                    });
                }
                for (i, r) in b.trace.records.iter().take(curve_len).enumerate() {
                    curves.push(CurvePoint {
                        op_id,
                        searcher: "baseline".into(),
                        schedules: i + 1,
                        best_speedup: b.base_cost / r.best_so_far,
                    });
                }
            }
            Ok((row, rl_sched, b.best, curves))
        })
        .collect::<Result<_, _>>()?;

    let mut rows = Vec::new();
    let mut rl_schedules = Vec::new();
    let mut baseline_schedules = Vec::new();
    let mut curves = Vec::new();
    for (r, a, b, c) in per_op {
        rows.push(r);
        rl_schedules.push(a);
        baseline_schedules.push(b);
        curves.extend(c);
    }
    let col = |f: fn(&EvalRow) -> f64| rows.iter().map(f).collect::<Vec<_>>();
    let summary = EvalSummary {
        ops: rows.len(),
        geomean_ratio: geomean(&col(|r| r.ratio)),
        geomean_rl_speedup: geomean(&col(|r| r.rl_speedup)),
        geomean_baseline_speedup: geomean(&col(|r| r.baseline_speedup)),
    };
    Ok(EvalReport {
        rows,
        rl_schedules,
        baseline_schedules,
        summary,
        curves,
    })
}

pub fn write_rows_csv<W: Write>(rows: &[EvalRow], w: W) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_curves_csv<W: Write>(points: &[CurvePoint], w: W) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(w);
    for p in points {
        out.serialize(p)?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::agent::policy::{ActionSpaceKind, NetConfig};
    use crate::features::EnvLimits;
    use crate::ir::build_operation;

    fn tiny() -> PolicyParams {
        let net = NetConfig {
            hidden: 16,
            backbone_layers: 1,
            head_hidden: 8,
            value_layers: 1,
            policy_out_gain: 1.0,
        };
        PolicyParams::new(
            EnvLimits::default(),
            ActionSpaceKind::Hierarchical,
            &net,
            &mut ChaCha8Rng::seed_from_u64(1),
        )
    }

    #[test]
    fn geomean_basics() {
        assert_eq!(geomean(&[]), 1.0);
        assert!((geomean(&[2.0, 8.0]) - 4.0).abs() < 1e-12);
    }

    #[test]
    fn untrained_report_is_well_formed() {
        let ops = vec![
            build_operation(OpKind::Matmul, &[16, 32, 16], 7).unwrap(),
            build_operation(OpKind::Relu, &[8, 16], 7).unwrap(),
        ];
        let cfg = CostConfig::default();
        let r = evaluate(&tiny(), &ops, &cfg, &SearchConstraints::default(), 5, 0).unwrap();
        assert_eq!(r.rows.len(), 2);
        for row in &r.rows {
            assert!(row.rl_speedup > 0.0 && row.baseline_speedup >= 1.0);
            assert!((row.ratio - row.rl_speedup / row.baseline_speedup).abs() < 1e-12);
        }
        let g = (r.rows.iter().map(|x| x.ratio.ln()).sum::<f64>() / 2.0).exp();
        assert!((r.summary.geomean_ratio - g).abs() < 1e-12);
        assert_eq!(r.curves.len(), 2 * 10);
        assert_eq!(r, evaluate(&tiny(), &ops, &cfg, &SearchConstraints::default(), 5, 0).unwrap());

        let mut buf = Vec::new();
        write_rows_csv(&r.rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("op_id,kind,base_cost,rl_cost,rl_speedup,baseline_cost,baseline_speedup,ratio"));
        let back: Vec<EvalRow> = csv::Reader::from_reader(text.as_bytes())
            .deserialize()
            .map(Result::unwrap)
            .collect();
        assert_eq!(back, r.rows);
    }

    #[test]
    fn curves_are_monotone() {
        let op = build_operation(OpKind::Matmul, &[32, 32, 32], 7).unwrap();
        let cfg = CostConfig::default();
        let rl = sampled_curve(&tiny(), &op, &cfg, 10, 3).unwrap();
        assert!(rl.windows(2).all(|w| w[1] >= w[0]));
        let b = baseline_curve(&op, &SearchConstraints::default(), &cfg, 10);
        assert_eq!(b.len(), 10);
        assert_eq!(b[0], 1.0);
        assert!(b.windows(2).all(|w| w[1] >= w[0]));
    }
}
