//! Exhaustive search baseline.
//!
//! Candidates follow one template: optional im2col (convolutions only), at
//! most one adjacent interchange, exactly one tiling or parallelization, and
//! optional vectorization. The empty schedule is always evaluated first.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost::{analytic_cost, CostConfig};
use crate::env::run_schedule;
use crate::ir::{LinalgOp, OpKind};
use crate::transform::{apply_im2col, apply_interchange, Action, Schedule, TILE_POOL};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConstraints {
    pub max_tile: u64,
    pub min_tiled_loops: usize,
    pub max_schedule_len: usize,
    /// Stop after this many evaluated schedules.
    pub budget: Option<usize>,
    pub max_loops: usize,
}

impl Default for SearchConstraints {
    fn default() -> Self {
        SearchConstraints {
            max_tile: 64,
            min_tiled_loops: 2,
            max_schedule_len: 7,
            budget: None,
            max_loops: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub schedule: Schedule,
    pub cost: f64,
    pub best_so_far: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SearchTrace {
    pub records: Vec<TraceRecord>,
}

impl SearchTrace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// CSV with columns `schedule_index,cost,best_so_far,schedule_json`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<(), csv::Error> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["schedule_index", "cost", "best_so_far", "schedule_json"])?;
        for (i, r) in self.records.iter().enumerate() {
            let json = serde_json::to_string(&r.schedule).expect("schedule serializes");
            out.write_record([i.to_string(), r.cost.to_string(), r.best_so_far.to_string(), json])?;
        }
        out.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub best: Schedule,
    pub best_cost: f64,
    pub base_cost: f64,
    pub speedup: f64,
    pub trace: SearchTrace,
}

/// Per-loop tile vectors in lexicographic order of candidate index.
fn tile_vectors(op: &LinalgOp, c: &SearchConstraints) -> Vec<Vec<u64>> {
    let options: Vec<Vec<u64>> = op
        .loops
        .iter()
        .map(|l| {
            let trip = l.trip_count();
            let mut v = vec![0];
            v.extend(
                TILE_POOL
                    .iter()
                    .copied()
                    .filter(|&s| s <= c.max_tile && s <= trip && trip % s == 0),
            );
            v
        })
        .collect();
    let n = options.len();
    let mut out = Vec::new();
    if n == 0 {
        return out;
    }
    let mut idx = vec![0usize; n];
    loop {
        let sizes: Vec<u64> = idx.iter().zip(&options).map(|(&i, o)| o[i]).collect();
        let tiled = sizes.iter().filter(|&&s| s != 0).count();
        if tiled >= c.min_tiled_loops && n + tiled <= c.max_loops {
            out.push(sizes);
        }
        let mut d = n;
        loop {
            if d == 0 {
                return out;
            }
            d -= 1;
            idx[d] += 1;
            if idx[d] < options[d].len() {
                break;
            }
            idx[d] = 0;
        }
    }
}

/// All candidate schedules, in a fixed order.
pub fn enumerate_schedules(op: &LinalgOp, c: &SearchConstraints) -> impl Iterator<Item = Schedule> {
    let mut out = vec![Schedule::default()];
    let im2col_options: &[bool] = if op.kind == OpKind::Conv2D && op.im2col.is_none() {
        &[false, true]
    } else {
        &[false]
    };
    for &im2col in im2col_options {
        let Ok(op1) = (if im2col { apply_im2col(op) } else { Ok(op.clone()) }) else {
            continue;
        };
        let n1 = op1.num_loops();
        let swaps = std::iter::once(None).chain((0..n1.saturating_sub(1)).map(Some));
        for swap in swaps {
            let Ok(op2) = (match swap {
                Some(k) => apply_interchange(&op1, k),
                None => Ok(op1.clone()),
            }) else {
                continue;
            };
            let vectors = tile_vectors(&op2, c);
            for parallel in [false, true] {
                for sizes in &vectors {
                    for vectorize in [false, true] {
                        let mut a = Vec::new();
                        if im2col {
                            a.push(Action::Im2col);
                        }
                        if let Some(k) = swap {
                            a.push(Action::Interchange { k });
                        }
                        a.push(if parallel {
                            Action::Parallelization { sizes: sizes.clone() }
                        } else {
                            Action::Tiling { sizes: sizes.clone() }
                        });
                        if vectorize {
                            a.push(Action::Vectorization);
                        }
                        if a.len() <= c.max_schedule_len {
                            out.push(Schedule::new(a));
                        }
                    }
                }
            }
        }
    }
    out.into_iter()
}

/// Evaluates every candidate (up to the budget) and keeps the cheapest,
/// preferring the earliest on ties.
pub fn search(op: &LinalgOp, c: &SearchConstraints, cfg: &CostConfig) -> SearchResult {
    let base_cost = analytic_cost(op, cfg).total;
    let candidates: Vec<Schedule> = enumerate_schedules(op, c).take(c.budget.unwrap_or(usize::MAX)).collect();
    let costs: Vec<Option<f64>> = candidates
        .par_iter()
        .map(|s| match run_schedule(op, s, cfg, c.max_loops) {
            Ok((out, _)) => Some(analytic_cost(&out, cfg).total),
            Err(e) => {
                log::warn!("skipping candidate {s:?}: {e}");
                None
            }
        })
        .collect();

    let mut trace = SearchTrace::default();
    let mut best = Schedule::default();
    let mut best_cost = base_cost;
    let mut seen = false;
    for (s, cost) in candidates.into_iter().zip(costs) {
        let Some(cost) = cost else { continue };
        if !seen || cost < best_cost {
            best_cost = cost;
            best = s.clone();
            seen = true;
        }
        trace.records.push(TraceRecord {
            schedule: s,
            cost,
            best_so_far: best_cost,
        });
    }
    SearchResult {
        best,
        best_cost,
        base_cost,
        speedup: base_cost / best_cost,
        trace,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::build_operation;
    use crate::transform::TransformKind;

    fn mm(n: usize) -> LinalgOp {
        build_operation(OpKind::Matmul, &[n, n, n], 7).unwrap()
    }

    #[test]
    fn tile_vector_count_by_inclusion_exclusion() {
        let c = SearchConstraints {
            max_tile: 4,
            ..Default::default()
        };
        let v = tile_vectors(&mm(4), &c);
        assert_eq!(v.len(), 27 - (1 + 3 * 2));
        assert_eq!(v[0], vec![0, 2, 2]);
        let schedules: Vec<_> = enumerate_schedules(&mm(4), &c).collect();
        let plain_tiling = schedules
            .iter()
            .filter(|s| s.len() == 1 && s.actions[0].kind() == TransformKind::Tiling)
            .count();
        assert_eq!(plain_tiling, 20);
        // empty + (1 + 2 swaps) x 2 kinds x 20 vectors x 2 vectorize choices
        assert_eq!(schedules.len(), 1 + 3 * 2 * 20 * 2);
    }

    #[test]
    fn unsatisfiable_tiling_constraint() {
        let op = build_operation(OpKind::Add, &[8, 8], 7).unwrap();
        let c = SearchConstraints {
            min_tiled_loops: 3,
            ..Default::default()
        };
        let all: Vec<_> = enumerate_schedules(&op, &c).collect();
        assert_eq!(all, vec![Schedule::default()]);
    }

    #[test]
    fn im2col_only_for_conv() {
        let c = SearchConstraints::default();
        assert!(enumerate_schedules(&mm(8), &c).all(|s| !s.contains(TransformKind::Im2col)));
        let conv = build_operation(OpKind::Conv2D, &[1, 6, 6, 4, 4, 3, 3], 7).unwrap();
        assert!(enumerate_schedules(&conv, &c).any(|s| s.contains(TransformKind::Im2col)));
        assert!(enumerate_schedules(&conv, &c).all(|s| s.validate().is_ok()));
    }

    #[test]
    fn budget_and_empty() {
        let c = SearchConstraints {
            budget: Some(1),
            ..Default::default()
        };
        let r = search(&mm(64), &c, &CostConfig::default());
        assert_eq!(r.trace.len(), 1);
        assert_eq!(r.best, Schedule::default());
        assert_eq!(r.speedup, 1.0);
    }

    #[test]
    fn beats_reference_schedule() {
        let cfg = CostConfig::default();
        let r = search(&mm(64), &SearchConstraints::default(), &cfg);
        let reference = Schedule::new(vec![Action::Tiling { sizes: vec![32, 32, 32] }, Action::Vectorization]);
        let (_, s) = run_schedule(&mm(64), &reference, &cfg, 7).unwrap();
        assert!(r.speedup >= s && r.speedup >= 1.0);
        assert!(r.trace.records.windows(2).all(|w| w[1].best_so_far <= w[0].best_so_far));
        assert_eq!(r, search(&mm(64), &SearchConstraints::default(), &cfg));
    }

    #[test]
    fn csv_shape() {
        let c = SearchConstraints {
            budget: Some(3),
            ..Default::default()
        };
        let r = search(&mm(16), &c, &CostConfig::default());
        let mut buf = Vec::new();
        r.trace.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut rd = csv::Reader::from_reader(text.as_bytes());
        let rows: Vec<csv::StringRecord> = rd.records().map(Result::unwrap).collect();
        assert_eq!(rows.len(), 3);
        let s: Schedule = serde_json::from_str(&rows[1][3]).unwrap();
        assert_eq!(s, r.trace.records[1].schedule);
    }
}
