//! Deterministic cache-aware cost model.
//!
//! Compute is the scalar op count divided by the parallel and SIMD factors.
//! Memory is a footprint estimate: walking the nest from the outermost loop,
//! the first band whose combined line footprint fits in cache is charged once
//! per iteration of the loops outside it.

use serde::{Deserialize, Serialize};

use crate::ir::{trip_count, AccessMatrix, LinalgOp, LoopDim};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostConfig {
    pub cache_bytes: u64,
    pub line_bytes: u64,
    pub cores: u64,
    /// SIMD lanes
    pub vec_width: u64,
    /// cost units per line miss
    pub miss_penalty: f64,
    /// cost units per scalar op
    pub flop_cost: f64,
    /// cost units per byte written when materializing the im2col buffer
    pub im2col_write_cost: f64,
}

impl Default for CostConfig {
    fn default() -> Self {
        CostConfig {
            cache_bytes: 32 * 1024,
            line_bytes: 64,
            cores: 8,
            vec_width: 8,
            miss_penalty: 8.0,
            flop_cost: 1.0,
            im2col_write_cost: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub total: f64,
    pub compute_term: f64,
    pub memory_term: f64,
    pub timed_out: bool,
}

impl CostReport {
    pub fn new(compute_term: f64, memory_term: f64) -> Self {
        CostReport {
            total: compute_term + memory_term,
            compute_term,
            memory_term,
            timed_out: false,
        }
    }
}

pub(crate) fn parallel_factor(op: &LinalgOp, cfg: &CostConfig) -> u64 {
    let par: u64 = op
        .loops
        .iter()
        .filter(|l| l.parallel)
        .map(LoopDim::trip_count)
        .product();
    par.clamp(1, cfg.cores.max(1))
}

pub(crate) fn vector_factor(op: &LinalgOp, cfg: &CostConfig) -> u64 {
    let Some(inner) = op.loops.last() else { return 1 };
    if !inner.vectorized {
        return 1;
    }
    let col = op.num_loops() - 1;
    let unit_stride = op.accesses().all(|m| m.column(col).all(|c| c.abs() <= 1));
    if unit_stride {
        cfg.vec_width.max(1)
    } else {
        1
    }
}

/// Distinct subscripts per array dimension while loops `band..` vary.
fn band_extents(m: &AccessMatrix, loops: &[LoopDim], band: usize) -> Vec<u64> {
    m.rows()
        .iter()
        .map(|row| {
            let (lo, hi) = crate::ir::subscript_range(row, loops);
            let extent = (hi - lo + 1) as u64;
            let span: u64 = loops[band..]
                .iter()
                .zip(&row[band..])
                .map(|(l, &c)| c.unsigned_abs() * (l.last_value() - l.lower) as u64)
                .sum();
            (span + 1).min(extent)
        })
        .collect()
}

/// Cache lines touched by one access over the band; the last array
/// dimension is the contiguous one.
fn band_lines(m: &AccessMatrix, loops: &[LoopDim], band: usize, elem_bytes: u64, line_bytes: u64) -> u64 {
    let ext = band_extents(m, loops, band);
    match ext.split_last() {
        None => 1,
        Some((&last, outer)) => {
            let rows: u64 = outer.iter().product();
            rows * (last * elem_bytes).div_ceil(line_bytes)
        }
    }
}

/// Estimated line misses of the whole nest.
pub fn estimated_misses(op: &LinalgOp, cfg: &CostConfig) -> f64 {
    let loops = &op.loops;
    let line = cfg.line_bytes.max(1);
    let mut outer_trips = 1.0;
    for band in 0..=loops.len() {
        let lines: u64 = op
            .accesses()
            .map(|m| band_lines(m, loops, band, op.elem_bytes, line))
            .sum();
        if lines * line <= cfg.cache_bytes || band == loops.len() {
            return outer_trips * lines as f64;
        }
        outer_trips *= loops[band].trip_count() as f64;
    }
    unreachable!()
}

pub fn analytic_cost(op: &LinalgOp, cfg: &CostConfig) -> CostReport {
    let work = trip_count(op) as f64 * op.counts.total() as f64 * cfg.flop_cost;
    let compute = work / (parallel_factor(op, cfg) * vector_factor(op, cfg)) as f64;
    let surcharge = op.im2col.map_or(0.0, |i| {
        i.buffer_elems as f64 * op.elem_bytes as f64 * cfg.im2col_write_cost
    });
    let memory = estimated_misses(op, cfg) * cfg.miss_penalty + surcharge;
    CostReport::new(compute, memory)
}
