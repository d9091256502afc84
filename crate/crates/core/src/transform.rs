//! Loop transformations, their legality rules and the per-state action mask.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::EnvLimits;
use crate::ir::{conv_gemm_dims, AccessMatrix, Im2colInfo, LinalgOp, LoopDim, MathOpCounts, OpKind};

/// Power-of-two tile sizes considered by both the agent and the baseline.
pub const TILE_POOL: [u64; 8] = [2, 4, 8, 16, 32, 64, 128, 256];

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TransformError {
    #[error("tile size {size} does not divide trip count {trip} of loop {loop_index}")]
    NotDivisor { loop_index: usize, size: u64, trip: u64 },
    #[error("tiling would create {loops} loops, limit is {max}")]
    LoopBudgetExceeded { loops: usize, max: usize },
    #[error("expected {expected} tile sizes, got {got}")]
    SizeArity { expected: usize, got: usize },
    #[error("operation already has a parallel loop")]
    AlreadyParallelized,
    #[error("interchange index {index} out of range for {loops} loops")]
    IndexOutOfRange { index: usize, loops: usize },
    #[error("im2col only applies to convolutions, got {0}")]
    NotConvolution(OpKind),
    #[error("im2col already applied")]
    AlreadyApplied,
    #[error("operation already vectorized")]
    AlreadyVectorized,
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
}

/// The five transformation kinds, in head order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TransformKind {
    Tiling = 0,
    Parallelization = 1,
    Interchange = 2,
    Im2col = 3,
    Vectorization = 4,
}

impl TransformKind {
    pub const ALL: [TransformKind; 5] = [
        TransformKind::Tiling,
        TransformKind::Parallelization,
        TransformKind::Interchange,
        TransformKind::Im2col,
        TransformKind::Vectorization,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

/// One transformation with its parameters.
///
/// Tile sizes are indexed by current loop position; `0` leaves a loop alone.
/// Interchange `k < n-1` swaps loops `k` and `k+1`; `k = n-1` is the identity.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "t")]
pub enum Action {
    Tiling { sizes: Vec<u64> },
    Parallelization { sizes: Vec<u64> },
    Interchange { k: usize },
    Im2col,
    Vectorization,
}

impl Action {
    pub fn kind(&self) -> TransformKind {
        match self {
            Action::Tiling { .. } => TransformKind::Tiling,
            Action::Parallelization { .. } => TransformKind::Parallelization,
            Action::Interchange { .. } => TransformKind::Interchange,
            Action::Im2col => TransformKind::Im2col,
            Action::Vectorization => TransformKind::Vectorization,
        }
    }
}

/// Ordered list of applied actions.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Schedule {
    pub actions: Vec<Action>,
}

impl Schedule {
    pub fn new(actions: Vec<Action>) -> Self {
        Schedule { actions }
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn push(&mut self, a: Action) {
        self.actions.push(a);
    }

    pub fn contains(&self, kind: TransformKind) -> bool {
        self.actions.iter().any(|a| a.kind() == kind)
    }

    /// At most one parallelization; vectorization at most once and last.
    pub fn validate(&self) -> Result<(), TransformError> {
        let count = |k| self.actions.iter().filter(|a| a.kind() == k).count();
        if count(TransformKind::Parallelization) > 1 {
            return Err(TransformError::InvalidSchedule("more than one parallelization".into()));
        }
        match count(TransformKind::Vectorization) {
            0 => Ok(()),
            1 if matches!(self.actions.last(), Some(Action::Vectorization)) => Ok(()),
            _ => Err(TransformError::InvalidSchedule(
                "vectorization must appear once, at the end".into(),
            )),
        }
    }
}

/// Feasibility masks for the transform head and its parameter heads.
///
/// `tile_sizes` is `N x (M+1)` and `interchange` is `N`, padded past the
/// current loop count with unusable entries.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionMask {
    pub transform: [bool; 5],
    pub tile_sizes: Vec<Vec<bool>>,
    pub interchange: Vec<bool>,
}

impl ActionMask {
    pub fn allows(&self, kind: TransformKind) -> bool {
        self.transform[kind.index()]
    }

    pub fn any(&self) -> bool {
        self.transform.iter().any(|&b| b)
    }
}

/// `[0]` followed by the pool divisors of the loop's trip count, ascending,
/// truncated or zero-padded to exactly `m` entries.
pub fn candidate_tile_sizes(l: &LoopDim, m: usize) -> Vec<u64> {
    let trip = l.trip_count();
    let mut out = vec![0];
    out.extend(TILE_POOL.iter().copied().filter(|&s| s <= trip && trip % s == 0));
    out.resize(m, 0);
    out
}

fn check_sizes(op: &LinalgOp, sizes: &[u64], max_loops: usize) -> Result<usize, TransformError> {
    let n = op.num_loops();
    if sizes.len() != n {
        return Err(TransformError::SizeArity {
            expected: n,
            got: sizes.len(),
        });
    }
    for (i, (&s, l)) in sizes.iter().zip(&op.loops).enumerate() {
        let trip = l.trip_count();
        if s != 0 && trip % s != 0 {
            return Err(TransformError::NotDivisor {
                loop_index: i,
                size: s,
                trip,
            });
        }
    }
    let loops = n + sizes.iter().filter(|&&s| s != 0).count();
    if loops > max_loops {
        return Err(TransformError::LoopBudgetExceeded { loops, max: max_loops });
    }
    Ok(loops)
}

/// Rebuilds the nest with tile loops first (original relative order), then
/// point loops; untiled loops sit in the point band at their position.
fn tile(op: &LinalgOp, sizes: &[u64], parallel: bool) -> LinalgOp {
    let mut loops = Vec::new();
    let mut origin = Vec::new();
    for (i, (&s, l)) in sizes.iter().zip(&op.loops).enumerate() {
        if s != 0 {
            loops.push(LoopDim {
                step: l.step * s as i64,
                parallel: l.parallel || parallel,
                vectorized: false,
                ..*l
            });
            origin.push(i);
        }
    }
    for (i, (&s, l)) in sizes.iter().zip(&op.loops).enumerate() {
        if s != 0 {
            loops.push(LoopDim {
                lower: 0,
                upper: s as i64 * l.step,
                step: l.step,
                parallel: false,
                vectorized: l.vectorized,
            });
        } else {
            loops.push(*l);
        }
        origin.push(i);
    }
    let n = op.num_loops();
    let remap = |m: &AccessMatrix| {
        AccessMatrix(
            m.rows()
                .iter()
                .map(|row| {
                    let mut r: Vec<i64> = origin.iter().map(|&o| row[o]).collect();
                    r.push(row[n]);
                    r
                })
                .collect(),
        )
    };
    LinalgOp {
        loops,
        loads: op.loads.iter().map(remap).collect(),
        store: op.store.as_ref().map(remap),
        ..op.clone()
    }
}

pub fn apply_tiling(op: &LinalgOp, sizes: &[u64], max_loops: usize) -> Result<LinalgOp, TransformError> {
    check_sizes(op, sizes, max_loops)?;
    if sizes.iter().all(|&s| s == 0) {
        return Ok(op.clone());
    }
    Ok(tile(op, sizes, false))
}

/// Tiling whose created tile loops run in parallel. Only one per operation.
pub fn apply_parallelization(
    op: &LinalgOp,
    sizes: &[u64],
    max_loops: usize,
) -> Result<LinalgOp, TransformError> {
    if op.is_parallelized() {
        return Err(TransformError::AlreadyParallelized);
    }
    check_sizes(op, sizes, max_loops)?;
    if sizes.iter().all(|&s| s == 0) {
        return Ok(op.clone());
    }
    Ok(tile(op, sizes, true))
}

pub fn apply_interchange(op: &LinalgOp, k: usize) -> Result<LinalgOp, TransformError> {
    let n = op.num_loops();
    if k >= n {
        return Err(TransformError::IndexOutOfRange { index: k, loops: n });
    }
    if k == n - 1 {
        return Ok(op.clone());
    }
    let mut out = op.clone();
    out.loops.swap(k, k + 1);
    for m in out.loads.iter_mut().chain(out.store.iter_mut()) {
        for row in &mut m.0 {
            row.swap(k, k + 1);
        }
    }
    Ok(out)
}

/// Lowers a convolution to a GEMM over `(B*OH*OW, Cout, Kh*Kw*Cin)`.
///
/// The nest is rebuilt from the convolution shape, so earlier loop
/// restructuring does not survive.
pub fn apply_im2col(op: &LinalgOp) -> Result<LinalgOp, TransformError> {
    if op.kind != OpKind::Conv2D {
        return Err(TransformError::NotConvolution(op.kind));
    }
    if op.im2col.is_some() {
        return Err(TransformError::AlreadyApplied);
    }
    let g = conv_gemm_dims(&op.shape);
    let a = AccessMatrix::from_terms(3, &[&[(0, 1)], &[(2, 1)]]);
    let b = AccessMatrix::from_terms(3, &[&[(2, 1)], &[(1, 1)]]);
    let c = AccessMatrix::from_terms(3, &[&[(0, 1)], &[(1, 1)]]);
    Ok(LinalgOp {
        kind: OpKind::Conv2D,
        shape: op.shape.clone(),
        loops: [g.m, g.n, g.k].iter().map(|&t| LoopDim::new(t as i64)).collect(),
        loads: vec![a, b],
        store: Some(c),
        counts: MathOpCounts { ..op.counts },
        elem_bytes: op.elem_bytes,
        im2col: Some(Im2colInfo {
            buffer_elems: (g.m * g.k) as u64,
        }),
    })
}

/// Marks the innermost loop for SIMD execution.
pub fn apply_vectorization(op: &LinalgOp) -> Result<LinalgOp, TransformError> {
    if op.is_vectorized() {
        return Err(TransformError::AlreadyVectorized);
    }
    let mut out = op.clone();
    if let Some(l) = out.loops.last_mut() {
        l.vectorized = true;
    }
    Ok(out)
}

pub fn apply_action(op: &LinalgOp, action: &Action, max_loops: usize) -> Result<LinalgOp, TransformError> {
    match action {
        Action::Tiling { sizes } => apply_tiling(op, sizes, max_loops),
        Action::Parallelization { sizes } => apply_parallelization(op, sizes, max_loops),
        Action::Interchange { k } => apply_interchange(op, *k),
        Action::Im2col => apply_im2col(op),
        Action::Vectorization => apply_vectorization(op),
    }
}

/// Applies every action in order after checking the schedule invariants.
pub fn apply_schedule(op: &LinalgOp, schedule: &Schedule, max_loops: usize) -> Result<LinalgOp, TransformError> {
    schedule.validate()?;
    schedule
        .actions
        .iter()
        .try_fold(op.clone(), |cur, a| apply_action(&cur, a, max_loops))
}

/// Candidate tile lists for every loop, padded to `N` rows of `M` entries.
pub fn tile_candidates(op: &LinalgOp, limits: &EnvLimits) -> Vec<Vec<u64>> {
    (0..limits.max_loops)
        .map(|i| match op.loops.get(i) {
            Some(l) => candidate_tile_sizes(l, limits.tile_choices),
            None => vec![0; limits.tile_choices],
        })
        .collect()
}

/// Loops allowed a nonzero tile this step: those with a nonzero candidate,
/// outermost first, as many as the remaining loop budget permits.
fn tileable_loops(op: &LinalgOp, limits: &EnvLimits) -> Vec<bool> {
    let mut budget = limits.max_loops.saturating_sub(op.num_loops());
    op.loops
        .iter()
        .map(|l| {
            let has = candidate_tile_sizes(l, limits.tile_choices).iter().any(|&s| s != 0);
            if has && budget > 0 {
                budget -= 1;
                true
            } else {
                false
            }
        })
        .collect()
}

/// Feasible actions in the current state.
///
/// A tile-size slot is legal when it holds a distinct nonzero candidate of a
/// loop within the budget; slot 0 (no tiling) is always legal. At the last
/// step only vectorization remains. After vectorization nothing is legal.
pub fn compute_mask(op: &LinalgOp, history: &Schedule, step: usize, limits: &EnvLimits) -> ActionMask {
    let n = op.num_loops();
    let (nl, m) = (limits.max_loops, limits.tile_choices);
    let tileable = tileable_loops(op, limits);

    let mut tile_sizes = vec![vec![false; m + 1]; nl];
    for (i, row) in tile_sizes.iter_mut().enumerate() {
        row[0] = true;
        if i < n && tileable[i] {
            let cands = candidate_tile_sizes(&op.loops[i], m);
            for (j, &c) in cands.iter().enumerate().skip(1) {
                row[j] = c != 0;
            }
        }
    }
    let interchange: Vec<bool> = (0..nl).map(|k| k < n).collect();

    let mut transform = [
        tileable.iter().any(|&t| t),
        !history.contains(TransformKind::Parallelization),
        n >= 2,
        op.kind == OpKind::Conv2D && op.im2col.is_none(),
        true,
    ];
    if step + 1 >= limits.max_schedule_len {
        transform = [false, false, false, false, true];
    }
    if op.is_vectorized() || history.contains(TransformKind::Vectorization) {
        transform = [false; 5];
    }
    ActionMask {
        transform,
        tile_sizes,
        interchange,
    }
}

/// `2 * M^N + N! + 2`, or `None` on overflow.
pub fn action_space_size(n: u32, m: u64) -> Option<u64> {
    let tiles = m.checked_pow(n)?;
    let fact = (1..=n as u64).try_fold(1u64, |acc, x| acc.checked_mul(x))?;
    tiles.checked_mul(2)?.checked_add(fact)?.checked_add(2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::build_operation;

    fn matmul(m: usize, n: usize, k: usize) -> LinalgOp {
        build_operation(OpKind::Matmul, &[m, n, k], 7).unwrap()
    }

    #[test]
    fn candidates() {
        assert_eq!(candidate_tile_sizes(&LoopDim::new(64), 5), vec![0, 2, 4, 8, 16]);
        assert_eq!(candidate_tile_sizes(&LoopDim::new(7), 5), vec![0; 5]);
        assert_eq!(candidate_tile_sizes(&LoopDim::new(1), 2), vec![0, 0]);
        assert_eq!(candidate_tile_sizes(&LoopDim::new(12), 5), vec![0, 2, 4, 0, 0]);
    }

    #[test]
    fn tiling_matches_hand_expansion() {
        let op = matmul(4, 4, 4);
        let t = apply_tiling(&op, &[2, 2, 0], 7).unwrap();
        let l = |lower, upper, step| LoopDim {
            lower,
            upper,
            step,
            parallel: false,
            vectorized: false,
        };
        assert_eq!(t.loops, vec![l(0, 4, 2), l(0, 4, 2), l(0, 2, 1), l(0, 2, 1), l(0, 4, 1)]);
        // A[i,k] over (i_out, j_out, i_in, j_in, k, const)
        assert_eq!(t.loads[0].0[0], vec![1, 0, 1, 0, 0, 0]);
        assert_eq!(t.loads[0].0[1], vec![0, 0, 0, 0, 1, 0]);
        t.validate().unwrap();
    }

    #[test]
    fn tiling_errors_and_noop() {
        let op = matmul(4, 4, 4);
        assert_eq!(apply_tiling(&op, &[0, 0, 0], 7).unwrap(), op);
        assert!(matches!(
            apply_tiling(&op, &[3, 0, 0], 7),
            Err(TransformError::NotDivisor { loop_index: 0, size: 3, trip: 4 })
        ));
        assert!(matches!(
            apply_tiling(&op, &[2, 2, 2], 5),
            Err(TransformError::LoopBudgetExceeded { loops: 6, max: 5 })
        ));
    }

    #[test]
    fn retiling_a_tile_loop_keeps_indexing_exact() {
        let op = matmul(16, 4, 4);
        let t = apply_tiling(&op, &[4, 0, 0], 7).unwrap();
        // i_out has step 4 and trip 4; split it again by 2
        let t2 = apply_tiling(&t, &[2, 0, 0, 0], 7).unwrap();
        assert_eq!(t2.loops[0].step, 8);
        assert_eq!(t2.loops[1], LoopDim { lower: 0, upper: 8, step: 4, parallel: false, vectorized: false });
        t2.validate().unwrap();
    }

    #[test]
    fn parallelization_is_tiling_plus_flag() {
        let op = matmul(4, 4, 4);
        let t = apply_tiling(&op, &[2, 0, 0], 7).unwrap();
        let p = apply_parallelization(&op, &[2, 0, 0], 7).unwrap();
        assert!(p.loops[0].parallel);
        let mut unflagged = p.clone();
        unflagged.loops[0].parallel = false;
        assert_eq!(unflagged, t);
        assert_eq!(
            apply_parallelization(&p, &[0, 0, 0, 0], 7),
            Err(TransformError::AlreadyParallelized)
        );
        assert_eq!(apply_parallelization(&op, &[0, 0, 0], 7).unwrap(), op);
    }

    #[test]
    fn interchange_swaps_columns() {
        let op = matmul(2, 3, 4);
        let x = apply_interchange(&op, 1).unwrap();
        assert_eq!(x.loops.iter().map(|l| l.upper).collect::<Vec<_>>(), vec![2, 4, 3]);
        assert_eq!(x.loads[0].0, vec![vec![1, 0, 0, 0], vec![0, 1, 0, 0]]);
        assert_eq!(apply_interchange(&op, 2).unwrap(), op);
        assert_eq!(apply_interchange(&x, 1).unwrap(), op);
        assert!(matches!(
            apply_interchange(&op, 3),
            Err(TransformError::IndexOutOfRange { index: 3, loops: 3 })
        ));
    }

    #[test]
    fn im2col_gemm_dims() {
        let conv = build_operation(OpKind::Conv2D, &[1, 8, 8, 3, 4, 3, 3], 7).unwrap();
        let g = apply_im2col(&conv).unwrap();
        let trips: Vec<u64> = g.loops.iter().map(LoopDim::trip_count).collect();
        assert_eq!(trips, vec![36, 4, 27]);
        assert_eq!(g.im2col.unwrap().buffer_elems, 36 * 27);
        g.validate().unwrap();
        assert_eq!(apply_im2col(&g), Err(TransformError::AlreadyApplied));
        assert_eq!(
            apply_im2col(&matmul(2, 2, 2)),
            Err(TransformError::NotConvolution(OpKind::Matmul))
        );
    }

    #[test]
    fn vectorization_marks_innermost_once() {
        let op = matmul(4, 4, 4);
        let v = apply_vectorization(&op).unwrap();
        assert!(v.loops[2].vectorized);
        assert!(!v.loops[0].vectorized && !v.loops[1].vectorized);
        assert_eq!(apply_vectorization(&v), Err(TransformError::AlreadyVectorized));
        let mask = compute_mask(&v, &Schedule::new(vec![Action::Vectorization]), 1, &EnvLimits::default());
        assert!(!mask.any());
    }

    #[test]
    fn masks() {
        let lim = EnvLimits::default();
        let conv = build_operation(OpKind::Conv2D, &[2, 10, 10, 4, 8, 3, 3], 7).unwrap();
        let m = compute_mask(&conv, &Schedule::default(), 0, &lim);
        // 7 loops already: no room for a tile loop
        assert_eq!(m.transform, [false, true, true, true, true]);

        let conv6 = build_operation(OpKind::Conv2D, &[2, 10, 10, 4, 8, 3, 3], 7).unwrap();
        let lim8 = EnvLimits { max_loops: 8, ..lim };
        assert_eq!(compute_mask(&conv6, &Schedule::default(), 0, &lim8).transform, [true; 5]);

        let mm = matmul(64, 64, 64);
        let m = compute_mask(&mm, &Schedule::default(), 0, &lim);
        assert_eq!(m.transform, [true, true, true, false, true]);
        assert_eq!(m.tile_sizes[0], vec![true, true, true, true, true, false]);
        assert_eq!(m.tile_sizes[3], vec![true, false, false, false, false, false]);
        assert_eq!(m.interchange, vec![true, true, true, false, false, false, false]);

        let hist = Schedule::new(vec![Action::Parallelization { sizes: vec![2, 0, 0] }]);
        let p = apply_schedule(&mm, &hist, 7).unwrap();
        assert!(!compute_mask(&p, &hist, 1, &lim).allows(TransformKind::Parallelization));

        let last = compute_mask(&mm, &Schedule::default(), 6, &lim);
        assert_eq!(last.transform, [false, false, false, false, true]);
    }

    #[test]
    fn mask_respects_loop_budget() {
        let lim = EnvLimits::default();
        let mm = apply_tiling(&matmul(64, 64, 64), &[2, 2, 2], 7).unwrap();
        let m = compute_mask(&mm, &Schedule::default(), 1, &lim);
        let open: Vec<usize> = (0..6).filter(|&i| m.tile_sizes[i][1]).collect();
        assert_eq!(open, vec![0]);
    }

    #[test]
    fn schedule_validation() {
        let ok = Schedule::new(vec![Action::Interchange { k: 0 }, Action::Vectorization]);
        assert!(ok.validate().is_ok());
        let bad = Schedule::new(vec![Action::Vectorization, Action::Interchange { k: 0 }]);
        assert!(bad.validate().is_err());
        let two = Schedule::new(vec![
            Action::Parallelization { sizes: vec![] },
            Action::Parallelization { sizes: vec![] },
        ]);
        assert!(two.validate().is_err());
    }

    #[test]
    fn schedule_json() {
        let s = Schedule::new(vec![
            Action::Tiling { sizes: vec![2, 0] },
            Action::Interchange { k: 1 },
            Action::Vectorization,
        ]);
        let j = serde_json::to_string(&s).unwrap();
        assert_eq!(
            j,
            r#"{"actions":[{"t":"Tiling","sizes":[2,0]},{"t":"Interchange","k":1},{"t":"Vectorization"}]}"#
        );
        assert_eq!(serde_json::from_str::<Schedule>(&j).unwrap(), s);
    }

    #[test]
    fn space_size() {
        assert_eq!(action_space_size(7, 5), Some(161_292));
        assert_eq!(action_space_size(1, 1), Some(5));
        assert_eq!(action_space_size(2, 2), Some(12));
        assert_eq!(action_space_size(64, 5), None);
    }
}
