//! Loop-nest intermediate representation.
//!
//! A [`LinalgOp`] is a perfect loop nest over affine array accesses. The five
//! supported kinds are built from their textbook definitions by
//! [`build_operation`]; transformations in [`crate::transform`] rewrite the
//! loops and access matrices while keeping the logical arrays fixed.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default bytes per element (f32).
pub const DEFAULT_ELEM_BYTES: u64 = 4;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum IrError {
    #[error("{kind} expects {expected} shape entries, got {got}")]
    ShapeArity {
        kind: OpKind,
        expected: String,
        got: usize,
    },
    #[error("operation needs {loops} loops but at most {max} are allowed")]
    TooManyLoops { loops: usize, max: usize },
    #[error("invalid shape {shape:?} for {kind}: {reason}")]
    InvalidShape {
        kind: OpKind,
        shape: Vec<usize>,
        reason: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OpKind {
    Matmul,
    Conv2D,
    Maxpool,
    Add,
    Relu,
}

impl OpKind {
    pub const ALL: [OpKind; 5] = [
        OpKind::Matmul,
        OpKind::Conv2D,
        OpKind::Maxpool,
        OpKind::Add,
        OpKind::Relu,
    ];
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            OpKind::Matmul => "matmul",
            OpKind::Conv2D => "conv2d",
            OpKind::Maxpool => "maxpool",
            OpKind::Add => "add",
            OpKind::Relu => "relu",
        };
        f.write_str(s)
    }
}

impl FromStr for OpKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "matmul" => Ok(OpKind::Matmul),
            "conv2d" | "conv" => Ok(OpKind::Conv2D),
            "maxpool" => Ok(OpKind::Maxpool),
            "add" => Ok(OpKind::Add),
            "relu" => Ok(OpKind::Relu),
            other => Err(format!("unknown operation kind `{other}`")),
        }
    }
}

/// One loop of the nest. Iterator values are `lower, lower+step, ...` below `upper`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LoopDim {
    pub lower: i64,
    pub upper: i64,
    pub step: i64,
    #[serde(default, skip_serializing_if = "is_false")]
    pub parallel: bool,
    #[serde(default, skip_serializing_if = "is_false")]
    pub vectorized: bool,
}

fn is_false(b: &bool) -> bool {
    !*b
}

impl LoopDim {
    pub fn new(upper: i64) -> Self {
        LoopDim {
            lower: 0,
            upper,
            step: 1,
            parallel: false,
            vectorized: false,
        }
    }

    /// `ceil((upper - lower) / step)`
    pub fn trip_count(&self) -> u64 {
        let span = (self.upper - self.lower).max(0) as u64;
        let step = self.step.max(1) as u64;
        span.div_ceil(step)
    }

    /// Last iterator value taken by the loop.
    pub fn last_value(&self) -> i64 {
        self.lower + (self.trip_count() as i64 - 1).max(0) * self.step
    }
}

/// Integer matrix mapping loop iterators (plus a trailing constant column) to
/// array subscripts. One row per array dimension.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct AccessMatrix(pub Vec<Vec<i64>>);

impl AccessMatrix {
    pub fn rows(&self) -> &[Vec<i64>] {
        &self.0
    }

    pub fn dims(&self) -> usize {
        self.0.len()
    }

    /// Number of columns, i.e. loop count + 1.
    pub fn cols(&self) -> usize {
        self.0.first().map_or(0, Vec::len)
    }

    /// Coefficient of loop `col` in every row.
    pub fn column(&self, col: usize) -> impl Iterator<Item = i64> + '_ {
        self.0.iter().map(move |r| r[col])
    }

    pub(crate) fn identity(n: usize) -> Self {
        AccessMatrix(
            (0..n)
                .map(|r| {
                    let mut row = vec![0; n + 1];
                    row[r] = 1;
                    row
                })
                .collect(),
        )
    }

    /// Builds a matrix over `n` loops from `(loop, coeff)` terms per row.
    pub(crate) fn from_terms(n: usize, rows: &[&[(usize, i64)]]) -> Self {
        AccessMatrix(
            rows.iter()
                .map(|terms| {
                    let mut row = vec![0; n + 1];
                    for &(l, c) in terms.iter() {
                        row[l] += c;
                    }
                    row
                })
                .collect(),
        )
    }
}

/// Per-body-execution counts of `add, sub, mul, div, exp, log`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[u32; 6]", into = "[u32; 6]")]
pub struct MathOpCounts {
    pub add: u32,
    pub sub: u32,
    pub mul: u32,
    pub div: u32,
    pub exp: u32,
    pub log: u32,
}

impl MathOpCounts {
    pub fn as_array(&self) -> [u32; 6] {
        [self.add, self.sub, self.mul, self.div, self.exp, self.log]
    }

    pub fn total(&self) -> u64 {
        self.as_array().iter().map(|&c| c as u64).sum()
    }
}

impl From<[u32; 6]> for MathOpCounts {
    fn from(a: [u32; 6]) -> Self {
        MathOpCounts {
            add: a[0],
            sub: a[1],
            mul: a[2],
            div: a[3],
            exp: a[4],
            log: a[5],
        }
    }
}

impl From<MathOpCounts> for [u32; 6] {
    fn from(c: MathOpCounts) -> Self {
        c.as_array()
    }
}

/// Recorded when a convolution has been rewritten as a GEMM.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Im2colInfo {
    /// Elements of the materialized patch matrix.
    pub buffer_elems: u64,
}

/// A loop-nest computation.
///
/// `shape` keeps the logical operation shape, so the input and output arrays
/// stay the same whatever transformations have been applied to the loops.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LinalgOp {
    pub kind: OpKind,
    pub shape: Vec<usize>,
    pub loops: Vec<LoopDim>,
    pub loads: Vec<AccessMatrix>,
    pub store: Option<AccessMatrix>,
    pub counts: MathOpCounts,
    #[serde(default = "default_elem_bytes", skip_serializing_if = "is_default_elem_bytes")]
    pub elem_bytes: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub im2col: Option<Im2colInfo>,
}

fn default_elem_bytes() -> u64 {
    DEFAULT_ELEM_BYTES
}

fn is_default_elem_bytes(b: &u64) -> bool {
    *b == DEFAULT_ELEM_BYTES
}

impl LinalgOp {
    pub fn num_loops(&self) -> usize {
        self.loops.len()
    }

    /// Loads followed by the store.
    pub fn accesses(&self) -> impl Iterator<Item = &AccessMatrix> {
        self.loads.iter().chain(self.store.iter())
    }

    pub fn is_parallelized(&self) -> bool {
        self.loops.iter().any(|l| l.parallel)
    }

    pub fn is_vectorized(&self) -> bool {
        self.loops.iter().any(|l| l.vectorized)
    }

    /// Shapes of the logical input arrays and the output array.
    pub fn logical_shapes(&self) -> (Vec<Vec<usize>>, Vec<usize>) {
        logical_shapes(self.kind, &self.shape)
    }

    /// Shapes of the arrays the access matrices index. These differ from the
    /// logical shapes only after im2col, where the operands are the patch
    /// matrix, the flattened filter and the flattened output.
    pub fn access_shapes(&self) -> (Vec<Vec<usize>>, Vec<usize>) {
        match (self.kind, self.im2col) {
            (OpKind::Conv2D, Some(_)) => {
                let g = conv_gemm_dims(&self.shape);
                (vec![vec![g.m, g.k], vec![g.k, g.n]], vec![g.m, g.n])
            }
            _ => self.logical_shapes(),
        }
    }

    /// Checks the structural invariants: column counts, row counts and that
    /// every subscript stays inside its array.
    pub fn validate(&self) -> Result<(), String> {
        let n = self.loops.len();
        if n == 0 {
            return Err("operation has no loops".into());
        }
        for l in &self.loops {
            if l.step < 1 || l.upper <= l.lower {
                return Err(format!("malformed loop {l:?}"));
            }
        }
        let (ins, out) = self.access_shapes();
        if ins.len() != self.loads.len() {
            return Err(format!(
                "{} loads but {} input arrays",
                self.loads.len(),
                ins.len()
            ));
        }
        let store = self.store.as_ref().ok_or("missing store")?;
        for (m, shape) in self.loads.iter().zip(&ins).chain(std::iter::once((store, &out))) {
            if m.dims() != shape.len() {
                return Err(format!("access has {} rows, array has {} dims", m.dims(), shape.len()));
            }
            for row in m.rows() {
                if row.len() != n + 1 {
                    return Err(format!("access row has {} columns, expected {}", row.len(), n + 1));
                }
            }
            for (row, &extent) in m.rows().iter().zip(shape) {
                let (lo, hi) = subscript_range(row, &self.loops);
                if lo < 0 || hi >= extent as i64 {
                    return Err(format!("subscript range [{lo}, {hi}] outside extent {extent}"));
                }
            }
        }
        Ok(())
    }
}

/// Minimum and maximum subscript an access row produces over the loop box.
pub fn subscript_range(row: &[i64], loops: &[LoopDim]) -> (i64, i64) {
    let c = *row.last().unwrap_or(&0);
    let (mut lo, mut hi) = (c, c);
    for (coef, l) in row.iter().zip(loops) {
        let a = coef * l.lower;
        let b = coef * l.last_value();
        lo += a.min(b);
        hi += a.max(b);
    }
    (lo, hi)
}

/// GEMM dimensions of a lowered convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct GemmDims {
    pub m: usize,
    pub n: usize,
    pub k: usize,
}

/// Output spatial extents for the stride-1, unpadded convolution / pooling.
fn out_hw(h: usize, w: usize, kh: usize, kw: usize) -> (usize, usize) {
    (h + 1 - kh, w + 1 - kw)
}

pub(crate) fn conv_gemm_dims(shape: &[usize]) -> GemmDims {
    let [b, h, w, cin, cout, kh, kw] = shape[..] else {
        panic!("conv shape must have 7 entries")
    };
    let (oh, ow) = out_hw(h, w, kh, kw);
    GemmDims {
        m: b * oh * ow,
        n: cout,
        k: kh * kw * cin,
    }
}

fn logical_shapes(kind: OpKind, shape: &[usize]) -> (Vec<Vec<usize>>, Vec<usize>) {
    match kind {
        OpKind::Matmul => {
            let [m, n, k] = shape[..] else { unreachable!() };
            (vec![vec![m, k], vec![k, n]], vec![m, n])
        }
        OpKind::Conv2D => {
            let [b, h, w, cin, cout, kh, kw] = shape[..] else { unreachable!() };
            let (oh, ow) = out_hw(h, w, kh, kw);
            (
                vec![vec![b, h, w, cin], vec![kh, kw, cin, cout]],
                vec![b, oh, ow, cout],
            )
        }
        OpKind::Maxpool => {
            let [b, h, w, c, kh, kw] = shape[..] else { unreachable!() };
            let (oh, ow) = out_hw(h, w, kh, kw);
            (vec![vec![b, h, w, c]], vec![b, oh, ow, c])
        }
        OpKind::Add => (vec![shape.to_vec(), shape.to_vec()], shape.to_vec()),
        OpKind::Relu => (vec![shape.to_vec()], shape.to_vec()),
    }
}

/// Materializes an operation of `kind` with the given shape.
///
/// Shapes: `Matmul [M,N,K]`, `Conv2D [B,H,W,Cin,Cout,Kh,Kw]` (NHWC, stride 1,
/// no padding), `Maxpool [B,H,W,C,Kh,Kw]` (stride 1), `Add`/`Relu` 1 to 4 dims.
pub fn build_operation(kind: OpKind, shape: &[usize], max_loops: usize) -> Result<LinalgOp, IrError> {
    let arity_ok = match kind {
        OpKind::Matmul => shape.len() == 3,
        OpKind::Conv2D => shape.len() == 7,
        OpKind::Maxpool => shape.len() == 6,
        OpKind::Add | OpKind::Relu => (1..=4).contains(&shape.len()),
    };
    if !arity_ok {
        let expected = match kind {
            OpKind::Matmul => "3",
            OpKind::Conv2D => "7",
            OpKind::Maxpool => "6",
            OpKind::Add | OpKind::Relu => "1 to 4",
        };
        return Err(IrError::ShapeArity {
            kind,
            expected: expected.into(),
            got: shape.len(),
        });
    }
    let invalid = |reason: &str| IrError::InvalidShape {
        kind,
        shape: shape.to_vec(),
        reason: reason.into(),
    };
    if shape.contains(&0) {
        return Err(invalid("all entries must be >= 1"));
    }

    let mac = MathOpCounts {
        add: 1,
        mul: 1,
        ..Default::default()
    };
    // max(x, y) has no counter of its own; it is booked as one add.
    let max_only = MathOpCounts {
        add: 1,
        ..Default::default()
    };

    let (trips, loads, store, counts) = match kind {
        OpKind::Matmul => {
            // loops i, j, k: C[i,j] += A[i,k] * B[k,j]
            let [m, n, k] = shape[..] else { unreachable!() };
            let a = AccessMatrix::from_terms(3, &[&[(0, 1)], &[(2, 1)]]);
            let b = AccessMatrix::from_terms(3, &[&[(2, 1)], &[(1, 1)]]);
            let c = AccessMatrix::from_terms(3, &[&[(0, 1)], &[(1, 1)]]);
            (vec![m, n, k], vec![a, b], c, mac)
        }
        OpKind::Conv2D => {
            // loops b, oh, ow, co, kh, kw, ci:
            // O[b,oh,ow,co] += I[b,oh+kh,ow+kw,ci] * F[kh,kw,ci,co]
            let [b, h, w, cin, cout, kh, kw] = shape[..] else { unreachable!() };
            if kh > h || kw > w {
                return Err(invalid("kernel larger than input"));
            }
            let (oh, ow) = out_hw(h, w, kh, kw);
            let input = AccessMatrix::from_terms(
                7,
                &[&[(0, 1)], &[(1, 1), (4, 1)], &[(2, 1), (5, 1)], &[(6, 1)]],
            );
            let filter = AccessMatrix::from_terms(7, &[&[(4, 1)], &[(5, 1)], &[(6, 1)], &[(3, 1)]]);
            let out = AccessMatrix::from_terms(7, &[&[(0, 1)], &[(1, 1)], &[(2, 1)], &[(3, 1)]]);
            (vec![b, oh, ow, cout, kh, kw, cin], vec![input, filter], out, mac)
        }
        OpKind::Maxpool => {
            // loops b, oh, ow, c, kh, kw: O[b,oh,ow,c] = max(O, I[b,oh+kh,ow+kw,c])
            let [b, h, w, c, kh, kw] = shape[..] else { unreachable!() };
            if kh > h || kw > w {
                return Err(invalid("window larger than input"));
            }
            let (oh, ow) = out_hw(h, w, kh, kw);
            let input = AccessMatrix::from_terms(
                6,
                &[&[(0, 1)], &[(1, 1), (4, 1)], &[(2, 1), (5, 1)], &[(3, 1)]],
            );
            let out = AccessMatrix::from_terms(6, &[&[(0, 1)], &[(1, 1)], &[(2, 1)], &[(3, 1)]]);
            (vec![b, oh, ow, c, kh, kw], vec![input], out, max_only)
        }
        OpKind::Add => {
            let n = shape.len();
            let id = AccessMatrix::identity(n);
            (shape.to_vec(), vec![id.clone(), id.clone()], id, max_only)
        }
        OpKind::Relu => {
            let n = shape.len();
            let id = AccessMatrix::identity(n);
            (shape.to_vec(), vec![id.clone()], id, max_only)
        }
    };

    if trips.len() > max_loops {
        return Err(IrError::TooManyLoops {
            loops: trips.len(),
            max: max_loops,
        });
    }

    Ok(LinalgOp {
        kind,
        shape: shape.to_vec(),
        loops: trips.iter().map(|&t| LoopDim::new(t as i64)).collect(),
        loads,
        store: Some(store),
        counts,
        elem_bytes: DEFAULT_ELEM_BYTES,
        im2col: None,
    })
}

/// Product over loops of their trip counts.
pub fn trip_count(op: &LinalgOp) -> u64 {
    op.loops.iter().map(LoopDim::trip_count).product()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_fixture() {
        let op = build_operation(OpKind::Matmul, &[2, 2, 2], 7).unwrap();
        assert_eq!(op.loops, vec![LoopDim::new(2); 3]);
        assert_eq!(op.loads[0].0, vec![vec![1, 0, 0, 0], vec![0, 0, 1, 0]]);
        assert_eq!(op.loads[1].0, vec![vec![0, 0, 1, 0], vec![0, 1, 0, 0]]);
        assert_eq!(op.store.as_ref().unwrap().0, vec![vec![1, 0, 0, 0], vec![0, 1, 0, 0]]);
        assert_eq!(op.counts.as_array(), [1, 0, 1, 0, 0, 0]);
        op.validate().unwrap();
    }

    #[test]
    fn relu_fixture() {
        let op = build_operation(OpKind::Relu, &[8], 7).unwrap();
        assert_eq!(op.loops, vec![LoopDim::new(8)]);
        assert_eq!(op.loads, vec![AccessMatrix(vec![vec![1, 0]])]);
        assert_eq!(op.counts.as_array(), [1, 0, 0, 0, 0, 0]);
    }

    #[test]
    fn conv_input_has_two_terms_on_spatial_rows() {
        let op = build_operation(OpKind::Conv2D, &[1, 8, 8, 3, 4, 3, 3], 7).unwrap();
        assert_eq!(op.num_loops(), 7);
        let input = &op.loads[0];
        let nonzero = |r: usize| input.0[r][..7].iter().filter(|&&c| c != 0).count();
        assert_eq!(nonzero(0), 1);
        assert_eq!(nonzero(1), 2);
        assert_eq!(nonzero(2), 2);
        assert_eq!(nonzero(3), 1);
        op.validate().unwrap();
    }

    #[test]
    fn conv_trip_count_matches_hand_written_nest() {
        let op = build_operation(OpKind::Conv2D, &[1, 8, 8, 3, 4, 3, 3], 7).unwrap();
        // for b<1, oh<6, ow<6, co<4, kh<3, kw<3, ci<3
        let mut iterations = 0u64;
        for _b in 0..1 {
            for _oh in 0..6 {
                for _ow in 0..6 {
                    for _co in 0..4 {
                        for _kh in 0..3 {
                            for _kw in 0..3 {
                                for _ci in 0..3 {
                                    iterations += 1;
                                }
                            }
                        }
                    }
                }
            }
        }
        assert_eq!(trip_count(&op), iterations);
    }

    #[test]
    fn trip_counts() {
        let op = build_operation(OpKind::Matmul, &[2, 2, 2], 7).unwrap();
        assert_eq!(trip_count(&op), 8);
        let l = LoopDim {
            lower: 0,
            upper: 10,
            step: 2,
            parallel: false,
            vectorized: false,
        };
        assert_eq!(l.trip_count(), 5);
        assert_eq!(l.last_value(), 8);
    }

    #[test]
    fn arity_and_limit_errors() {
        assert!(matches!(
            build_operation(OpKind::Matmul, &[2, 2], 7),
            Err(IrError::ShapeArity { .. })
        ));
        assert!(matches!(
            build_operation(OpKind::Add, &[], 7),
            Err(IrError::ShapeArity { .. })
        ));
        assert!(matches!(
            build_operation(OpKind::Conv2D, &[1, 8, 8, 3, 4, 3, 3], 6),
            Err(IrError::TooManyLoops { loops: 7, max: 6 })
        ));
        assert!(matches!(
            build_operation(OpKind::Relu, &[0, 3], 7),
            Err(IrError::InvalidShape { .. })
        ));
    }

    #[test]
    fn build_is_pure() {
        let a = build_operation(OpKind::Maxpool, &[1, 10, 10, 4, 3, 3], 7).unwrap();
        let b = build_operation(OpKind::Maxpool, &[1, 10, 10, 4, 3, 3], 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn json_layout() {
        let op = build_operation(OpKind::Matmul, &[2, 2, 2], 7).unwrap();
        let s = serde_json::to_string(&op).unwrap();
        assert!(s.starts_with(r#"{"kind":"Matmul","shape":[2,2,2],"loops":[{"lower":0,"upper":2,"step":1}"#));
        assert!(s.ends_with(r#""counts":[1,0,1,0,0,0]}"#));
        let back: LinalgOp = serde_json::from_str(&s).unwrap();
        assert_eq!(back, op);
    }
}
