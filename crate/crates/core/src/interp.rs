//! Reference interpreter for loop nests.
//!
//! Runs the nest sequentially on `f64` buffers, ignoring parallel and vector
//! annotations. Used as the oracle for transformation correctness and as the
//! payload of the wall-clock backend.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::cost::CostReport;
use crate::ir::{conv_gemm_dims, subscript_range, AccessMatrix, LinalgOp, LoopDim, OpKind};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum InterpError {
    #[error("input {index}: expected {expected} elements, got {got}")]
    ExtentMismatch { index: usize, expected: usize, got: usize },
    #[error("expected {expected} input buffers, got {got}")]
    InputCount { expected: usize, got: usize },
    #[error("safety limit exceeded: {0}")]
    SafetyLimitExceeded(String),
    #[error("malformed operation: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct InterpLimits {
    /// Largest allowed logical shape entry.
    pub max_dim: usize,
    /// Largest allowed total iteration count.
    pub max_iterations: u64,
}

impl Default for InterpLimits {
    fn default() -> Self {
        InterpLimits {
            max_dim: 64,
            max_iterations: 1 << 27,
        }
    }
}

/// Flat row-major addressing of one access: `offset + sum(coef[j] * iter[j])`.
struct FlatAccess {
    coefs: Vec<i64>,
    offset: i64,
}

impl FlatAccess {
    fn new(m: &AccessMatrix, shape: &[usize], n: usize) -> Self {
        let mut stride = 1i64;
        let mut coefs = vec![0i64; n];
        let mut offset = 0i64;
        for (row, &extent) in m.rows().iter().zip(shape).rev() {
            for (c, &r) in coefs.iter_mut().zip(row) {
                *c += r * stride;
            }
            offset += row[n] * stride;
            stride *= extent as i64;
        }
        FlatAccess { coefs, offset }
    }
}

fn elem_count(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Checks limits and buffer sizes against the logical shapes.
fn check_inputs(op: &LinalgOp, inputs: &[Vec<f64>], limits: &InterpLimits) -> Result<(), InterpError> {
    if let Some(&d) = op.shape.iter().find(|&&d| d > limits.max_dim) {
        return Err(InterpError::SafetyLimitExceeded(format!(
            "dimension {d} > {}",
            limits.max_dim
        )));
    }
    let trips = crate::ir::trip_count(op);
    if trips > limits.max_iterations {
        return Err(InterpError::SafetyLimitExceeded(format!(
            "{trips} iterations > {}",
            limits.max_iterations
        )));
    }
    let (shapes, _) = op.logical_shapes();
    if shapes.len() != inputs.len() {
        return Err(InterpError::InputCount {
            expected: shapes.len(),
            got: inputs.len(),
        });
    }
    for (index, (s, buf)) in shapes.iter().zip(inputs).enumerate() {
        if elem_count(s) != buf.len() {
            return Err(InterpError::ExtentMismatch {
                index,
                expected: elem_count(s),
                got: buf.len(),
            });
        }
    }
    Ok(())
}

/// Patch matrix `[B*OH*OW, Kh*Kw*Cin]` of an NHWC image.
fn im2col_buffer(shape: &[usize], image: &[f64]) -> Vec<f64> {
    let [b, h, w, cin, _cout, kh, kw] = shape[..] else { unreachable!() };
    let (oh, ow) = (h + 1 - kh, w + 1 - kw);
    let g = conv_gemm_dims(shape);
    let mut out = Vec::with_capacity(g.m * g.k);
    for bi in 0..b {
        for y in 0..oh {
            for x in 0..ow {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let base = ((bi * h + y + ky) * w + x + kx) * cin;
                        out.extend_from_slice(&image[base..base + cin]);
                    }
                }
            }
        }
    }
    out
}

#[derive(Clone, Copy)]
enum Body {
    Mac,
    Max,
    Add,
    Relu,
}

struct Nest<'a> {
    loops: &'a [LoopDim],
    /// `coefs[depth * k + a]` for access `a`
    coefs: Vec<i64>,
    /// addresses on entry to each depth, `k` per frame
    frames: Vec<i64>,
    k: usize,
    inputs: Vec<&'a [f64]>,
    out: Vec<f64>,
    body: Body,
}

impl Nest<'_> {
    fn run(&mut self, depth: usize) {
        let k = self.k;
        if depth == self.loops.len() {
            let at = depth * k;
            let a = |i: usize| self.frames[at + i] as usize;
            let o = a(k - 1);
            match self.body {
                Body::Mac => self.out[o] += self.inputs[0][a(0)] * self.inputs[1][a(1)],
                Body::Max => self.out[o] = self.out[o].max(self.inputs[0][a(0)]),
                Body::Add => self.out[o] = self.inputs[0][a(0)] + self.inputs[1][a(1)],
                Body::Relu => self.out[o] = self.inputs[0][a(0)].max(0.0),
            }
            return;
        }
        let l = self.loops[depth];
        let mut v = l.lower;
        while v < l.upper {
            for i in 0..k {
                self.frames[(depth + 1) * k + i] = self.frames[depth * k + i] + self.coefs[depth * k + i] * v;
            }
            self.run(depth + 1);
            v += l.step;
        }
    }
}

/// Executes `op` on the logical input buffers (row-major) and returns the
/// output buffer.
pub fn interpret(op: &LinalgOp, inputs: &[Vec<f64>], limits: &InterpLimits) -> Result<Vec<f64>, InterpError> {
    check_inputs(op, inputs, limits)?;
    op.validate().map_err(InterpError::Malformed)?;

    let patch;
    let operands: Vec<&[f64]> = match op.im2col {
        Some(_) => {
            patch = im2col_buffer(&op.shape, &inputs[0]);
            vec![&patch, &inputs[1]]
        }
        None => inputs.iter().map(Vec::as_slice).collect(),
    };

    let n = op.num_loops();
    let (in_shapes, out_shape) = op.access_shapes();
    let store = op.store.as_ref().expect("validated");
    let accesses: Vec<FlatAccess> = op
        .loads
        .iter()
        .zip(&in_shapes)
        .chain(std::iter::once((store, &out_shape)))
        .map(|(m, s)| FlatAccess::new(m, s, n))
        .collect();
    debug_assert!(op
        .accesses()
        .all(|m| m.rows().iter().all(|r| subscript_range(r, &op.loops).0 >= 0)));

    let (body, init) = match op.kind {
        OpKind::Matmul | OpKind::Conv2D => (Body::Mac, 0.0),
        OpKind::Maxpool => (Body::Max, f64::NEG_INFINITY),
        OpKind::Add => (Body::Add, 0.0),
        OpKind::Relu => (Body::Relu, 0.0),
    };
    let k = accesses.len();
    let mut frames = vec![0i64; (n + 1) * k];
    for (f, a) in frames.iter_mut().zip(&accesses) {
        *f = a.offset;
    }
    let coefs = (0..n).flat_map(|d| accesses.iter().map(move |a| a.coefs[d])).collect();
    let mut nest = Nest {
        loops: &op.loops,
        coefs,
        frames,
        k,
        inputs: operands,
        out: vec![init; elem_count(&out_shape)],
        body,
    };
    nest.run(0);
    Ok(nest.out)
}

/// Random logical inputs for `op`. Integer fills are exact under any
/// summation order; float fills are uniform in `[-1, 1)`.
pub fn random_inputs(op: &LinalgOp, seed: u64, integer: bool) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (shapes, _) = op.logical_shapes();
    shapes
        .iter()
        .map(|s| {
            (0..elem_count(s))
                .map(|_| {
                    if integer {
                        rng.random_range(-8i32..=8) as f64
                    } else {
                        rng.random_range(-1.0..1.0)
                    }
                })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MeasureConfig {
    pub repeats: usize,
    pub timeout_factor: f64,
    pub limits: InterpLimits,
}

impl Default for MeasureConfig {
    fn default() -> Self {
        MeasureConfig {
            repeats: 3,
            timeout_factor: 10.0,
            limits: InterpLimits::default(),
        }
    }
}

/// Median of `repeats` timings from `run`; marks a timeout when any run
/// exceeds `timeout_factor * base_time`.
pub fn measure_with<E>(
    repeats: usize,
    timeout_factor: f64,
    base_time: f64,
    mut run: impl FnMut() -> Result<f64, E>,
) -> Result<CostReport, E> {
    let repeats = repeats.max(1);
    let limit = timeout_factor * base_time;
    let mut times = Vec::with_capacity(repeats);
    for _ in 0..repeats {
        let t = run()?;
        times.push(t);
        if t > limit {
            return Ok(CostReport {
                total: f64::NAN,
                compute_term: f64::NAN,
                memory_term: 0.0,
                timed_out: true,
            });
        }
    }
    times.sort_by(f64::total_cmp);
    let mid = times.len() / 2;
    let median = if times.len() % 2 == 1 {
        times[mid]
    } else {
        0.5 * (times[mid - 1] + times[mid])
    };
    // clamp away zero so log-speedups stay finite
    let total = median.max(1e-9);
    Ok(CostReport::new(total, 0.0))
}

/// Wall-clock cost of interpreting `op` on fixed pseudo-random inputs.
pub fn measure(
    op: &LinalgOp,
    repeats: usize,
    timeout_factor: f64,
    base_time: f64,
    limits: &InterpLimits,
) -> Result<CostReport, InterpError> {
    let inputs = random_inputs(op, 0, false);
    measure_with(repeats, timeout_factor, base_time, || {
        let start = Instant::now();
        let out = interpret(op, &inputs, limits)?;
        std::hint::black_box(out);
        Ok(start.elapsed().as_secs_f64())
    })
}
