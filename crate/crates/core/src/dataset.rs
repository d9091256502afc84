//! Synthetic operation datasets and their JSON-lines encoding.

use std::collections::BTreeMap;
use std::io::{self, BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ir::{build_operation, LinalgOp, OpKind};

/// Inclusive range for the extent dimensions of one kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DimRange {
    pub lo: usize,
    pub hi: usize,
}

impl DimRange {
    pub const fn new(lo: usize, hi: usize) -> Self {
        DimRange { lo, hi }
    }

    /// Draws a value and snaps it to a multiple of 4 inside the range, so
    /// every extent has the divisors 2 and 4.
    fn sample(&self, rng: &mut impl Rng) -> usize {
        let lo = self.lo.max(4).div_ceil(4) * 4;
        let hi = (self.hi / 4 * 4).max(lo);
        rng.random_range(lo / 4..=hi / 4) * 4
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub train_counts: BTreeMap<OpKind, usize>,
    pub validation_counts: BTreeMap<OpKind, usize>,
    pub ranges: BTreeMap<OpKind, DimRange>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            train_counts: default_train_counts(),
            validation_counts: default_validation_counts(),
            ranges: default_ranges(),
        }
    }
}

/// Operation mix of the reference training set (1088 ops).
pub fn default_train_counts() -> BTreeMap<OpKind, usize> {
    [
        (OpKind::Matmul, 175),
        (OpKind::Conv2D, 232),
        (OpKind::Maxpool, 200),
        (OpKind::Add, 248),
        (OpKind::Relu, 233),
    ]
    .into_iter()
    .collect()
}

/// Operation mix of the reference validation set (67 ops).
pub fn default_validation_counts() -> BTreeMap<OpKind, usize> {
    [
        (OpKind::Matmul, 15),
        (OpKind::Conv2D, 18),
        (OpKind::Maxpool, 10),
        (OpKind::Add, 10),
        (OpKind::Relu, 14),
    ]
    .into_iter()
    .collect()
}

pub fn default_ranges() -> BTreeMap<OpKind, DimRange> {
    [
        (OpKind::Matmul, DimRange::new(16, 512)),
        (OpKind::Conv2D, DimRange::new(4, 64)),
        (OpKind::Maxpool, DimRange::new(4, 128)),
        (OpKind::Add, DimRange::new(4, 256)),
        (OpKind::Relu, DimRange::new(4, 256)),
    ]
    .into_iter()
    .collect()
}

/// Same ranges for every kind.
pub fn uniform_ranges(range: DimRange) -> BTreeMap<OpKind, DimRange> {
    OpKind::ALL.iter().map(|&k| (k, range)).collect()
}

const BATCHES: [usize; 3] = [1, 2, 4];
const CONV_KERNELS: [usize; 2] = [1, 3];
const POOL_WINDOWS: [usize; 2] = [2, 3];

fn random_shape(kind: OpKind, range: DimRange, rng: &mut impl Rng) -> Vec<usize> {
    let pick = |rng: &mut _, xs: &[usize]| xs[Rng::random_range(rng, 0..xs.len())];
    match kind {
        OpKind::Matmul => (0..3).map(|_| range.sample(rng)).collect(),
        OpKind::Conv2D => {
            let b = pick(rng, &BATCHES);
            let (oh, ow) = (range.sample(rng), range.sample(rng));
            let (cin, cout) = (range.sample(rng), range.sample(rng));
            let k = pick(rng, &CONV_KERNELS);
            vec![b, oh + k - 1, ow + k - 1, cin, cout, k, k]
        }
        OpKind::Maxpool => {
            let b = pick(rng, &BATCHES);
            let (oh, ow, c) = (range.sample(rng), range.sample(rng), range.sample(rng));
            let k = pick(rng, &POOL_WINDOWS);
            vec![b, oh + k - 1, ow + k - 1, c, k, k]
        }
        OpKind::Add | OpKind::Relu => {
            let rank = rng.random_range(1..=4);
            (0..rank).map(|_| range.sample(rng)).collect()
        }
    }
}

/// Generates `counts[kind]` operations per kind, kinds in declaration order.
/// Deterministic for a fixed seed.
pub fn generate_dataset(
    seed: u64,
    counts: &BTreeMap<OpKind, usize>,
    ranges: &BTreeMap<OpKind, DimRange>,
    max_loops: usize,
) -> Vec<LinalgOp> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let defaults = default_ranges();
    let mut ops = Vec::new();
    for kind in OpKind::ALL {
        let count = counts.get(&kind).copied().unwrap_or(0);
        let range = ranges.get(&kind).or_else(|| defaults.get(&kind)).copied().unwrap();
        for _ in 0..count {
            let shape = random_shape(kind, range, &mut rng);
            let op = build_operation(kind, &shape, max_loops)
                .expect("generated shapes are always valid for their kind");
            ops.push(op);
        }
    }
    ops
}

pub fn write_jsonl<W: Write>(mut w: W, ops: &[LinalgOp]) -> io::Result<()> {
    for op in ops {
        serde_json::to_writer(&mut w, op)?;
        w.write_all(b"\n")?;
    }
    w.flush()
}

pub fn read_jsonl<R: BufRead>(r: R) -> io::Result<Vec<LinalgOp>> {
    let mut ops = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let op: LinalgOp = serde_json::from_str(&line)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, format!("line {}: {e}", i + 1)))?;
        ops.push(op);
    }
    Ok(ops)
}
