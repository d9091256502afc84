#![allow(dead_code)]

use optgym::features::EnvLimits;
use optgym::ir::{build_operation, LinalgOp, OpKind};
use optgym::transform::{tile_candidates, Action, ActionMask, TransformKind};
use rand::Rng;

/// Random op with every dimension in `1..=8`.
pub fn small_op<R: Rng>(rng: &mut R) -> LinalgOp {
    let kind = OpKind::ALL[rng.random_range(0..OpKind::ALL.len())];
    let mut d = |lo: usize, hi: usize| rng.random_range(lo..=hi);
    let shape = match kind {
        OpKind::Matmul => vec![d(1, 8), d(1, 8), d(1, 8)],
        OpKind::Conv2D => {
            let (kh, kw) = (d(1, 3), d(1, 3));
            vec![d(1, 2), d(kh, 8), d(kw, 8), d(1, 8), d(1, 8), kh, kw]
        }
        OpKind::Maxpool => {
            let (kh, kw) = (d(1, 3), d(1, 3));
            vec![d(1, 2), d(kh, 8), d(kw, 8), d(1, 8), kh, kw]
        }
        OpKind::Add | OpKind::Relu => {
            let rank = d(1, 4);
            (0..rank).map(|_| d(1, 8)).collect()
        }
    };
    build_operation(kind, &shape, 7).unwrap()
}

/// Uniformly random action allowed by `mask`.
pub fn random_legal_action<R: Rng>(op: &LinalgOp, mask: &ActionMask, limits: &EnvLimits, rng: &mut R) -> Action {
    let kinds: Vec<usize> = (0..5).filter(|&i| mask.transform[i]).collect();
    let kind = TransformKind::from_index(kinds[rng.random_range(0..kinds.len())]).unwrap();
    let n = op.num_loops();
    match kind {
        TransformKind::Tiling | TransformKind::Parallelization => {
            let cands = tile_candidates(op, limits);
            let sizes = (0..n)
                .map(|i| {
                    let legal: Vec<u64> = cands[i]
                        .iter()
                        .zip(&mask.tile_sizes[i])
                        .filter(|(_, &ok)| ok)
                        .map(|(&c, _)| c)
                        .collect();
                    legal[rng.random_range(0..legal.len())]
                })
                .collect();
            if kind == TransformKind::Tiling {
                Action::Tiling { sizes }
            } else {
                Action::Parallelization { sizes }
            }
        }
        TransformKind::Interchange => {
            let ks: Vec<usize> = (0..mask.interchange.len()).filter(|&k| mask.interchange[k]).collect();
            Action::Interchange {
                k: ks[rng.random_range(0..ks.len())],
            }
        }
        TransformKind::Im2col => Action::Im2col,
        TransformKind::Vectorization => Action::Vectorization,
    }
}
