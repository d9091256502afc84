//! Flat action list for the simple-action-space ablation.

use crate::features::EnvLimits;
use crate::ir::LinalgOp;
use crate::transform::{tile_candidates, Action, ActionMask, TransformKind};

/// Uniform tile sizes offered for tiling and parallelization.
pub const UNIFORM_SIZES: [u64; 3] = [0, 4, 32];
/// Loops covered by the uniform tile vectors.
pub const UNIFORM_LOOPS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SimpleEntry {
    Tiling(u64),
    Parallelization(u64),
    Interchange(usize),
    Im2col,
    Vectorization,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimpleSpace {
    pub entries: Vec<SimpleEntry>,
}

fn uniform(op: &LinalgOp, u: u64) -> Vec<u64> {
    let n = op.num_loops();
    (0..n).map(|i| if i < UNIFORM_LOOPS.min(n) { u } else { 0 }).collect()
}

impl SimpleSpace {
    pub fn new(limits: &EnvLimits) -> Self {
        let mut entries: Vec<SimpleEntry> = UNIFORM_SIZES.iter().map(|&u| SimpleEntry::Tiling(u)).collect();
        entries.extend(UNIFORM_SIZES.iter().map(|&u| SimpleEntry::Parallelization(u)));
        entries.extend((0..limits.max_loops).map(SimpleEntry::Interchange));
        entries.push(SimpleEntry::Im2col);
        entries.push(SimpleEntry::Vectorization);
        SimpleSpace { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn action(&self, index: usize, op: &LinalgOp) -> Action {
        match self.entries[index] {
            SimpleEntry::Tiling(u) => Action::Tiling { sizes: uniform(op, u) },
            SimpleEntry::Parallelization(u) => Action::Parallelization { sizes: uniform(op, u) },
            SimpleEntry::Interchange(k) => Action::Interchange { k },
            SimpleEntry::Im2col => Action::Im2col,
            SimpleEntry::Vectorization => Action::Vectorization,
        }
    }

    pub fn mask(&self, op: &LinalgOp, mask: &ActionMask, limits: &EnvLimits) -> Vec<bool> {
        let cands = tile_candidates(op, limits);
        let n = op.num_loops();
        let sizes_ok = |u: u64| {
            u == 0
                || (0..UNIFORM_LOOPS.min(n)).all(|i| {
                    cands[i]
                        .iter()
                        .zip(&mask.tile_sizes[i])
                        .skip(1)
                        .any(|(&c, &ok)| ok && c == u)
                })
        };
        self.entries
            .iter()
            .map(|e| match *e {
                SimpleEntry::Tiling(u) => mask.allows(TransformKind::Tiling) && sizes_ok(u),
                SimpleEntry::Parallelization(u) => mask.allows(TransformKind::Parallelization) && sizes_ok(u),
                SimpleEntry::Interchange(k) => {
                    mask.allows(TransformKind::Interchange) && mask.interchange.get(k).copied().unwrap_or(false)
                }
                SimpleEntry::Im2col => mask.allows(TransformKind::Im2col),
                SimpleEntry::Vectorization => mask.allows(TransformKind::Vectorization),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{build_operation, OpKind};
    use crate::transform::{apply_action, compute_mask, Schedule};

    #[test]
    fn grid_size() {
        assert_eq!(SimpleSpace::new(&EnvLimits::default()).len(), 3 + 3 + 7 + 2);
    }

    #[test]
    fn legal_entries_apply() {
        let lim = EnvLimits::default();
        let s = SimpleSpace::new(&lim);
        let op = build_operation(OpKind::Matmul, &[64, 12, 32], 7).unwrap();
        let m = compute_mask(&op, &Schedule::default(), 0, &lim);
        let legal = s.mask(&op, &m, &lim);
        // 12 is not a multiple of 32
        assert!(legal[0] && legal[1] && !legal[2]);
        for (i, ok) in legal.iter().enumerate() {
            if *ok {
                apply_action(&op, &s.action(i, &op), 7).unwrap();
            }
        }
        assert!(!legal[s.len() - 2]);
    }
}
