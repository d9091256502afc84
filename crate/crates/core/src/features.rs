//! Fixed-length observation vectors.
//!
//! Layout, for limits `N` loops, `L` loads, `D` dims, `tau` steps:
//!
//! ```text
//! [ log1p(trip) x N | loads L*D*(N+1) | store D*(N+1) | op counts 6 |
//!   history N*3*tau | vectorized flag | im2col flag ]
//! ```

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::ir::{AccessMatrix, LinalgOp};
use crate::transform::Action;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FeatureError {
    #[error("operation exceeds limits: {0}")]
    LimitExceeded(String),
    #[error("step {step} outside schedule of length {tau}")]
    StepOutOfRange { step: usize, tau: usize },
}

/// Size limits of the environment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvLimits {
    /// N
    pub max_loops: usize,
    /// M, counting the zero (no tiling) choice
    pub tile_choices: usize,
    /// D
    pub max_dims: usize,
    /// tau
    pub max_schedule_len: usize,
    /// L
    pub max_loads: usize,
}

impl Default for EnvLimits {
    fn default() -> Self {
        EnvLimits {
            max_loops: 7,
            tile_choices: 5,
            max_dims: 4,
            max_schedule_len: 7,
            max_loads: 3,
        }
    }
}

impl EnvLimits {
    pub fn observation_len(&self) -> usize {
        let (n, l, d, tau) = (self.max_loops, self.max_loads, self.max_dims, self.max_schedule_len);
        n + l * d * (n + 1) + d * (n + 1) + 6 + n * 3 * tau + 2
    }

    pub fn check(&self, op: &LinalgOp) -> Result<(), FeatureError> {
        if op.num_loops() > self.max_loops {
            return Err(FeatureError::LimitExceeded(format!(
                "{} loops > {}",
                op.num_loops(),
                self.max_loops
            )));
        }
        if op.loads.len() > self.max_loads {
            return Err(FeatureError::LimitExceeded(format!(
                "{} loads > {}",
                op.loads.len(),
                self.max_loads
            )));
        }
        if let Some(d) = op.accesses().map(AccessMatrix::dims).find(|&d| d > self.max_dims) {
            return Err(FeatureError::LimitExceeded(format!("{d} array dims > {}", self.max_dims)));
        }
        Ok(())
    }
}

const TILING: usize = 0;
const PARALLELIZATION: usize = 1;
const INTERCHANGE: usize = 2;

/// Per-loop, per-transformation, per-step parameters of applied actions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryTensor {
    n: usize,
    tau: usize,
    entries: Vec<f64>,
    pub vectorized: bool,
    pub im2col: bool,
}

impl HistoryTensor {
    pub fn new(limits: &EnvLimits) -> Self {
        let (n, tau) = (limits.max_loops, limits.max_schedule_len);
        HistoryTensor {
            n,
            tau,
            entries: vec![0.0; n * 3 * tau],
            vectorized: false,
            im2col: false,
        }
    }

    fn idx(&self, lp: usize, channel: usize, step: usize) -> usize {
        (lp * 3 + channel) * self.tau + step
    }

    pub fn get(&self, lp: usize, channel: usize, step: usize) -> f64 {
        self.entries[self.idx(lp, channel, step)]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    /// Records `action` taken at `step` on an operation with `n_loops` loops.
    /// Tile sizes go to channel 0 or 1, interchange `k` writes `k+1` on both
    /// swapped loops, the identity swap (`k = n_loops-1`) writes nothing.
    pub fn record(&mut self, action: &Action, step: usize, n_loops: usize) -> Result<(), FeatureError> {
        if step >= self.tau {
            return Err(FeatureError::StepOutOfRange { step, tau: self.tau });
        }
        match action {
            Action::Tiling { sizes } | Action::Parallelization { sizes } => {
                let ch = if matches!(action, Action::Tiling { .. }) {
                    TILING
                } else {
                    PARALLELIZATION
                };
                for (i, &s) in sizes.iter().enumerate().take(self.n) {
                    let at = self.idx(i, ch, step);
                    self.entries[at] = s as f64;
                }
            }
            Action::Interchange { k } => {
                if *k + 1 < n_loops.min(self.n) {
                    for lp in [*k, *k + 1] {
                        let at = self.idx(lp, INTERCHANGE, step);
                        self.entries[at] = (*k + 1) as f64;
                    }
                }
            }
            Action::Im2col => self.im2col = true,
            Action::Vectorization => self.vectorized = true,
        }
        Ok(())
    }
}

/// Functional form of [`HistoryTensor::record`].
pub fn record_history(
    history: &HistoryTensor,
    action: &Action,
    step: usize,
    n_loops: usize,
) -> Result<HistoryTensor, FeatureError> {
    let mut h = history.clone();
    h.record(action, step, n_loops)?;
    Ok(h)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Observation(pub Vec<f64>);

impl Observation {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

fn push_matrix(out: &mut Vec<f64>, m: Option<&AccessMatrix>, n_loops: usize, limits: &EnvLimits) {
    let (nmax, d) = (limits.max_loops, limits.max_dims);
    for r in 0..d {
        let row = m.and_then(|m| m.rows().get(r));
        for c in 0..=nmax {
            let v = match row {
                Some(row) if c < n_loops => row[c],
                Some(row) if c == nmax => row[n_loops],
                _ => 0,
            };
            out.push(v as f64);
        }
    }
}

pub fn extract(op: &LinalgOp, history: &HistoryTensor, limits: &EnvLimits) -> Result<Observation, FeatureError> {
    limits.check(op)?;
    let n = op.num_loops();
    let mut v = Vec::with_capacity(limits.observation_len());

    v.extend((0..limits.max_loops).map(|i| {
        op.loops
            .get(i)
            .map_or(0.0, |l| (l.trip_count() as f64).ln_1p())
    }));
    for j in 0..limits.max_loads {
        push_matrix(&mut v, op.loads.get(j), n, limits);
    }
    push_matrix(&mut v, op.store.as_ref(), n, limits);
    v.extend(op.counts.as_array().iter().map(|&c| c as f64));

    for lp in 0..limits.max_loops {
        for ch in 0..3 {
            for s in 0..limits.max_schedule_len {
                let x = if lp < history.n && s < history.tau {
                    history.get(lp, ch, s)
                } else {
                    0.0
                };
                v.push(if ch == INTERCHANGE { x } else { x.ln_1p() });
            }
        }
    }
    v.push(history.vectorized as u8 as f64);
    v.push(history.im2col as u8 as f64);

    debug_assert_eq!(v.len(), limits.observation_len());
    Ok(Observation(v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{build_operation, OpKind};

    #[test]
    fn default_length_is_290() {
        assert_eq!(EnvLimits::default().observation_len(), 290);
    }

    #[test]
    fn matmul_segments() {
        let lim = EnvLimits::default();
        let op = build_operation(OpKind::Matmul, &[2, 2, 2], 7).unwrap();
        let h = HistoryTensor::new(&lim);
        let obs = extract(&op, &h, &lim).unwrap();
        assert_eq!(obs.len(), 290);
        let l = 2f64.ln_1p();
        assert_eq!(&obs.0[..7], &[l, l, l, 0.0, 0.0, 0.0, 0.0]);
        // A row 0: i coefficient then padding, constant column at slot N
        assert_eq!(&obs.0[7..15], &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let counts_at = 7 + 96 + 32;
        assert_eq!(&obs.0[counts_at..counts_at + 6], &[1.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        assert!(obs.0[counts_at + 6..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn histories_only_change_tail_segments() {
        let lim = EnvLimits::default();
        let op = build_operation(OpKind::Matmul, &[8, 8, 8], 7).unwrap();
        let h0 = HistoryTensor::new(&lim);
        let mut h1 = h0.clone();
        h1.record(&Action::Tiling { sizes: vec![2, 4, 0] }, 0, 3).unwrap();
        h1.record(&Action::Vectorization, 1, 3).unwrap();
        let a = extract(&op, &h0, &lim).unwrap();
        let b = extract(&op, &h1, &lim).unwrap();
        let head = 7 + 96 + 32 + 6;
        assert_eq!(a.0[..head], b.0[..head]);
        assert_ne!(a.0[head..], b.0[head..]);
        assert_eq!(b.0[head], 2f64.ln_1p());
        assert_eq!(*b.0.last().unwrap(), 0.0);
        assert_eq!(b.0[b.len() - 2], 1.0);
    }

    #[test]
    fn record_entries() {
        let lim = EnvLimits::default();
        let mut h = HistoryTensor::new(&lim);
        h.record(&Action::Tiling { sizes: vec![2, 0, 0] }, 0, 3).unwrap();
        assert_eq!(h.get(0, 0, 0), 2.0);
        assert_eq!(h.entries().iter().filter(|&&x| x != 0.0).count(), 1);

        let mut p = HistoryTensor::new(&lim);
        p.record(&Action::Parallelization { sizes: vec![0, 4, 0] }, 2, 3).unwrap();
        assert_eq!(p.get(1, 1, 2), 4.0);

        let mut x = HistoryTensor::new(&lim);
        x.record(&Action::Interchange { k: 1 }, 3, 3).unwrap();
        assert_eq!((x.get(1, 2, 3), x.get(2, 2, 3)), (2.0, 2.0));

        let id = HistoryTensor::new(&lim);
        let same = record_history(&id, &Action::Interchange { k: 2 }, 0, 3).unwrap();
        assert_eq!(same, id);

        assert_eq!(
            h.record(&Action::Im2col, 7, 3),
            Err(FeatureError::StepOutOfRange { step: 7, tau: 7 })
        );
    }

    #[test]
    fn limits_enforced() {
        let lim = EnvLimits {
            max_loops: 2,
            ..EnvLimits::default()
        };
        let op = build_operation(OpKind::Matmul, &[2, 2, 2], 7).unwrap();
        assert!(matches!(
            extract(&op, &HistoryTensor::new(&lim), &lim),
            Err(FeatureError::LimitExceeded(_))
        ));
    }
}
