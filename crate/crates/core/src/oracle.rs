//! Dense reference path: full assembly, direct solve, and norms. This is the
//! trust anchor for every compressed-path comparison, so it stays independent
//! of the hierarchical code.

use crate::error::{Error, Result};
use crate::kernels::EntryEval;
use crate::types::{fro_norm, C64, CMat, CVec};
use ndarray::Array2;
use ndarray_linalg::Solve;
use rayon::prelude::*;

pub const DEFAULT_DENSE_CAP: usize = 8192;

pub struct DenseSystem {
    pub matrix: CMat,
    pub assembly_time: std::time::Duration,
}

/// Full O(N^2) evaluation, capped to keep accidental large runs out of CI.
pub fn dense_assemble(sys: &dyn EntryEval, max_n: usize) -> Result<DenseSystem> {
    let (m, n) = (sys.nrows(), sys.ncols());
    if m.max(n) > max_n {
        return Err(Error::DenseCapExceeded { n: m.max(n), cap: max_n });
    }
    let t0 = std::time::Instant::now();
    let mut matrix = Array2::<C64>::zeros((m, n));
    matrix
        .axis_iter_mut(ndarray::Axis(0))
        .into_par_iter()
        .enumerate()
        .for_each(|(i, mut row)| {
            for j in 0..n {
                row[j] = sys.eval(i, j);
            }
        });
    Ok(DenseSystem { matrix, assembly_time: t0.elapsed() })
}

impl DenseSystem {
    /// Partial-pivoted LU solve with a residual sanity check.
    pub fn solve(&self, b: &CVec) -> Result<CVec> {
        if self.matrix.shape()[0] != self.matrix.shape()[1] {
            return Err(Error::InvalidParameter("dense solve needs a square system".into()));
        }
        if b.len() != self.matrix.shape()[0] {
            return Err(Error::ShapeMismatch { expected: self.matrix.shape()[0], got: b.len() });
        }
        let x = self.matrix.solve(b).map_err(|_| Error::SingularMatrix)?;
        if x.iter().any(|z| !z.is_finite()) {
            return Err(Error::SingularMatrix);
        }
        Ok(x)
    }

    pub fn n(&self) -> usize {
        self.matrix.shape()[0]
    }
}

/// ||A - B||_F / ||B||_F.
pub fn rel_fro_error(a: &CMat, b: &CMat) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch { expected: b.len(), got: a.len() });
    }
    let denom = fro_norm(&b.view());
    if denom == 0.0 {
        return Err(Error::ZeroReference);
    }
    Ok(crate::types::fro_dist(&a.view(), &b.view()) / denom)
}
