//! Matrix-free butterfly reconstruction: recover an L-level butterfly from an
//! operator that only supports forward and transpose products.
//!
//! The operator is sketched block-by-block at the middle level of the
//! row/column trees with structured Gaussian probes, each middle block is
//! recovered by a generalized Nystrom formula, and the resulting block
//! low-rank surrogate (entries cost O(r) each) is re-compressed into a nested
//! butterfly. Probe quality is verified with independent global probes, with
//! sketch-doubling retries.

use crate::butterfly::{bf_compress, Butterfly, CompressOpts};
use crate::cluster::BlockTree;
use crate::error::{Error, Result};
use crate::kernels::EntryEval;
use crate::types::{fro_norm, C64, CMat};
use ndarray::{Array2, ArrayView2, Axis};
use ndarray_linalg::SVD;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::sync::atomic::{AtomicUsize, Ordering};

/// Minimal product interface for operators that are only available through
/// their action on vectors.
pub trait LinOp: Sync {
    fn nrows(&self) -> usize;
    fn ncols(&self) -> usize;
    /// Y = A X for X of shape ncols x k.
    fn apply(&self, x: &ArrayView2<C64>) -> Result<CMat>;
    /// Y = A^T X (plain transpose) for X of shape nrows x k.
    fn apply_transpose(&self, x: &ArrayView2<C64>) -> Result<CMat>;
}

impl LinOp for Butterfly {
    fn nrows(&self) -> usize {
        Butterfly::nrows(self)
    }
    fn ncols(&self) -> usize {
        Butterfly::ncols(self)
    }
    fn apply(&self, x: &ArrayView2<C64>) -> Result<CMat> {
        Butterfly::apply(self, x)
    }
    fn apply_transpose(&self, x: &ArrayView2<C64>) -> Result<CMat> {
        Butterfly::apply_transpose(self, x)
    }
}

impl LinOp for CMat {
    fn nrows(&self) -> usize {
        self.shape()[0]
    }
    fn ncols(&self) -> usize {
        self.shape()[1]
    }
    fn apply(&self, x: &ArrayView2<C64>) -> Result<CMat> {
        if x.shape()[0] != self.shape()[1] {
            return Err(Error::ShapeMismatch { expected: self.shape()[1], got: x.shape()[0] });
        }
        Ok(self.dot(x))
    }
    fn apply_transpose(&self, x: &ArrayView2<C64>) -> Result<CMat> {
        if x.shape()[0] != self.shape()[0] {
            return Err(Error::ShapeMismatch { expected: self.shape()[0], got: x.shape()[0] });
        }
        Ok(self.t().dot(x))
    }
}

/// Wrapper that counts product calls (in vectors, not calls) and offers
/// stochastic sanity checks on the wrapped operator.
pub struct LinearOperatorHandle<'a> {
    op: &'a dyn LinOp,
    applies: AtomicUsize,
    transpose_applies: AtomicUsize,
}

impl<'a> LinearOperatorHandle<'a> {
    pub fn new(op: &'a dyn LinOp) -> Self {
        Self { op, applies: AtomicUsize::new(0), transpose_applies: AtomicUsize::new(0) }
    }

    pub fn apply_count(&self) -> usize {
        self.applies.load(Ordering::Relaxed)
    }

    pub fn transpose_apply_count(&self) -> usize {
        self.transpose_applies.load(Ordering::Relaxed)
    }

    /// Checks A(ax + by) = a Ax + b Ay on random probes.
    pub fn check_linearity(&self, seed: u64, rel_tol: f64) -> Result<()> {
        let n = self.ncols();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = gaussian(&mut rng, n, 2);
        let y = gaussian(&mut rng, n, 2);
        let a = C64::new(0.7, -1.3);
        let b = C64::new(-0.4, 0.9);
        let lhs = self.apply(&(&x * a + &y * b).view())?;
        let rhs = &self.apply(&x.view())? * a + &self.apply(&y.view())? * b;
        let scale = fro_norm(&lhs.view()).max(fro_norm(&rhs.view()));
        if crate::types::fro_dist(&lhs.view(), &rhs.view()) > rel_tol * scale.max(f64::MIN_POSITIVE)
        {
            return Err(Error::InvalidParameter("operator failed linearity probe".into()));
        }
        Ok(())
    }

    /// Checks y^T (A x) = x^T (A^T y) on random probes.
    pub fn check_transpose_consistency(&self, seed: u64, rel_tol: f64) -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5bd1e995);
        let x = gaussian(&mut rng, self.ncols(), 1);
        let y = gaussian(&mut rng, self.nrows(), 1);
        let ax = self.apply(&x.view())?;
        let aty = self.apply_transpose(&y.view())?;
        let lhs: C64 = y.column(0).iter().zip(ax.column(0).iter()).map(|(a, b)| *a * *b).sum();
        let rhs: C64 = x.column(0).iter().zip(aty.column(0).iter()).map(|(a, b)| *a * *b).sum();
        let scale = lhs.norm().max(rhs.norm());
        if (lhs - rhs).norm() > rel_tol * scale.max(f64::MIN_POSITIVE) {
            return Err(Error::InvalidParameter("operator failed transpose probe".into()));
        }
        Ok(())
    }
}

impl LinOp for LinearOperatorHandle<'_> {
    fn nrows(&self) -> usize {
        self.op.nrows()
    }
    fn ncols(&self) -> usize {
        self.op.ncols()
    }
    fn apply(&self, x: &ArrayView2<C64>) -> Result<CMat> {
        self.applies.fetch_add(x.shape()[1], Ordering::Relaxed);
        self.op.apply(x)
    }
    fn apply_transpose(&self, x: &ArrayView2<C64>) -> Result<CMat> {
        self.transpose_applies.fetch_add(x.shape()[1], Ordering::Relaxed);
        self.op.apply_transpose(x)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RandomOpts {
    pub seed: u64,
    /// Initial per-block sketch rank.
    pub rank_est: usize,
    pub oversample: usize,
    /// Verification probe vectors per attempt.
    pub probe_budget: usize,
    /// Sketch-doubling retries when verification fails.
    pub max_retries: usize,
    /// Accept when the probe error is below check_factor * tol.
    pub check_factor: f64,
}

impl Default for RandomOpts {
    fn default() -> Self {
        Self {
            seed: 0,
            rank_est: 16,
            oversample: 8,
            probe_budget: 20,
            max_retries: 3,
            check_factor: 10.0,
        }
    }
}

fn gaussian(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> CMat {
    Array2::from_shape_fn((rows, cols), |_| {
        let re: f64 = StandardNormal.sample(rng);
        let im: f64 = StandardNormal.sample(rng);
        C64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
    })
}

fn mix(parts: &[u64]) -> u64 {
    let mut h = 0x9e3779b97f4a7c15u64;
    for &p in parts {
        let mut x = p.wrapping_add(h);
        x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
        h = x ^ (x >> 31);
    }
    h
}

/// Moore-Penrose pseudoinverse via SVD with relative rank cutoff.
fn pinv(a: &CMat) -> Result<CMat> {
    let (u, s, vh) = a.svd(true, true)?;
    let u = u.expect("requested");
    let vh = vh.expect("requested");
    let s0 = s.iter().cloned().fold(0.0f64, f64::max);
    let cutoff = s0 * 1e-12;
    let r = s.iter().take_while(|&&x| x > cutoff).count();
    if r == 0 {
        return Ok(Array2::zeros((a.shape()[1], a.shape()[0])));
    }
    // V_r S_r^-1 U_r^H
    let mut vs = vh.slice(ndarray::s![..r, ..]).mapv(|z| z.conj()).reversed_axes().to_owned();
    for (k, mut col) in vs.axis_iter_mut(Axis(1)).enumerate() {
        col.mapv_inplace(|z| z / s[k]);
    }
    let uh = u.slice(ndarray::s![.., ..r]).mapv(|z| z.conj()).reversed_axes().to_owned();
    Ok(vs.dot(&uh))
}

/// Block low-rank surrogate over the middle level: entry (i, j) costs O(r).
struct MiddleSurrogate {
    row_blocks: Vec<(usize, usize)>,
    col_blocks: Vec<(usize, usize)>,
    /// u[t * nv + v]: block_rows x r
    u: Vec<CMat>,
    /// vt[t * nv + v]: r x block_cols
    vt: Vec<CMat>,
}

impl MiddleSurrogate {
    fn locate(blocks: &[(usize, usize)], idx: usize) -> usize {
        match blocks.binary_search_by(|&(s, _)| s.cmp(&idx)) {
            Ok(k) => k,
            Err(k) => k - 1,
        }
    }
}

impl EntryEval for MiddleSurrogate {
    fn nrows(&self) -> usize {
        self.row_blocks.iter().map(|b| b.1).sum()
    }
    fn ncols(&self) -> usize {
        self.col_blocks.iter().map(|b| b.1).sum()
    }
    fn eval(&self, i: usize, j: usize) -> C64 {
        let t = Self::locate(&self.row_blocks, i);
        let v = Self::locate(&self.col_blocks, j);
        let flat = t * self.col_blocks.len() + v;
        let li = i - self.row_blocks[t].0;
        let lj = j - self.col_blocks[v].0;
        let u = &self.u[flat];
        let vt = &self.vt[flat];
        (0..u.shape()[1]).map(|k| u[[li, k]] * vt[[k, lj]]).sum()
    }

    /// Grouped by middle block so each (t, v) patch is one small gemm.
    fn fill_block(&self, rows: &[usize], cols: &[usize]) -> CMat {
        let group = |blocks: &[(usize, usize)], idx: &[usize]| {
            let mut by_block: Vec<(Vec<usize>, Vec<usize>)> = vec![Default::default(); blocks.len()];
            for (pos, &i) in idx.iter().enumerate() {
                let b = Self::locate(blocks, i);
                by_block[b].0.push(pos);
                by_block[b].1.push(i - blocks[b].0);
            }
            by_block
        };
        let row_groups = group(&self.row_blocks, rows);
        let col_groups = group(&self.col_blocks, cols);
        let mut out = Array2::zeros((rows.len(), cols.len()));
        for (t, (rpos, rloc)) in row_groups.iter().enumerate() {
            if rpos.is_empty() {
                continue;
            }
            for (v, (cpos, cloc)) in col_groups.iter().enumerate() {
                if cpos.is_empty() {
                    continue;
                }
                let flat = t * self.col_blocks.len() + v;
                let usub = self.u[flat].select(Axis(0), rloc);
                let vsub = self.vt[flat].select(Axis(1), cloc);
                let patch = usub.dot(&vsub);
                for (a, &pr) in rpos.iter().enumerate() {
                    for (b, &pc) in cpos.iter().enumerate() {
                        out[[pr, pc]] = patch[[a, b]];
                    }
                }
            }
        }
        out
    }
}

/// Relative difference of two operators estimated on `q` Gaussian probes:
/// ||(A - B) X||_F / ||A X||_F.
pub fn probe_error(a: &dyn LinOp, b: &dyn LinOp, seed: u64, q: usize) -> Result<f64> {
    if a.ncols() != b.ncols() || a.nrows() != b.nrows() {
        return Err(Error::ShapeMismatch { expected: a.ncols(), got: b.ncols() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = gaussian(&mut rng, a.ncols(), q.max(1));
    let ya = a.apply(&x.view())?;
    let yb = b.apply(&x.view())?;
    let denom = fro_norm(&ya.view());
    if denom == 0.0 {
        return Ok(fro_norm(&yb.view()));
    }
    Ok(crate::types::fro_dist(&ya.view(), &yb.view()) / denom)
}

/// Reconstructs op as an L-level butterfly over the given trees using only
/// forward/transpose products. Deterministic for a fixed seed.
pub fn bf_random_matvec(
    op: &dyn LinOp,
    row_tree: &BlockTree,
    col_tree: &BlockTree,
    tol: f64,
    opts: &RandomOpts,
) -> Result<Butterfly> {
    let (m, n) = (row_tree.len(), col_tree.len());
    if op.nrows() != m {
        return Err(Error::ShapeMismatch { expected: m, got: op.nrows() });
    }
    if op.ncols() != n {
        return Err(Error::ShapeMismatch { expected: n, got: op.ncols() });
    }
    if row_tree.depth() != col_tree.depth() {
        return Err(Error::InvalidParameter("row/col subtree depths differ".into()));
    }
    let l_max = row_tree.depth();
    let compress_opts = CompressOpts { seed: mix(&[opts.seed, 0xc0]), ..CompressOpts::default() };

    if l_max == 0 {
        // leaf-sized block: a dense product is cheaper than sketching
        let eye = CMat::eye(n);
        let dense = op.apply(&eye.view())?;
        let eval = crate::kernels::OffsetEval::new(&dense, row_tree.root().0, col_tree.root().0);
        return bf_compress(&eval, row_tree, col_tree, tol, &compress_opts);
    }

    let h = l_max / 2; // middle split: rows at level h, cols at level l_max - h
    let row_blocks = row_tree.levels[h].clone();
    let col_blocks = col_tree.levels[l_max - h].clone();
    let nt = row_blocks.len();
    let nv = col_blocks.len();
    let row0 = row_tree.root().0;
    let col0 = col_tree.root().0;

    let mut s = opts.rank_est.max(1);
    let mut last_err = f64::INFINITY;
    for attempt in 0..=opts.max_retries {
        let s2 = s + opts.oversample;
        // right sketch: block-diagonal probes per middle column node
        let mut g_blocks = Vec::with_capacity(nv);
        for (v, &(_, len)) in col_blocks.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(&[opts.seed, 1, v as u64, attempt as u64]));
            g_blocks.push(gaussian(&mut rng, len, s));
        }
        let y = {
            let mut probe = Array2::<C64>::zeros((n, s * nv));
            for (v, &(start, len)) in col_blocks.iter().enumerate() {
                probe
                    .slice_mut(ndarray::s![start - col0..start - col0 + len, v * s..(v + 1) * s])
                    .assign(&g_blocks[v]);
            }
            op.apply(&probe.view())?
        };
        // left sketch: block-diagonal probes per middle row node
        let mut h_blocks = Vec::with_capacity(nt);
        for (t, &(_, len)) in row_blocks.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(&[opts.seed, 2, t as u64, attempt as u64]));
            h_blocks.push(gaussian(&mut rng, len, s2));
        }
        let w = {
            let mut probe = Array2::<C64>::zeros((m, s2 * nt));
            for (t, &(start, len)) in row_blocks.iter().enumerate() {
                probe
                    .slice_mut(ndarray::s![start - row0..start - row0 + len, t * s2..(t + 1) * s2])
                    .assign(&h_blocks[t]);
            }
            op.apply_transpose(&probe.view())?
        };

        // per-block generalized Nystrom: A_tv ~ Y_tv pinv(H_t^T A_tv G_v) (A_tv^T H_t)^T
        let mut us = Vec::with_capacity(nt * nv);
        let mut vts = Vec::with_capacity(nt * nv);
        let mut ok = true;
        for (t, &(rs, rl)) in row_blocks.iter().enumerate() {
            for (v, &(cs, cl)) in col_blocks.iter().enumerate() {
                let y_tv = y.slice(ndarray::s![rs - row0..rs - row0 + rl, v * s..(v + 1) * s]);
                let w_tv = w.slice(ndarray::s![cs - col0..cs - col0 + cl, t * s2..(t + 1) * s2]);
                // cross matrix H^T A G = (A^T H)^T G, shape s2 x s
                let cross = w_tv.t().dot(&g_blocks[v]);
                let Ok(p) = pinv(&cross) else {
                    ok = false;
                    us.push(Array2::zeros((rl, 0)));
                    vts.push(Array2::zeros((0, cl)));
                    continue;
                };
                // A_tv ~ (A G) pinv(H^T A G) (H^T A)
                us.push(y_tv.dot(&p));
                vts.push(w_tv.t().to_owned());
            }
        }
        let surrogate = MiddleSurrogate {
            row_blocks: row_blocks.clone(),
            col_blocks: col_blocks.clone(),
            u: us,
            vt: vts,
        };

        // verification with independent global probes
        let q = opts.probe_budget.min(n).max(1);
        let mut rng = ChaCha8Rng::seed_from_u64(mix(&[opts.seed, 3, attempt as u64]));
        let x = gaussian(&mut rng, n, q);
        let exact = op.apply(&x.view())?;
        let mut approx = Array2::<C64>::zeros((m, q));
        for (t, &(rs, rl)) in row_blocks.iter().enumerate() {
            for (v, &(cs, cl)) in col_blocks.iter().enumerate() {
                let flat = t * nv + v;
                let xv = x.slice(ndarray::s![cs - col0..cs - col0 + cl, ..]);
                let contrib =
                    surrogate.u[flat].dot(&surrogate.vt[flat].dot(&xv));
                let mut dst = approx.slice_mut(ndarray::s![rs - row0..rs - row0 + rl, ..]);
                dst += &contrib;
            }
        }
        let denom = fro_norm(&exact.view());
        let err = if denom == 0.0 {
            fro_norm(&approx.view())
        } else {
            crate::types::fro_dist(&exact.view(), &approx.view()) / denom
        };
        last_err = err;
        if ok && err <= opts.check_factor * tol {
            // the surrogate's block tables live in tree coordinates, so it
            // can feed the deterministic compressor directly
            return bf_compress(&surrogate, row_tree, col_tree, tol, &compress_opts);
        }
        let cap = row_blocks
            .iter()
            .map(|b| b.1)
            .chain(col_blocks.iter().map(|b| b.1))
            .max()
            .unwrap_or(1);
        if s >= cap && attempt > 0 {
            break; // sketch already saturates the middle blocks
        }
        s = (s * 2).min(cap.max(1));
    }
    Err(Error::ReconstructionTolerance { achieved: last_err, requested: tol })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::butterfly::{bf_compress, CompressOpts};
    use crate::kernels::{separated_clouds, KernelSystem};
    use crate::oracle::rel_fro_error;

    fn test_butterfly(side: usize, k0: f64, depth: usize, tol: f64) -> (Butterfly, CMat) {
        let (a, b) = separated_clouds(side, 0.1, 2.5);
        let n = a.len();
        let sys = KernelSystem::synthetic_oscillatory(a, b, k0);
        let rt = BlockTree::uniform(0, n, depth);
        let bf = bf_compress(&sys, &rt, &rt, tol, &CompressOpts::default()).unwrap();
        let rows: Vec<usize> = (0..n).collect();
        let dense = sys.fill_block(&rows, &rows);
        (bf, dense)
    }

    #[test]
    fn reconstructs_existing_butterfly() {
        let tol = 1e-5;
        let (bf, dense) = test_butterfly(6, 4.0, 2, tol);
        let rt = bf.row_tree.clone();
        let ct = bf.col_tree.clone();
        let rec = bf_random_matvec(&bf, &rt, &ct, tol, &RandomOpts::default()).unwrap();
        let err = rel_fro_error(&rec.densify(), &dense).unwrap();
        assert!(err <= 10.0 * tol, "reconstruction err {err}");
    }

    #[test]
    fn reconstructs_across_depths() {
        let tol = 1e-4;
        for depth in 1..=3usize {
            let (bf, dense) = test_butterfly(6, 3.0, depth, tol);
            let rt = bf.row_tree.clone();
            let rec = bf_random_matvec(&bf, &rt, &rt, tol, &RandomOpts::default()).unwrap();
            let err = rel_fro_error(&rec.densify(), &dense).unwrap();
            assert!(err <= 10.0 * tol, "depth {depth} err {err}");
        }
    }

    #[test]
    fn zero_operator_reconstructs_to_zero() {
        let n = 64;
        let zero: CMat = CMat::zeros((n, n));
        let rt = BlockTree::uniform(0, n, 2);
        let rec = bf_random_matvec(&zero, &rt, &rt, 1e-6, &RandomOpts::default()).unwrap();
        assert_eq!(crate::types::fro_norm(&rec.densify().view()), 0.0);
    }

    #[test]
    fn product_of_butterflies() {
        struct Prod<'a>(&'a Butterfly, &'a Butterfly);
        impl LinOp for Prod<'_> {
            fn nrows(&self) -> usize {
                self.0.nrows()
            }
            fn ncols(&self) -> usize {
                self.1.ncols()
            }
            fn apply(&self, x: &ArrayView2<C64>) -> crate::Result<CMat> {
                let y = self.1.apply(x)?;
                self.0.apply(&y.view())
            }
            fn apply_transpose(&self, x: &ArrayView2<C64>) -> crate::Result<CMat> {
                let y = self.0.apply_transpose(x)?;
                self.1.apply_transpose(&y.view())
            }
        }
        let tol = 1e-5;
        let (b1, d1) = test_butterfly(6, 2.0, 2, tol);
        let (b2, d2) = test_butterfly(6, 5.0, 2, tol);
        let prod = Prod(&b1, &b2);
        let rt = b1.row_tree.clone();
        let rec = bf_random_matvec(&prod, &rt, &rt, tol, &RandomOpts::default()).unwrap();
        let dense = d1.dot(&d2);
        let err = rel_fro_error(&rec.densify(), &dense).unwrap();
        assert!(err <= 20.0 * tol, "product err {err}");
    }

    #[test]
    fn seeded_runs_are_reproducible() {
        let tol = 1e-4;
        let (bf, _) = test_butterfly(5, 3.0, 2, tol);
        let rt = bf.row_tree.clone();
        let opts = RandomOpts { seed: 42, ..RandomOpts::default() };
        let r1 = bf_random_matvec(&bf, &rt, &rt, tol, &opts).unwrap();
        let r2 = bf_random_matvec(&bf, &rt, &rt, tol, &opts).unwrap();
        assert_eq!(r1.stats(), r2.stats());
        let d1 = r1.densify();
        let d2 = r2.densify();
        assert!(d1.iter().zip(d2.iter()).all(|(a, b)| a == b));
        // a different seed still reconstructs accurately
        let r3 = bf_random_matvec(
            &bf,
            &rt,
            &rt,
            tol,
            &RandomOpts { seed: 1234, ..RandomOpts::default() },
        )
        .unwrap();
        let err = probe_error(&bf, &r3, 7, 8).unwrap();
        assert!(err <= 10.0 * tol);
    }

    #[test]
    fn handle_counts_and_checks() {
        let (bf, _) = test_butterfly(4, 2.0, 1, 1e-5);
        let handle = LinearOperatorHandle::new(&bf);
        let x = CMat::zeros((bf.ncols(), 3));
        handle.apply(&x.view()).unwrap();
        handle.apply(&x.view()).unwrap();
        let y = CMat::zeros((bf.nrows(), 2));
        handle.apply_transpose(&y.view()).unwrap();
        assert_eq!(handle.apply_count(), 6);
        assert_eq!(handle.transpose_apply_count(), 2);
        handle.check_linearity(3, 1e-10).unwrap();
        handle.check_transpose_consistency(3, 1e-10).unwrap();

        // a nonlinear operator must fail the linearity probe
        struct Abs(usize);
        impl LinOp for Abs {
            fn nrows(&self) -> usize {
                self.0
            }
            fn ncols(&self) -> usize {
                self.0
            }
            fn apply(&self, x: &ArrayView2<C64>) -> crate::Result<CMat> {
                Ok(x.mapv(|z| C64::new(z.norm(), 0.0)))
            }
            fn apply_transpose(&self, x: &ArrayView2<C64>) -> crate::Result<CMat> {
                Ok(x.to_owned())
            }
        }
        let bad = Abs(16);
        let h = LinearOperatorHandle::new(&bad);
        assert!(h.check_linearity(3, 1e-6).is_err());
    }

    #[test]
    fn probe_error_identical_ops() {
        let (bf, dense) = test_butterfly(4, 3.0, 1, 1e-6);
        assert_eq!(probe_error(&bf, &bf, 11, 4).unwrap(), 0.0);
        let err = probe_error(&dense, &bf, 11, 4).unwrap();
        assert!(err <= 1e-5, "probe err {err}");
    }
}
