//! L-level butterfly factorization of one off-diagonal block: construction
//! from an entry evaluator via nested interpolative decompositions, fast
//! application, and storage accounting.
//!
//! The factor chain is  B^L W^L ... W^1 V^0  over a pair of complete block
//! subtrees of equal depth L: V^0 holds leaf interpolation matrices of the
//! column tree, each W^l holds transfer matrices pairing row nodes at level l
//! with column nodes at level L-l, and B^L holds dense skeleton blocks at row
//! leaves.

use crate::cluster::BlockTree;
use crate::error::{Error, Result};
use crate::kernels::EntryEval;
use crate::lowrank::id_compress;
use crate::types::{C64, CMat};
use ndarray::{concatenate, Array2, ArrayView2, Axis};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

/// Knobs for entry-evaluated butterfly construction. Proxy rows keep each ID
/// from touching all rows of its block: `beta * r_est + 8` sampled rows, with
/// doubling retries whenever an independent row sample rejects the fit.
#[derive(Debug, Clone, Copy)]
pub struct CompressOpts {
    pub seed: u64,
    pub beta: usize,
    pub r_est0: usize,
    /// Acceptance threshold for the verification sample, as a multiple of tol.
    pub check_factor: f64,
    pub max_retries: usize,
}

impl Default for CompressOpts {
    fn default() -> Self {
        Self { seed: 0, beta: 4, r_est0: 16, check_factor: 3.0, max_retries: 4 }
    }
}

#[derive(Debug, Clone)]
pub struct Butterfly {
    pub row_tree: BlockTree,
    pub col_tree: BlockTree,
    /// Leaf interpolation matrices of the column tree: 2^L blocks, r x leaf.
    v0: Vec<CMat>,
    /// transfers[l-1] for l in 1..=L, flat index t * 2^(L-l) + v, each
    /// r_out x (r_in1 + r_in2).
    transfers: Vec<Vec<CMat>>,
    /// Skeleton blocks at row leaves: 2^L blocks, leaf x r.
    bl: Vec<CMat>,
    /// ranks[l] = rank of the (row node t at level l, col node v at level L-l)
    /// interpolation, flat index t * 2^(L-l) + v.
    ranks: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BfStats {
    pub levels: usize,
    pub factor_count: usize,
    pub max_rank: usize,
    /// Total stored complex entries.
    pub storage_units: usize,
    /// Complex multiplies for one single-vector apply.
    pub flops_estimate: usize,
}

impl Butterfly {
    pub fn levels(&self) -> usize {
        self.row_tree.depth()
    }

    pub fn nrows(&self) -> usize {
        self.row_tree.len()
    }

    pub fn ncols(&self) -> usize {
        self.col_tree.len()
    }

    /// All-zero (rank 0) butterfly over the given trees.
    pub fn zero(row_tree: BlockTree, col_tree: BlockTree) -> Self {
        let row_tree = row_tree.truncated(0);
        let col_tree = col_tree.truncated(0);
        let (m, n) = (row_tree.len(), col_tree.len());
        Self {
            row_tree,
            col_tree,
            v0: vec![Array2::zeros((0, n))],
            transfers: vec![],
            bl: vec![Array2::zeros((m, 0))],
            ranks: vec![vec![0]],
        }
    }

    pub fn is_zero_rank(&self) -> bool {
        self.ranks.iter().all(|lvl| lvl.iter().all(|&r| r == 0))
    }

    /// Applies the factor chain to X (ncols x k), in block-local coordinates.
    pub fn apply(&self, x: &ArrayView2<C64>) -> Result<CMat> {
        if x.shape()[0] != self.ncols() {
            return Err(Error::ShapeMismatch { expected: self.ncols(), got: x.shape()[0] });
        }
        let k = x.shape()[1];
        let l_max = self.levels();
        let col_root = self.col_tree.root().0;
        let mut cur: Vec<CMat> = self
            .col_tree
            .leaves()
            .iter()
            .zip(&self.v0)
            .map(|(&(s, len), v)| v.dot(&x.slice(ndarray::s![s - col_root..s - col_root + len, ..])))
            .collect();
        for l in 1..=l_max {
            let nv = 1usize << (l_max - l);
            let nt = 1usize << l;
            let mut next = Vec::with_capacity(nt * nv);
            for t in 0..nt {
                let pt = t >> 1;
                for v in 0..nv {
                    let a = &cur[pt * 2 * nv + 2 * v];
                    let b = &cur[pt * 2 * nv + 2 * v + 1];
                    let stacked = concatenate(Axis(0), &[a.view(), b.view()]).unwrap();
                    next.push(self.transfers[l - 1][t * nv + v].dot(&stacked));
                }
            }
            cur = next;
        }
        let row_root = self.row_tree.root().0;
        let mut y = Array2::<C64>::zeros((self.nrows(), k));
        for (t, &(s, len)) in self.row_tree.leaves().iter().enumerate() {
            let block = self.bl[t].dot(&cur[t]);
            y.slice_mut(ndarray::s![s - row_root..s - row_root + len, ..]).assign(&block);
        }
        Ok(y)
    }

    /// Plain-transpose apply: (apply_transpose(I))^T == apply(I).
    pub fn apply_transpose(&self, x: &ArrayView2<C64>) -> Result<CMat> {
        if x.shape()[0] != self.nrows() {
            return Err(Error::ShapeMismatch { expected: self.nrows(), got: x.shape()[0] });
        }
        let k = x.shape()[1];
        let l_max = self.levels();
        let row_root = self.row_tree.root().0;
        let mut cur: Vec<CMat> = self
            .row_tree
            .leaves()
            .iter()
            .zip(&self.bl)
            .map(|(&(s, len), b)| {
                b.t().dot(&x.slice(ndarray::s![s - row_root..s - row_root + len, ..]))
            })
            .collect();
        for l in (1..=l_max).rev() {
            let nv = 1usize << (l_max - l);
            let nt = 1usize << l;
            let mut prev: Vec<CMat> = (0..nt / 2)
                .flat_map(|pt| {
                    (0..2 * nv).map(move |vc| (pt, vc))
                })
                .map(|(pt, vc)| Array2::zeros((self.ranks[l - 1][pt * 2 * nv + vc], k)))
                .collect();
            for t in 0..nt {
                let pt = t >> 1;
                for v in 0..nv {
                    let g = self.transfers[l - 1][t * nv + v].t().dot(&cur[t * nv + v]);
                    let r1 = self.ranks[l - 1][pt * 2 * nv + 2 * v];
                    let (top, bot) = g.view().split_at(Axis(0), r1);
                    prev[pt * 2 * nv + 2 * v] += &top;
                    prev[pt * 2 * nv + 2 * v + 1] += &bot;
                }
            }
            cur = prev;
        }
        let col_root = self.col_tree.root().0;
        let mut y = Array2::<C64>::zeros((self.ncols(), k));
        for (v, &(s, len)) in self.col_tree.leaves().iter().enumerate() {
            let block = self.v0[v].t().dot(&cur[v]);
            y.slice_mut(ndarray::s![s - col_root..s - col_root + len, ..]).assign(&block);
        }
        Ok(y)
    }

    /// Dense reconstruction via apply-to-identity; intended for tests and
    /// small base cases.
    pub fn densify(&self) -> CMat {
        let eye = CMat::eye(self.ncols());
        self.apply(&eye.view()).expect("shape is consistent")
    }

    pub fn stats(&self) -> BfStats {
        let mut storage = 0usize;
        let mut flops = 0usize;
        let mut max_rank = 0usize;
        for b in self.v0.iter().chain(self.bl.iter()).chain(self.transfers.iter().flatten()) {
            let (r, c) = (b.shape()[0], b.shape()[1]);
            storage += r * c;
            flops += r * c;
        }
        for lvl in &self.ranks {
            for &r in lvl {
                max_rank = max_rank.max(r);
            }
        }
        BfStats {
            levels: self.levels(),
            factor_count: self.levels() + 2,
            max_rank,
            storage_units: storage,
            flops_estimate: flops,
        }
    }

    /// Interpolation matrix V_{t,v} for row node t at `level`, column node v
    /// at level L-level, recomposed through the nested transfer chain. Used
    /// by the nestedness tests.
    pub fn composed_interp(&self, level: usize, t: usize, v: usize) -> CMat {
        if level == 0 {
            return self.v0[v].clone();
        }
        let nv = 1usize << (self.levels() - level);
        let w = &self.transfers[level - 1][t * nv + v];
        let left = self.composed_interp(level - 1, t >> 1, 2 * v);
        let right = self.composed_interp(level - 1, t >> 1, 2 * v + 1);
        let (r1, c1) = (left.shape()[0], left.shape()[1]);
        let (r2, c2) = (right.shape()[0], right.shape()[1]);
        let mut diag = Array2::<C64>::zeros((r1 + r2, c1 + c2));
        diag.slice_mut(ndarray::s![..r1, ..c1]).assign(&left);
        diag.slice_mut(ndarray::s![r1.., c1..]).assign(&right);
        w.dot(&diag)
    }

    /// Skeleton block of row leaf t (B^L entries), for tests.
    pub fn leaf_skeleton_block(&self, t: usize) -> &CMat {
        &self.bl[t]
    }

    pub(crate) fn parts(
        &self,
    ) -> (&BlockTree, &BlockTree, &Vec<CMat>, &Vec<Vec<CMat>>, &Vec<CMat>, &Vec<Vec<usize>>) {
        (&self.row_tree, &self.col_tree, &self.v0, &self.transfers, &self.bl, &self.ranks)
    }

    pub(crate) fn from_parts(
        row_tree: BlockTree,
        col_tree: BlockTree,
        v0: Vec<CMat>,
        transfers: Vec<Vec<CMat>>,
        bl: Vec<CMat>,
        ranks: Vec<Vec<usize>>,
    ) -> Self {
        Self { row_tree, col_tree, v0, transfers, bl, ranks }
    }
}

/// Largest butterfly depth for a block of the given side lengths: leaf blocks
/// keep at least `min_leaf` columns.
pub fn levels_for_block(row_len: usize, col_len: usize, avail_depth: usize, min_leaf: usize) -> usize {
    let len = row_len.min(col_len);
    let mut l = 0usize;
    while l < avail_depth && (len >> (l + 1)) >= min_leaf {
        l += 1;
    }
    l
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

/// One proxy-row ID: skeleton columns (global ids) plus interpolation matrix
/// for the block (row range) x (cols), verified on an independent row sample.
fn sampled_id(
    eval: &dyn EntryEval,
    row_range: (usize, usize),
    cols: &[usize],
    tol: f64,
    opts: &CompressOpts,
    seed: u64,
) -> Result<(Vec<usize>, CMat)> {
    let (rs, rl) = row_range;
    let all_rows: Vec<usize> = (rs..rs + rl).collect();
    let mut r_est = opts.r_est0.min(cols.len()).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for attempt in 0..=opts.max_retries {
        let want = (opts.beta * r_est + 8).min(rl);
        let rows: Vec<usize> = if want == rl {
            all_rows.clone()
        } else {
            sample(&mut rng, rl, want).iter().map(|i| rs + i).collect()
        };
        let block = eval.fill_block(&rows, cols);
        let id = id_compress(&block, tol)?;
        if want == rl {
            return Ok((id.skeleton.iter().map(|&c| cols[c]).collect(), id.interp));
        }
        // verify on a fresh sample
        let check_n = want.min(rl);
        let check_rows: Vec<usize> =
            sample(&mut rng, rl, check_n).iter().map(|i| rs + i).collect();
        let check = eval.fill_block(&check_rows, cols);
        let skel_cols: Vec<usize> = id.skeleton.clone();
        let mut skel_block = Array2::<C64>::zeros((check_n, skel_cols.len()));
        for (k, &c) in skel_cols.iter().enumerate() {
            skel_block.column_mut(k).assign(&check.column(c));
        }
        let approx = skel_block.dot(&id.interp);
        let denom = crate::types::fro_norm(&check.view());
        let err = if denom == 0.0 {
            0.0
        } else {
            crate::types::fro_dist(&check.view(), &approx.view()) / denom
        };
        if err <= opts.check_factor * tol || attempt == opts.max_retries {
            return Ok((id.skeleton.iter().map(|&c| cols[c]).collect(), id.interp));
        }
        r_est = (r_est * 2).min(cols.len().max(1));
    }
    unreachable!()
}

/// Butterfly compression of the block (row_tree root) x (col_tree root) from
/// an entry evaluator. Both trees must have equal depth L.
pub fn bf_compress(
    eval: &dyn EntryEval,
    row_tree: &BlockTree,
    col_tree: &BlockTree,
    tol: f64,
    opts: &CompressOpts,
) -> Result<Butterfly> {
    if row_tree.depth() != col_tree.depth() {
        return Err(Error::InvalidParameter("row/col subtree depths differ".into()));
    }
    if !(tol > 0.0 && tol < 1.0) {
        return Err(Error::InvalidParameter("tol must lie in (0, 1)".into()));
    }
    let l_max = row_tree.depth();
    let nl = 1usize << l_max;

    // stage 0: leaf-level column interpolation against the full row root
    let root_rows = row_tree.root();
    let stage0: Vec<(Vec<usize>, CMat)> = (0..nl)
        .into_par_iter()
        .map(|v| {
            let (s, len) = col_tree.leaves()[v];
            let cols: Vec<usize> = (s..s + len).collect();
            sampled_id(eval, root_rows, &cols, tol, opts, mix(&[opts.seed, 0, v as u64]))
        })
        .collect::<Result<_>>()?;
    let mut v0 = Vec::with_capacity(nl);
    let mut skel_prev = Vec::with_capacity(nl);
    let mut ranks = vec![Vec::new(); l_max + 1];
    for (skel, interp) in stage0 {
        ranks[0].push(skel.len());
        v0.push(interp);
        skel_prev.push(skel);
    }

    let mut transfers: Vec<Vec<CMat>> = Vec::with_capacity(l_max);
    for l in 1..=l_max {
        let nt = 1usize << l;
        let nv = 1usize << (l_max - l);
        let results: Vec<(Vec<usize>, CMat)> = (0..nt * nv)
            .into_par_iter()
            .map(|flat| {
                let t = flat / nv;
                let v = flat % nv;
                let pt = t >> 1;
                let c1 = &skel_prev[pt * 2 * nv + 2 * v];
                let c2 = &skel_prev[pt * 2 * nv + 2 * v + 1];
                let cols: Vec<usize> = c1.iter().chain(c2.iter()).copied().collect();
                // rank is bounded by the merged skeleton count, so the proxy
                // sample can be sized exactly
                let local = CompressOpts { r_est0: cols.len().max(1), max_retries: 2, ..*opts };
                sampled_id(
                    eval,
                    row_tree.levels[l][t],
                    &cols,
                    tol,
                    &local,
                    mix(&[opts.seed, l as u64, flat as u64]),
                )
            })
            .collect::<Result<_>>()?;
        let mut level_transfers = Vec::with_capacity(nt * nv);
        let mut skel_cur = Vec::with_capacity(nt * nv);
        for (skel, w) in results {
            ranks[l].push(skel.len());
            level_transfers.push(w);
            skel_cur.push(skel);
        }
        transfers.push(level_transfers);
        skel_prev = skel_cur;
    }

    let bl: Vec<CMat> = (0..nl)
        .into_par_iter()
        .map(|t| {
            let (s, len) = row_tree.leaves()[t];
            let rows: Vec<usize> = (s..s + len).collect();
            eval.fill_block(&rows, &skel_prev[t])
        })
        .collect();

    Ok(Butterfly { row_tree: row_tree.clone(), col_tree: col_tree.clone(), v0, transfers, bl, ranks })
}
