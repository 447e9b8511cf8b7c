//! Hierarchical off-diagonal butterfly matrices.
//!
//! A forward matrix stores dense diagonal blocks at the cluster-tree leaves
//! and one butterfly per off-diagonal sibling block. Its approximate inverse
//! keeps inverted leaf blocks plus one square "correction" butterfly F per
//! non-leaf node, encoding D^-1 = (I + F) diag(D1^-1, D2^-1). The inverse is
//! built bottom-up: the sibling blocks are pulled through the child inverses
//! by randomized reconstruction and the two-by-two identity-plus-offdiagonal
//! system is inverted with a recursive Sherman-Morrison-Woodbury scheme whose
//! Schur complements are themselves reconstructed as butterflies.

use crate::butterfly::{bf_compress, levels_for_block, Butterfly, CompressOpts};
use crate::cluster::{BlockTree, ClusterTree, NodeId};
use crate::error::{Error, Result};
use crate::kernels::{EntryEval, OffsetEval, PermutedEval};
use crate::randomized::{bf_random_matvec, LinOp, RandomOpts};
use crate::types::{C64, CMat, CVec};
use ndarray::{Array2, ArrayView2};
use ndarray_linalg::Inverse;

/// Smallest butterfly leaf block; shallower blocks are kept dense.
const MIN_BF_LEAF: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatrixRole {
    Forward,
    Inverse,
}

#[derive(Debug, Clone, Copy)]
pub struct HodBfStats {
    pub n: usize,
    pub depth: usize,
    pub storage_units: usize,
    pub leaf_storage: usize,
    pub offdiag_storage: usize,
    pub max_rank: usize,
}

#[derive(Debug, Clone)]
pub struct HodBfMatrix {
    tree: ClusterTree,
    role: MatrixRole,
    tol: f64,
    /// Dense diagonal blocks (forward) or their inverses (inverse), in leaf
    /// order.
    leaf: Vec<CMat>,
    /// Forward role: per non-leaf node id, (upper, lower) sibling butterflies
    /// with upper = block (child1, child2).
    offdiag: Vec<Option<(Butterfly, Butterfly)>>,
    /// Inverse role: per non-leaf node id, the correction butterfly F.
    corrections: Vec<Option<Butterfly>>,
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

/// Butterfly depth for the sibling block of the children of a node at
/// `level`, given the tree depth.
fn sibling_bf_depth(tree: &ClusterTree, level: usize, len1: usize, len2: usize) -> usize {
    let avail = tree.depth() - (level + 1);
    levels_for_block(len1, len2, avail, MIN_BF_LEAF)
}

impl HodBfMatrix {
    /// Compresses `kernel` (indexed in original point order) over `tree`.
    pub fn construct(
        kernel: &dyn EntryEval,
        tree: &ClusterTree,
        tol: f64,
        seed: u64,
    ) -> Result<Self> {
        let n = tree.len();
        if kernel.nrows() != n || kernel.ncols() != n {
            return Err(Error::ShapeMismatch { expected: n, got: kernel.nrows() });
        }
        let eval = PermutedEval { inner: kernel, perm: tree.perm() };
        let depth = tree.depth();
        let n_nodes = (1usize << (depth + 1)) - 1;

        let mut leaf = Vec::with_capacity(1 << depth);
        for k in 0..(1usize << depth) {
            let id = (1usize << depth) - 1 + k;
            let node = tree.node(id);
            let idx: Vec<usize> = (node.start..node.start + node.len).collect();
            leaf.push(eval.fill_block(&idx, &idx));
        }

        let mut offdiag: Vec<Option<(Butterfly, Butterfly)>> = vec![None; n_nodes];
        for level in 0..depth {
            for id in ((1usize << level) - 1)..((1usize << (level + 1)) - 1) {
                let (c1, c2) = tree.children(id).expect("non-leaf");
                let (n1, n2) = (tree.node(c1).len, tree.node(c2).len);
                let d = sibling_bf_depth(tree, level, n1, n2);
                let rt = BlockTree::from_node(tree, c1, d);
                let ct = BlockTree::from_node(tree, c2, d);
                // extra proxy rows sharpen the interpolative decompositions so the
                // assembled matrix meets `tol` even on the deepest blocks
                let opts = |tag: u64| CompressOpts {
                    seed: mix(&[seed, id as u64, tag]),
                    beta: 6,
                    ..CompressOpts::default()
                };
                let upper = bf_compress(&eval, &rt, &ct, tol, &opts(0))?;
                let lower = bf_compress(&eval, &ct, &rt, tol, &opts(1))?;
                offdiag[id] = Some((upper, lower));
            }
        }
        Ok(Self { tree: tree.clone(), role: MatrixRole::Forward, tol, leaf, offdiag, corrections: vec![] })
    }

    pub fn role(&self) -> MatrixRole {
        self.role
    }

    #[allow(clippy::type_complexity)]
    pub(crate) fn parts(
        &self,
    ) -> (&ClusterTree, MatrixRole, f64, &[CMat], &[Option<(Butterfly, Butterfly)>], &[Option<Butterfly>])
    {
        (&self.tree, self.role, self.tol, &self.leaf, &self.offdiag, &self.corrections)
    }

    pub(crate) fn from_parts(
        tree: ClusterTree,
        role: MatrixRole,
        tol: f64,
        leaf: Vec<CMat>,
        offdiag: Vec<Option<(Butterfly, Butterfly)>>,
        corrections: Vec<Option<Butterfly>>,
    ) -> Self {
        Self { tree, role, tol, leaf, offdiag, corrections }
    }

    pub fn tol(&self) -> f64 {
        self.tol
    }

    pub fn n(&self) -> usize {
        self.tree.len()
    }

    pub fn tree(&self) -> &ClusterTree {
        &self.tree
    }

    fn leaf_index(&self, id: NodeId) -> usize {
        id - ((1usize << self.tree.depth()) - 1)
    }

    /// Forward product in tree coordinates, all leaves and sibling blocks.
    fn apply_forward_tree(&self, x: &ArrayView2<C64>) -> CMat {
        let k = x.shape()[1];
        let mut y = Array2::<C64>::zeros((self.n(), k));
        let depth = self.tree.depth();
        for kk in 0..(1usize << depth) {
            let id = (1usize << depth) - 1 + kk;
            let node = self.tree.node(id);
            let xr = x.slice(ndarray::s![node.start..node.start + node.len, ..]);
            let mut yr = y.slice_mut(ndarray::s![node.start..node.start + node.len, ..]);
            yr.assign(&self.leaf[kk].dot(&xr));
        }
        for (id, pair) in self.offdiag.iter().enumerate() {
            let Some((upper, lower)) = pair else { continue };
            let (c1, c2) = self.tree.children(id).expect("non-leaf");
            let (a, b) = (self.tree.node(c1), self.tree.node(c2));
            let x1 = x.slice(ndarray::s![a.start..a.start + a.len, ..]);
            let x2 = x.slice(ndarray::s![b.start..b.start + b.len, ..]);
            let u = upper.apply(&x2).expect("tree-consistent shapes");
            let l = lower.apply(&x1).expect("tree-consistent shapes");
            y.slice_mut(ndarray::s![a.start..a.start + a.len, ..]).scaled_add(C64::new(1.0, 0.0), &u);
            y.slice_mut(ndarray::s![b.start..b.start + b.len, ..]).scaled_add(C64::new(1.0, 0.0), &l);
        }
        y
    }

    /// Inverse product in tree coordinates, recursive over nodes.
    fn apply_inverse_node(&self, id: NodeId, x: &ArrayView2<C64>) -> CMat {
        if self.tree.is_leaf(id) {
            return self.leaf[self.leaf_index(id)].dot(x);
        }
        let (c1, c2) = self.tree.children(id).expect("non-leaf");
        let n1 = self.tree.node(c1).len;
        let y1 = self.apply_inverse_node(c1, &x.slice(ndarray::s![..n1, ..]));
        let y2 = self.apply_inverse_node(c2, &x.slice(ndarray::s![n1.., ..]));
        let mut y = ndarray::concatenate(ndarray::Axis(0), &[y1.view(), y2.view()]).unwrap();
        if let Some(f) = &self.corrections[id] {
            let fy = f.apply(&y.view()).expect("tree-consistent shapes");
            y += &fy;
        }
        y
    }

    fn apply_inverse_node_transpose(&self, id: NodeId, x: &ArrayView2<C64>) -> CMat {
        if self.tree.is_leaf(id) {
            return self.leaf[self.leaf_index(id)].t().dot(x);
        }
        let (c1, c2) = self.tree.children(id).expect("non-leaf");
        let n1 = self.tree.node(c1).len;
        let mut z = x.to_owned();
        if let Some(f) = &self.corrections[id] {
            let fz = f.apply_transpose(x).expect("tree-consistent shapes");
            z += &fz;
        }
        let y1 = self.apply_inverse_node_transpose(c1, &z.slice(ndarray::s![..n1, ..]));
        let y2 = self.apply_inverse_node_transpose(c2, &z.slice(ndarray::s![n1.., ..]));
        ndarray::concatenate(ndarray::Axis(0), &[y1.view(), y2.view()]).unwrap()
    }

    fn to_tree_order(&self, x: &[C64]) -> CMat {
        let perm = self.tree.perm();
        Array2::from_shape_fn((x.len(), 1), |(i, _)| x[perm[i]])
    }

    fn to_original_order(&self, y: &CMat) -> CVec {
        let perm_inv = self.tree.perm_inv();
        CVec::from_shape_fn(y.shape()[0], |p| y[[perm_inv[p], 0]])
    }

    /// y = A x with x, y in original point order.
    pub fn matvec(&self, x: &CVec) -> Result<CVec> {
        if self.role != MatrixRole::Forward {
            return Err(Error::RoleMismatch { expected: "forward" });
        }
        if x.len() != self.n() {
            return Err(Error::ShapeMismatch { expected: self.n(), got: x.len() });
        }
        let xt = self.to_tree_order(x.as_slice().unwrap());
        let yt = self.apply_forward_tree(&xt.view());
        Ok(self.to_original_order(&yt))
    }

    /// y ~ A^-1 x with x, y in original point order.
    pub fn apply_inverse(&self, x: &CVec) -> Result<CVec> {
        if self.role != MatrixRole::Inverse {
            return Err(Error::RoleMismatch { expected: "inverse" });
        }
        if x.len() != self.n() {
            return Err(Error::ShapeMismatch { expected: self.n(), got: x.len() });
        }
        let xt = self.to_tree_order(x.as_slice().unwrap());
        let yt = self.apply_inverse_node(self.tree.root(), &xt.view());
        Ok(self.to_original_order(&yt))
    }

    /// Dense reconstruction in original point order; for tests and small
    /// problems only.
    pub fn densify(&self) -> CMat {
        let n = self.n();
        let eye = CMat::eye(n);
        let yt = match self.role {
            MatrixRole::Forward => self.apply_forward_tree(&eye.view()),
            MatrixRole::Inverse => self.apply_inverse_node(self.tree.root(), &eye.view()),
        };
        // yt[i][j] are tree-order entries: A_orig[p][q] = yt[inv(p)][inv(q)]
        let inv = self.tree.perm_inv();
        Array2::from_shape_fn((n, n), |(p, q)| yt[[inv[p], inv[q]]])
    }

    /// Per tree level: (largest sibling block side, largest butterfly rank)
    /// over the off-diagonal blocks hanging below nodes of that level.
    /// Forward role only; empty for inverse matrices.
    pub fn offdiag_level_ranks(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for level in 0..self.tree.depth() {
            let mut block = 0usize;
            let mut rank = 0usize;
            for id in ((1usize << level) - 1)..((1usize << (level + 1)) - 1) {
                let Some((upper, lower)) = &self.offdiag[id] else { continue };
                let (c1, c2) = self.tree.children(id).expect("non-leaf");
                block = block.max(self.tree.node(c1).len).max(self.tree.node(c2).len);
                rank = rank.max(upper.stats().max_rank).max(lower.stats().max_rank);
            }
            if block > 0 {
                out.push((block, rank));
            }
        }
        out
    }

    pub fn stats(&self) -> HodBfStats {
        let leaf_storage: usize = self.leaf.iter().map(|m| m.len()).sum();
        let mut offdiag_storage = 0usize;
        let mut max_rank = 0usize;
        for pair in self.offdiag.iter().flatten() {
            for bf in [&pair.0, &pair.1] {
                let st = bf.stats();
                offdiag_storage += st.storage_units;
                max_rank = max_rank.max(st.max_rank);
            }
        }
        for f in self.corrections.iter().flatten() {
            let st = f.stats();
            offdiag_storage += st.storage_units;
            max_rank = max_rank.max(st.max_rank);
        }
        HodBfStats {
            n: self.n(),
            depth: self.tree.depth(),
            storage_units: leaf_storage + offdiag_storage,
            leaf_storage,
            offdiag_storage,
            max_rank,
        }
    }

    /// Approximate inverse at factorization tolerance `chi_fact`, which must
    /// not be tighter than the construction tolerance.
    pub fn invert(&self, chi_fact: f64, seed: u64) -> Result<HodBfMatrix> {
        if self.role != MatrixRole::Forward {
            return Err(Error::RoleMismatch { expected: "forward" });
        }
        if chi_fact < self.tol {
            return Err(Error::ToleranceOrder { fact: chi_fact, con: self.tol });
        }
        let tree = &self.tree;
        let depth = tree.depth();
        let n_nodes = (1usize << (depth + 1)) - 1;

        let mut leaf_inv = Vec::with_capacity(self.leaf.len());
        for (k, d) in self.leaf.iter().enumerate() {
            let id = (1usize << depth) - 1 + k;
            let inv = d.inv().map_err(|_| Error::SingularDiagonal { node: id })?;
            if inv.iter().any(|z| !z.is_finite()) {
                return Err(Error::SingularDiagonal { node: id });
            }
            leaf_inv.push(inv);
        }

        let mut corrections: Vec<Option<Butterfly>> = vec![None; n_nodes];
        let smw = SmwConfig {
            tol: chi_fact,
            dense_base: (2 * tree.leaf_size).max(64),
        };
        for level in (0..depth).rev() {
            for id in ((1usize << level) - 1)..((1usize << (level + 1)) - 1) {
                let (upper, lower) = self.offdiag[id].as_ref().expect("forward non-leaf");
                let (c1, c2) = tree.children(id).expect("non-leaf");
                let (n1, n2) = (tree.node(c1).len, tree.node(c2).len);
                let work = InvWork { mat_tree: tree, leaf_inv: &leaf_inv, corrections: &corrections, depth };
                let d = sibling_bf_depth(tree, level, n1, n2);
                let t1 = BlockTree::from_node(tree, c1, d);
                let t2 = BlockTree::from_node(tree, c2, d);
                let ropts = |tag: u64| RandomOpts { seed: mix(&[seed, id as u64, tag]), ..RandomOpts::default() };
                // pull the sibling blocks through the child inverses
                let b1p = {
                    let op = PreconditionedBlock { work: &work, inv_node: c1, bf: upper };
                    bf_random_matvec(&op, &t1, &t2, chi_fact, &ropts(1))?
                };
                let b2p = {
                    let op = PreconditionedBlock { work: &work, inv_node: c2, bf: lower };
                    bf_random_matvec(&op, &t2, &t1, chi_fact, &ropts(2))?
                };
                let tfull_depth = levels_for_block(n1 + n2, n1 + n2, depth - level, MIN_BF_LEAF);
                let tfull = BlockTree::from_node(tree, id, tfull_depth);
                let f = smw_parts(
                    None,
                    &b1p,
                    &b2p,
                    None,
                    &t1,
                    &t2,
                    &tfull,
                    &smw,
                    mix(&[seed, id as u64, 3]),
                    0,
                )?;
                corrections[id] = Some(f);
            }
        }
        Ok(HodBfMatrix {
            tree: tree.clone(),
            role: MatrixRole::Inverse,
            tol: chi_fact,
            leaf: leaf_inv,
            offdiag: vec![],
            corrections,
        })
    }
}

/// Free-function aliases matching the operation names used elsewhere.
pub fn hodbf_construct(
    kernel: &dyn EntryEval,
    tree: &ClusterTree,
    tol: f64,
    seed: u64,
) -> Result<HodBfMatrix> {
    HodBfMatrix::construct(kernel, tree, tol, seed)
}

pub fn hodbf_invert(mat: &HodBfMatrix, chi_fact: f64, seed: u64) -> Result<HodBfMatrix> {
    mat.invert(chi_fact, seed)
}

/// View over a partially built inverse: all descendants of the node being
/// queried are complete.
struct InvWork<'a> {
    mat_tree: &'a ClusterTree,
    leaf_inv: &'a [CMat],
    corrections: &'a [Option<Butterfly>],
    depth: usize,
}

impl InvWork<'_> {
    fn apply_node(&self, id: NodeId, x: &ArrayView2<C64>) -> CMat {
        if self.mat_tree.is_leaf(id) {
            let k = id - ((1usize << self.depth) - 1);
            return self.leaf_inv[k].dot(x);
        }
        let (c1, c2) = self.mat_tree.children(id).expect("non-leaf");
        let n1 = self.mat_tree.node(c1).len;
        let y1 = self.apply_node(c1, &x.slice(ndarray::s![..n1, ..]));
        let y2 = self.apply_node(c2, &x.slice(ndarray::s![n1.., ..]));
        let mut y = ndarray::concatenate(ndarray::Axis(0), &[y1.view(), y2.view()]).unwrap();
        if let Some(f) = &self.corrections[id] {
            let fy = f.apply(&y.view()).expect("tree-consistent shapes");
            y += &fy;
        }
        y
    }

    fn apply_node_transpose(&self, id: NodeId, x: &ArrayView2<C64>) -> CMat {
        if self.mat_tree.is_leaf(id) {
            let k = id - ((1usize << self.depth) - 1);
            return self.leaf_inv[k].t().dot(x);
        }
        let (c1, c2) = self.mat_tree.children(id).expect("non-leaf");
        let n1 = self.mat_tree.node(c1).len;
        let mut z = x.to_owned();
        if let Some(f) = &self.corrections[id] {
            let fz = f.apply_transpose(x).expect("tree-consistent shapes");
            z += &fz;
        }
        let y1 = self.apply_node_transpose(c1, &z.slice(ndarray::s![..n1, ..]));
        let y2 = self.apply_node_transpose(c2, &z.slice(ndarray::s![n1.., ..]));
        ndarray::concatenate(ndarray::Axis(0), &[y1.view(), y2.view()]).unwrap()
    }
}

/// D_node^-1 * B as a product operator.
struct PreconditionedBlock<'a> {
    work: &'a InvWork<'a>,
    inv_node: NodeId,
    bf: &'a Butterfly,
}

impl LinOp for PreconditionedBlock<'_> {
    fn nrows(&self) -> usize {
        self.bf.nrows()
    }
    fn ncols(&self) -> usize {
        self.bf.ncols()
    }
    fn apply(&self, x: &ArrayView2<C64>) -> Result<CMat> {
        let y = self.bf.apply(x)?;
        Ok(self.work.apply_node(self.inv_node, &y.view()))
    }
    fn apply_transpose(&self, x: &ArrayView2<C64>) -> Result<CMat> {
        let y = self.work.apply_node_transpose(self.inv_node, x);
        self.bf.apply_transpose(&y.view())
    }
}

struct SmwConfig {
    tol: f64,
    dense_base: usize,
}

fn corrected_apply(f: Option<&Butterfly>, x: CMat) -> CMat {
    match f {
        None => x,
        Some(f) => {
            let fx = f.apply(&x.view()).expect("tree-consistent shapes");
            x + fx
        }
    }
}

fn corrected_apply_transpose(f: Option<&Butterfly>, x: CMat) -> CMat {
    match f {
        None => x,
        Some(f) => {
            let fx = f.apply_transpose(&x.view()).expect("tree-consistent shapes");
            x + fx
        }
    }
}

/// Schur operand E11 - E12 (I + F22) E21 over the first child range.
struct SchurOp<'a> {
    e11: Option<&'a Butterfly>,
    e12: &'a Butterfly,
    e21: &'a Butterfly,
    f22: Option<&'a Butterfly>,
}

impl LinOp for SchurOp<'_> {
    fn nrows(&self) -> usize {
        self.e12.nrows()
    }
    fn ncols(&self) -> usize {
        self.e21.ncols()
    }
    fn apply(&self, x: &ArrayView2<C64>) -> Result<CMat> {
        let v = self.e21.apply(x)?;
        let v = corrected_apply(self.f22, v);
        let v = self.e12.apply(&v.view())?;
        let mut out = -v;
        if let Some(e11) = self.e11 {
            out += &e11.apply(x)?;
        }
        Ok(out)
    }
    fn apply_transpose(&self, x: &ArrayView2<C64>) -> Result<CMat> {
        let w = self.e12.apply_transpose(x)?;
        let w = corrected_apply_transpose(self.f22, w);
        let w = self.e21.apply_transpose(&w.view())?;
        let mut out = -w;
        if let Some(e11) = self.e11 {
            out += &e11.apply_transpose(x)?;
        }
        Ok(out)
    }
}

/// (I + E)^-1 - I where E = [E11 E12; E21 E22], expressed through the Schur
/// solve with A22^-1 = I + F22 and S^-1 = I + FS.
struct GinvMinusI<'a> {
    e12: &'a Butterfly,
    e21: &'a Butterfly,
    f22: Option<&'a Butterfly>,
    fs: &'a Butterfly,
    n1: usize,
    n2: usize,
}

impl LinOp for GinvMinusI<'_> {
    fn nrows(&self) -> usize {
        self.n1 + self.n2
    }
    fn ncols(&self) -> usize {
        self.n1 + self.n2
    }
    fn apply(&self, x: &ArrayView2<C64>) -> Result<CMat> {
        let x1 = x.slice(ndarray::s![..self.n1, ..]);
        let x2 = x.slice(ndarray::s![self.n1.., ..]);
        let t = corrected_apply(self.f22, x2.to_owned());
        let r1 = &x1 - &self.e12.apply(&t.view())?;
        let y1 = corrected_apply(Some(self.fs), r1);
        let r2 = &x2 - &self.e21.apply(&y1.view())?;
        let y2 = corrected_apply(self.f22, r2);
        let mut out = ndarray::concatenate(ndarray::Axis(0), &[y1.view(), y2.view()]).unwrap();
        out -= x;
        Ok(out)
    }
    fn apply_transpose(&self, x: &ArrayView2<C64>) -> Result<CMat> {
        let x1 = x.slice(ndarray::s![..self.n1, ..]);
        let x2 = x.slice(ndarray::s![self.n1.., ..]);
        let t = corrected_apply_transpose(self.f22, x2.to_owned());
        let r1 = &x1 - &self.e21.apply_transpose(&t.view())?;
        let z1 = corrected_apply_transpose(Some(self.fs), r1);
        let r2 = &x2 - &self.e12.apply_transpose(&z1.view())?;
        let z2 = corrected_apply_transpose(self.f22, r2);
        let mut out = ndarray::concatenate(ndarray::Axis(0), &[z1.view(), z2.view()]).unwrap();
        out -= x;
        Ok(out)
    }
}

/// Restriction of a square butterfly to one quadrant.
struct QuadrantOp<'a> {
    e: &'a Butterfly,
    row_off: usize,
    row_len: usize,
    col_off: usize,
    col_len: usize,
}

impl LinOp for QuadrantOp<'_> {
    fn nrows(&self) -> usize {
        self.row_len
    }
    fn ncols(&self) -> usize {
        self.col_len
    }
    fn apply(&self, x: &ArrayView2<C64>) -> Result<CMat> {
        let mut full = Array2::<C64>::zeros((self.e.ncols(), x.shape()[1]));
        full.slice_mut(ndarray::s![self.col_off..self.col_off + self.col_len, ..]).assign(x);
        let y = self.e.apply(&full.view())?;
        Ok(y.slice(ndarray::s![self.row_off..self.row_off + self.row_len, ..]).to_owned())
    }
    fn apply_transpose(&self, x: &ArrayView2<C64>) -> Result<CMat> {
        let mut full = Array2::<C64>::zeros((self.e.nrows(), x.shape()[1]));
        full.slice_mut(ndarray::s![self.row_off..self.row_off + self.row_len, ..]).assign(x);
        let y = self.e.apply_transpose(&full.view())?;
        Ok(y.slice(ndarray::s![self.col_off..self.col_off + self.col_len, ..]).to_owned())
    }
}

/// Inverse correction F with (I + E)^-1 = I + F for a 2x2 partition of E.
/// `t1`, `t2` are the child block trees, `tfull` spans the whole range.
#[allow(clippy::too_many_arguments)]
fn smw_parts(
    e11: Option<&Butterfly>,
    e12: &Butterfly,
    e21: &Butterfly,
    e22: Option<&Butterfly>,
    t1: &BlockTree,
    t2: &BlockTree,
    tfull: &BlockTree,
    cfg: &SmwConfig,
    seed: u64,
    rec_depth: usize,
) -> Result<Butterfly> {
    let n1 = t1.len();
    let n2 = t2.len();
    let n = n1 + n2;
    if n <= cfg.dense_base || tfull.depth() <= 1 {
        // dense base case: assemble I + E, invert, recompress the correction
        let mut g = CMat::eye(n);
        g.slice_mut(ndarray::s![..n1, n1..]).assign(&e12.densify());
        g.slice_mut(ndarray::s![n1.., ..n1]).assign(&e21.densify());
        if let Some(e) = e11 {
            g.slice_mut(ndarray::s![..n1, ..n1]).scaled_add(C64::new(1.0, 0.0), &e.densify());
        }
        if let Some(e) = e22 {
            g.slice_mut(ndarray::s![n1.., n1..]).scaled_add(C64::new(1.0, 0.0), &e.densify());
        }
        let mut f = g.inv().map_err(|_| Error::SingularSchur { depth: rec_depth })?;
        if f.iter().any(|z| !z.is_finite()) {
            return Err(Error::SingularSchur { depth: rec_depth });
        }
        for i in 0..n {
            f[[i, i]] -= C64::new(1.0, 0.0);
        }
        let start = tfull.root().0;
        let eval = OffsetEval::new(&f, start, start);
        let opts = CompressOpts { seed: mix(&[seed, 0xd]), ..CompressOpts::default() };
        return bf_compress(&eval, tfull, tfull, cfg.tol, &opts);
    }

    let f22 = match e22 {
        None => None,
        Some(e) => Some(smw_whole(e, t2, cfg, mix(&[seed, 22]), rec_depth + 1)?),
    };
    let schur = SchurOp { e11, e12, e21, f22: f22.as_ref() };
    let es = bf_random_matvec(
        &schur,
        t1,
        t1,
        cfg.tol,
        &RandomOpts { seed: mix(&[seed, 5]), ..RandomOpts::default() },
    )?;
    let fs = smw_whole(&es, t1, cfg, mix(&[seed, 11]), rec_depth + 1)?;
    let ginv = GinvMinusI { e12, e21, f22: f22.as_ref(), fs: &fs, n1, n2 };
    bf_random_matvec(
        &ginv,
        tfull,
        tfull,
        cfg.tol,
        &RandomOpts { seed: mix(&[seed, 7]), ..RandomOpts::default() },
    )
}

/// Inverse correction F with (I + E)^-1 = I + F for a whole square butterfly
/// E over block tree `t`.
fn smw_whole(
    e: &Butterfly,
    t: &BlockTree,
    cfg: &SmwConfig,
    seed: u64,
    rec_depth: usize,
) -> Result<Butterfly> {
    let n = t.len();
    if n <= cfg.dense_base || t.depth() <= 1 {
        let mut g = e.densify();
        for i in 0..n {
            g[[i, i]] += C64::new(1.0, 0.0);
        }
        let mut f = g.inv().map_err(|_| Error::SingularSchur { depth: rec_depth })?;
        if f.iter().any(|z| !z.is_finite()) {
            return Err(Error::SingularSchur { depth: rec_depth });
        }
        for i in 0..n {
            f[[i, i]] -= C64::new(1.0, 0.0);
        }
        let start = t.root().0;
        let eval = OffsetEval::new(&f, start, start);
        let opts = CompressOpts { seed: mix(&[seed, 0xe]), ..CompressOpts::default() };
        return bf_compress(&eval, t, t, cfg.tol, &opts);
    }
    let t1 = t.subtree(1, 0);
    let t2 = t.subtree(1, 1);
    let n1 = t1.len();
    let n2 = t2.len();
    let quad = |ro, rl, co, cl, tag: u64, rt: &BlockTree, ct: &BlockTree| -> Result<Butterfly> {
        let op = QuadrantOp { e, row_off: ro, row_len: rl, col_off: co, col_len: cl };
        bf_random_matvec(
            &op,
            rt,
            ct,
            cfg.tol,
            &RandomOpts { seed: mix(&[seed, tag]), ..RandomOpts::default() },
        )
    };
    let q11 = quad(0, n1, 0, n1, 31, &t1, &t1)?;
    let q12 = quad(0, n1, n1, n2, 32, &t1, &t2)?;
    let q21 = quad(n1, n2, 0, n1, 33, &t2, &t1)?;
    let q22 = quad(n1, n2, n1, n2, 34, &t2, &t2)?;
    smw_parts(Some(&q11), &q12, &q21, Some(&q22), &t1, &t2, t, cfg, mix(&[seed, 35]), rec_depth)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::SplitStrategy;
    use crate::geometry::{shape_generator, Shape};
    use crate::kernels::{KernelSystem, PhysicalParams};
    use crate::oracle::{dense_assemble, rel_fro_error, DEFAULT_DENSE_CAP};
    use crate::types::vec_norm;

    fn sphere_system(radius: f64, eps: C64, spacing: f64, freq: f64) -> KernelSystem {
        let cloud = shape_generator(&Shape::Sphere { radius, eps }, spacing).unwrap();
        KernelSystem::physical(PhysicalParams::new(freq).unwrap(), cloud).unwrap()
    }

    fn small_system() -> (KernelSystem, ClusterTree) {
        // weak dielectric sphere, a few hundred unknowns
        let sys = sphere_system(0.25, C64::new(2.0, 0.0), 0.05, 3.0e8);
        let tree = ClusterTree::build(sys.cloud().unwrap(), 32, SplitStrategy::LongestAxisMedian).unwrap();
        (sys, tree)
    }

    #[test]
    fn construct_matches_dense() {
        let (sys, tree) = small_system();
        let tol = 1e-5;
        let hb = HodBfMatrix::construct(&sys, &tree, tol, 1).unwrap();
        let dense = dense_assemble(&sys, DEFAULT_DENSE_CAP).unwrap();
        let err = rel_fro_error(&hb.densify(), &dense.matrix).unwrap();
        assert!(err <= 10.0 * tol, "construct err {err}");
        assert!(hb.stats().storage_units > 0);
    }

    #[test]
    fn matvec_matches_dense_in_original_order() {
        let (sys, tree) = small_system();
        let hb = HodBfMatrix::construct(&sys, &tree, 1e-6, 2).unwrap();
        let n = hb.n();
        let x = CVec::from_shape_fn(n, |i| C64::new((i as f64 * 0.37).sin(), (i as f64 * 0.11).cos()));
        let y = hb.matvec(&x).unwrap();
        let dense = dense_assemble(&sys, DEFAULT_DENSE_CAP).unwrap();
        let y_ref = dense.matrix.dot(&x);
        let err = vec_norm(&(&y - &y_ref).to_vec()) / vec_norm(&y_ref.to_vec());
        assert!(err <= 1e-5, "matvec err {err}");
    }

    #[test]
    fn invert_applies_inverse() {
        let (sys, tree) = small_system();
        let chi_con = 1e-5;
        let chi_fact = 1e-4;
        let hb = HodBfMatrix::construct(&sys, &tree, chi_con, 3).unwrap();
        let inv = hb.invert(chi_fact, 4).unwrap();
        assert_eq!(inv.role(), MatrixRole::Inverse);
        let n = hb.n();
        let b = CVec::from_shape_fn(n, |i| C64::new(1.0, 0.2 * (i as f64 * 0.13).sin()));
        let x = inv.apply_inverse(&b).unwrap();
        // residual against the dense operator
        let dense = dense_assemble(&sys, DEFAULT_DENSE_CAP).unwrap();
        let r = &dense.matrix.dot(&x) - &b;
        let rel = vec_norm(&r.to_vec()) / vec_norm(&b.to_vec());
        assert!(rel <= 100.0 * chi_fact, "inverse residual {rel}");
    }

    #[test]
    fn background_inverse_is_identityish() {
        // vacuum sphere: contrast zero, A = I, inverse = I
        let sys = sphere_system(0.2, C64::new(1.0 + 1e-9, 0.0), 0.05, 3.0e8);
        let tree = ClusterTree::build(sys.cloud().unwrap(), 16, SplitStrategy::LongestAxisMedian).unwrap();
        let hb = HodBfMatrix::construct(&sys, &tree, 1e-6, 5).unwrap();
        let inv = hb.invert(1e-6, 6).unwrap();
        let n = hb.n();
        let b = CVec::from_shape_fn(n, |i| C64::new((i % 7) as f64, -((i % 3) as f64)));
        let x = inv.apply_inverse(&b).unwrap();
        let err = vec_norm(&(&x - &b).to_vec()) / vec_norm(&b.to_vec());
        assert!(err <= 1e-5, "identity inverse err {err}");
    }

    #[test]
    fn role_and_tolerance_guards() {
        let (sys, tree) = small_system();
        let hb = HodBfMatrix::construct(&sys, &tree, 1e-4, 7).unwrap();
        let n = hb.n();
        let x = CVec::from_elem(n, C64::new(1.0, 0.0));
        assert!(matches!(hb.apply_inverse(&x), Err(Error::RoleMismatch { .. })));
        assert!(matches!(hb.invert(1e-6, 8), Err(Error::ToleranceOrder { .. })));
        let inv = hb.invert(1e-3, 9).unwrap();
        assert!(matches!(inv.matvec(&x), Err(Error::RoleMismatch { .. })));
        assert!(matches!(inv.invert(1e-2, 10), Err(Error::RoleMismatch { .. })));
    }
}
