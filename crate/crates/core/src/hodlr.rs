//! HOD-LR baseline: the same weak-admissibility partitioning as the
//! butterfly format, but with each off-diagonal sibling block held as a plain
//! low-rank cross approximation. Used as the storage/complexity baseline; no
//! inversion path.

use crate::cluster::{ClusterTree, NodeId};
use crate::error::{Error, Result};
use crate::kernels::{EntryEval, PermutedEval};
use crate::lowrank::{aca_compress, AcaFactor};
use crate::types::{C64, CMat, CVec};
use ndarray::{Array2, ArrayView2};

#[derive(Debug, Clone, Copy)]
pub struct HodLrStats {
    pub n: usize,
    pub depth: usize,
    pub storage_units: usize,
    pub leaf_storage: usize,
    pub offdiag_storage: usize,
    pub max_rank: usize,
}

#[derive(Debug, Clone)]
pub struct HodLrMatrix {
    tree: ClusterTree,
    tol: f64,
    leaf: Vec<CMat>,
    /// Per non-leaf node id: (upper, lower) with upper = block (child1, child2).
    offdiag: Vec<Option<(AcaFactor, AcaFactor)>>,
}

impl HodLrMatrix {
    pub fn construct(kernel: &dyn EntryEval, tree: &ClusterTree, tol: f64) -> Result<Self> {
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

        let mut offdiag: Vec<Option<(AcaFactor, AcaFactor)>> = vec![None; n_nodes];
        for level in 0..depth {
            for id in ((1usize << level) - 1)..((1usize << (level + 1)) - 1) {
                let (c1, c2) = tree.children(id).expect("non-leaf");
                let (a, b) = (tree.node(c1), tree.node(c2));
                let r1: Vec<usize> = (a.start..a.start + a.len).collect();
                let r2: Vec<usize> = (b.start..b.start + b.len).collect();
                let upper = aca_compress(&eval, &r1, &r2, tol)?;
                let lower = aca_compress(&eval, &r2, &r1, tol)?;
                offdiag[id] = Some((upper, lower));
            }
        }
        Ok(Self { tree: tree.clone(), tol, leaf, offdiag })
    }

    pub fn n(&self) -> usize {
        self.tree.len()
    }

    pub fn tol(&self) -> f64 {
        self.tol
    }

    fn apply_tree(&self, x: &ArrayView2<C64>) -> CMat {
        let k = x.shape()[1];
        let mut y = Array2::<C64>::zeros((self.n(), k));
        let depth = self.tree.depth();
        for kk in 0..(1usize << depth) {
            let id = (1usize << depth) - 1 + kk;
            let node = self.tree.node(id);
            let xr = x.slice(ndarray::s![node.start..node.start + node.len, ..]);
            y.slice_mut(ndarray::s![node.start..node.start + node.len, ..])
                .assign(&self.leaf[kk].dot(&xr));
        }
        let apply_lr = |f: &AcaFactor, xr: &ArrayView2<C64>| -> CMat {
            if f.rank() == 0 {
                Array2::zeros((f.u.shape()[0], xr.shape()[1]))
            } else {
                f.u.dot(&f.vt.dot(xr))
            }
        };
        for (id, pair) in self.offdiag.iter().enumerate() {
            let Some((upper, lower)) = pair else { continue };
            let (c1, c2) = self.tree.children(id as NodeId).expect("non-leaf");
            let (a, b) = (self.tree.node(c1), self.tree.node(c2));
            let x1 = x.slice(ndarray::s![a.start..a.start + a.len, ..]);
            let x2 = x.slice(ndarray::s![b.start..b.start + b.len, ..]);
            let u = apply_lr(upper, &x2);
            let l = apply_lr(lower, &x1);
            y.slice_mut(ndarray::s![a.start..a.start + a.len, ..]).scaled_add(C64::new(1.0, 0.0), &u);
            y.slice_mut(ndarray::s![b.start..b.start + b.len, ..]).scaled_add(C64::new(1.0, 0.0), &l);
        }
        y
    }

    /// y = A x with x, y in original point order.
    pub fn matvec(&self, x: &CVec) -> Result<CVec> {
        if x.len() != self.n() {
            return Err(Error::ShapeMismatch { expected: self.n(), got: x.len() });
        }
        let perm = self.tree.perm();
        let xt = Array2::from_shape_fn((x.len(), 1), |(i, _)| x[perm[i]]);
        let yt = self.apply_tree(&xt.view());
        let inv = self.tree.perm_inv();
        Ok(CVec::from_shape_fn(x.len(), |p| yt[[inv[p], 0]]))
    }

    /// Dense reconstruction in original point order (tests only).
    pub fn densify(&self) -> CMat {
        let n = self.n();
        let eye = CMat::eye(n);
        let yt = self.apply_tree(&eye.view());
        let inv = self.tree.perm_inv();
        Array2::from_shape_fn((n, n), |(p, q)| yt[[inv[p], inv[q]]])
    }

    pub fn stats(&self) -> HodLrStats {
        let leaf_storage: usize = self.leaf.iter().map(|m| m.len()).sum();
        let mut offdiag_storage = 0usize;
        let mut max_rank = 0usize;
        for pair in self.offdiag.iter().flatten() {
            for f in [&pair.0, &pair.1] {
                offdiag_storage += f.u.len() + f.vt.len();
                max_rank = max_rank.max(f.rank());
            }
        }
        HodLrStats {
            n: self.n(),
            depth: self.tree.depth(),
            storage_units: leaf_storage + offdiag_storage,
            leaf_storage,
            offdiag_storage,
            max_rank,
        }
    }
}

pub fn hodlr_construct(kernel: &dyn EntryEval, tree: &ClusterTree, tol: f64) -> Result<HodLrMatrix> {
    HodLrMatrix::construct(kernel, tree, tol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::SplitStrategy;
    use crate::geometry::{shape_generator, Shape};
    use crate::kernels::{KernelSystem, PhysicalParams};
    use crate::oracle::{dense_assemble, rel_fro_error, DEFAULT_DENSE_CAP};
    use crate::types::vec_norm;

    fn small_system() -> (KernelSystem, ClusterTree) {
        let cloud =
            shape_generator(&Shape::Sphere { radius: 0.25, eps: C64::new(2.0, 0.0) }, 0.05).unwrap();
        let sys = KernelSystem::physical(PhysicalParams::new(3.0e8).unwrap(), cloud).unwrap();
        let tree = ClusterTree::build(sys.cloud().unwrap(), 32, SplitStrategy::LongestAxisMedian).unwrap();
        (sys, tree)
    }

    #[test]
    fn construct_matches_dense() {
        let (sys, tree) = small_system();
        let tol = 1e-5;
        let hl = HodLrMatrix::construct(&sys, &tree, tol).unwrap();
        let dense = dense_assemble(&sys, DEFAULT_DENSE_CAP).unwrap();
        let err = rel_fro_error(&hl.densify(), &dense.matrix).unwrap();
        assert!(err <= 10.0 * tol, "hodlr err {err}");
    }

    #[test]
    fn matvec_matches_dense() {
        let (sys, tree) = small_system();
        let hl = HodLrMatrix::construct(&sys, &tree, 1e-6).unwrap();
        let n = hl.n();
        let x = CVec::from_shape_fn(n, |i| C64::new((i as f64 * 0.29).cos(), (i as f64 * 0.17).sin()));
        let y = hl.matvec(&x).unwrap();
        let dense = dense_assemble(&sys, DEFAULT_DENSE_CAP).unwrap();
        let y_ref = dense.matrix.dot(&x);
        let err = vec_norm(&(&y - &y_ref).to_vec()) / vec_norm(&y_ref.to_vec());
        assert!(err <= 1e-5, "matvec err {err}");
    }

    #[test]
    fn storage_accounting() {
        let (sys, tree) = small_system();
        let hl = HodLrMatrix::construct(&sys, &tree, 1e-4).unwrap();
        let st = hl.stats();
        assert_eq!(st.storage_units, st.leaf_storage + st.offdiag_storage);
        assert!(st.storage_units < st.n * st.n, "no compression");
        assert!(st.max_rank >= 1);
    }
}
