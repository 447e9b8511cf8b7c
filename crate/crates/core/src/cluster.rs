//! Binary cluster tree over the unknowns.
//!
//! The tree is complete (every leaf at the same depth) and owns the
//! permutation from original point indices to tree-contiguous ordering, so
//! every node's index set is a contiguous range in tree coordinates.

use crate::error::{Error, Result};
use crate::geometry::PointCloud;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitStrategy {
    /// Median split along the longest bounding-box axis (default).
    LongestAxisMedian,
    /// Cobblestone ordering: sort by distance from the bounding-box corner,
    /// split the sorted sequence into contiguous halves.
    Cobblestone,
}

#[derive(Debug, Clone, Copy)]
pub struct ClusterNode {
    pub level: usize,
    /// Start of the node's range in tree coordinates.
    pub start: usize,
    pub len: usize,
}

#[derive(Debug, Clone)]
pub struct ClusterTree {
    /// Heap-ordered complete binary tree: node k at level l has id 2^l - 1 + k.
    nodes: Vec<ClusterNode>,
    depth: usize,
    /// Tree position -> original index.
    perm: Vec<usize>,
    /// Original index -> tree position.
    perm_inv: Vec<usize>,
    pub leaf_size: usize,
}

pub type NodeId = usize;

impl ClusterTree {
    pub fn build(cloud: &PointCloud, leaf_size: usize, strategy: SplitStrategy) -> Result<Self> {
        if cloud.is_empty() {
            return Err(Error::EmptyGeometry);
        }
        if leaf_size == 0 {
            return Err(Error::InvalidParameter("leaf_size must be >= 1".into()));
        }
        let n = cloud.len();
        let mut depth = 0usize;
        while n.div_ceil(1 << depth) > leaf_size {
            depth += 1;
        }
        let mut perm: Vec<usize> = (0..n).collect();
        let mut nodes = vec![
            ClusterNode { level: 0, start: 0, len: 0 };
            (1usize << (depth + 1)) - 1
        ];
        split_recursive(cloud, &mut perm, 0, n, 0, 0, depth, strategy, &mut nodes);
        let mut perm_inv = vec![0usize; n];
        for (tree_pos, &orig) in perm.iter().enumerate() {
            perm_inv[orig] = tree_pos;
        }
        Ok(Self { nodes, depth, perm, perm_inv, leaf_size })
    }

    /// Number of levels below the root (leaves live at this level).
    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn len(&self) -> usize {
        self.nodes[0].len
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn root(&self) -> NodeId {
        0
    }

    pub fn node(&self, id: NodeId) -> ClusterNode {
        self.nodes[id]
    }

    pub fn children(&self, id: NodeId) -> Option<(NodeId, NodeId)> {
        if self.nodes[id].level < self.depth {
            Some((2 * id + 1, 2 * id + 2))
        } else {
            None
        }
    }

    pub fn is_leaf(&self, id: NodeId) -> bool {
        self.nodes[id].level == self.depth
    }

    pub fn nodes_at_level(&self, level: usize) -> impl Iterator<Item = NodeId> + '_ {
        let first = (1usize << level) - 1;
        let valid = level <= self.depth;
        (first..first + (1usize << level)).filter(move |_| valid)
    }

    /// Sibling pairs at `level` (1 <= level <= depth), each defining a pair of
    /// off-diagonal blocks.
    pub fn sibling_pairs(&self, level: usize) -> Result<Vec<(NodeId, NodeId)>> {
        if level == 0 || level > self.depth {
            return Err(Error::LevelOutOfRange { level, depth: self.depth });
        }
        Ok(self
            .nodes_at_level(level)
            .collect::<Vec<_>>()
            .chunks(2)
            .map(|c| (c[0], c[1]))
            .collect())
    }

    /// Tree position -> original index.
    pub fn perm(&self) -> &[usize] {
        &self.perm
    }

    /// Original index -> tree position.
    pub fn perm_inv(&self) -> &[usize] {
        &self.perm_inv
    }

    /// Original index of the point at tree position `tree_pos`.
    pub(crate) fn parts(&self) -> (&[ClusterNode], usize, &[usize], usize) {
        (&self.nodes, self.depth, &self.perm, self.leaf_size)
    }

    pub(crate) fn from_parts(
        nodes: Vec<ClusterNode>,
        depth: usize,
        perm: Vec<usize>,
        leaf_size: usize,
    ) -> Self {
        let mut perm_inv = vec![0usize; perm.len()];
        for (tree_pos, &orig) in perm.iter().enumerate() {
            perm_inv[orig] = tree_pos;
        }
        Self { nodes, depth, perm, perm_inv, leaf_size }
    }

    pub fn to_original(&self, tree_pos: usize) -> usize {
        self.perm[tree_pos]
    }
}

#[allow(clippy::too_many_arguments)]
fn split_recursive(
    cloud: &PointCloud,
    perm: &mut [usize],
    start: usize,
    len: usize,
    level: usize,
    node_idx: usize,
    depth: usize,
    strategy: SplitStrategy,
    nodes: &mut [ClusterNode],
) {
    let id = (1usize << level) - 1 + node_idx;
    nodes[id] = ClusterNode { level, start, len };
    if level == depth {
        return;
    }
    let slice = &mut perm[start..start + len];
    order_slice(cloud, slice, strategy);
    let left = len.div_ceil(2);
    split_recursive(cloud, perm, start, left, level + 1, 2 * node_idx, depth, strategy, nodes);
    split_recursive(
        cloud,
        perm,
        start + left,
        len - left,
        level + 1,
        2 * node_idx + 1,
        depth,
        strategy,
        nodes,
    );
}

fn order_slice(cloud: &PointCloud, slice: &mut [usize], strategy: SplitStrategy) {
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for &i in slice.iter() {
        let p = cloud.positions[i];
        for d in 0..3 {
            lo[d] = lo[d].min(p[d]);
            hi[d] = hi[d].max(p[d]);
        }
    }
    match strategy {
        SplitStrategy::LongestAxisMedian => {
            let mut axis = 0;
            let mut best = hi[0] - lo[0];
            for d in 1..3 {
                if hi[d] - lo[d] > best {
                    best = hi[d] - lo[d];
                    axis = d;
                }
            }
            // stable sort with original-index tie break keeps splits deterministic
            slice.sort_by(|&a, &b| {
                cloud.positions[a][axis]
                    .partial_cmp(&cloud.positions[b][axis])
                    .unwrap()
                    .then(a.cmp(&b))
            });
        }
        SplitStrategy::Cobblestone => {
            let sweep = lo;
            let dist2 = |i: usize| -> f64 {
                let p = cloud.positions[i];
                (0..3).map(|d| (p[d] - sweep[d]).powi(2)).sum()
            };
            slice.sort_by(|&a, &b| dist2(a).partial_cmp(&dist2(b)).unwrap().then(a.cmp(&b)));
        }
    }
}

/// A view of one node's complete subtree as contiguous (start, len) ranges in
/// tree coordinates, one list per level. Butterfly factorizations are indexed
/// by these ranges rather than by the cluster tree itself.
#[derive(Debug, Clone)]
pub struct BlockTree {
    /// levels[0] = [root range], levels[d] has 2^d ranges.
    pub levels: Vec<Vec<(usize, usize)>>,
}

impl BlockTree {
    pub fn from_node(tree: &ClusterTree, id: NodeId, depth: usize) -> Self {
        let node = tree.node(id);
        assert!(node.level + depth <= tree.depth(), "subtree depth exceeds cluster tree");
        let mut levels = vec![vec![(node.start, node.len)]];
        let mut frontier = vec![id];
        for _ in 0..depth {
            let mut next = Vec::with_capacity(frontier.len() * 2);
            for &nid in &frontier {
                let (a, b) = tree.children(nid).expect("complete tree");
                next.push(a);
                next.push(b);
            }
            levels.push(next.iter().map(|&nid| (tree.node(nid).start, tree.node(nid).len)).collect());
            frontier = next;
        }
        Self { levels }
    }

    /// Uniform halving of a plain index range, used by synthetic-kernel tests
    /// that have no cluster tree.
    pub fn uniform(start: usize, len: usize, depth: usize) -> Self {
        let mut levels = vec![vec![(start, len)]];
        for d in 1..=depth {
            let prev = &levels[d - 1];
            let mut cur = Vec::with_capacity(prev.len() * 2);
            for &(s, l) in prev {
                let left = l.div_ceil(2);
                cur.push((s, left));
                cur.push((s + left, l - left));
            }
            levels.push(cur);
        }
        Self { levels }
    }

    pub fn depth(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn root(&self) -> (usize, usize) {
        self.levels[0][0]
    }

    pub fn len(&self) -> usize {
        self.levels[0][0].1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn leaves(&self) -> &[(usize, usize)] {
        self.levels.last().unwrap()
    }

    /// Truncate to a shallower depth (keeps the top levels).
    pub fn truncated(&self, depth: usize) -> Self {
        assert!(depth <= self.depth());
        Self { levels: self.levels[..=depth].to_vec() }
    }

    /// Subtree rooted at the k-th node of `level`.
    pub fn subtree(&self, level: usize, k: usize) -> Self {
        let rel_depth = self.depth() - level;
        let mut levels = Vec::with_capacity(rel_depth + 1);
        for d in 0..=rel_depth {
            let width = 1usize << d;
            let lvl = &self.levels[level + d];
            levels.push(lvl[k * width..(k + 1) * width].to_vec());
        }
        Self { levels }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::C64;

    fn line_cloud(n: usize) -> PointCloud {
        let positions: Vec<[f64; 3]> = (0..n).map(|i| [i as f64, 0.0, 0.0]).collect();
        PointCloud::new(positions, vec![C64::new(4.0, 0.0); n], 1.0).unwrap()
    }

    #[test]
    fn eight_points_leaf_two() {
        let tree = ClusterTree::build(&line_cloud(8), 2, SplitStrategy::LongestAxisMedian).unwrap();
        assert_eq!(tree.depth(), 2);
        let leaves: Vec<_> = tree.nodes_at_level(2).map(|id| tree.node(id).len).collect();
        assert_eq!(leaves, vec![2, 2, 2, 2]);
    }

    #[test]
    fn single_point_degenerate() {
        let tree = ClusterTree::build(&line_cloud(1), 4, SplitStrategy::LongestAxisMedian).unwrap();
        assert_eq!(tree.depth(), 0);
        assert!(tree.is_leaf(tree.root()));
    }

    #[test]
    fn thousand_points_leaf_hundred() {
        // derived by enumerating median splits: 1000 -> 500 -> 250 -> 125 -> 62/63
        let mut positions = Vec::new();
        let mut state = 0x9e3779b97f4a7c15u64;
        let mut next = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        };
        for _ in 0..1000 {
            positions.push([next(), next(), next()]);
        }
        let cloud = PointCloud::new(positions, vec![C64::new(2.0, 0.0); 1000], 1.0).unwrap();
        let tree = ClusterTree::build(&cloud, 100, SplitStrategy::LongestAxisMedian).unwrap();
        assert_eq!(tree.depth(), 4);
        let sizes: Vec<_> = tree.nodes_at_level(4).map(|id| tree.node(id).len).collect();
        assert_eq!(sizes.len(), 16);
        assert!(sizes.iter().all(|&s| s == 62 || s == 63));
        assert_eq!(sizes.iter().sum::<usize>(), 1000);
    }

    #[test]
    fn permutation_is_bijection() {
        let tree = ClusterTree::build(&line_cloud(37), 4, SplitStrategy::Cobblestone).unwrap();
        let mut seen = vec![false; 37];
        for pos in 0..37 {
            let orig = tree.to_original(pos);
            assert!(!seen[orig]);
            seen[orig] = true;
            assert_eq!(tree.perm_inv()[orig], pos);
        }
    }

    #[test]
    fn leaves_partition_everything() {
        let tree = ClusterTree::build(&line_cloud(100), 9, SplitStrategy::LongestAxisMedian).unwrap();
        let mut covered = 0usize;
        let mut prev_end = 0usize;
        for id in tree.nodes_at_level(tree.depth()) {
            let n = tree.node(id);
            assert_eq!(n.start, prev_end);
            prev_end = n.start + n.len;
            covered += n.len;
        }
        assert_eq!(covered, 100);
    }

    #[test]
    fn sibling_pairs_counts() {
        let tree = ClusterTree::build(&line_cloud(64), 8, SplitStrategy::LongestAxisMedian).unwrap();
        assert_eq!(tree.depth(), 3);
        assert_eq!(tree.sibling_pairs(1).unwrap().len(), 1);
        assert_eq!(tree.sibling_pairs(2).unwrap().len(), 2);
        assert_eq!(tree.sibling_pairs(3).unwrap().len(), 4);
        assert!(tree.sibling_pairs(0).is_err());
        assert!(tree.sibling_pairs(4).is_err());
        for (a, b) in tree.sibling_pairs(3).unwrap() {
            assert_eq!(tree.node(a).len, 8);
            assert_eq!(tree.node(b).len, 8);
        }
    }

    #[test]
    fn median_split_shrinks_bounding_boxes() {
        let mut positions = Vec::new();
        for i in 0..8 {
            for j in 0..8 {
                for k in 0..4 {
                    positions.push([i as f64, j as f64, k as f64]);
                }
            }
        }
        let n = positions.len();
        let cloud = PointCloud::new(positions, vec![C64::new(2.0, 0.0); n], 1.0).unwrap();
        let tree = ClusterTree::build(&cloud, 16, SplitStrategy::LongestAxisMedian).unwrap();
        let diam = |id: NodeId| -> f64 {
            let nd = tree.node(id);
            let pts: Vec<[f64; 3]> =
                (nd.start..nd.start + nd.len).map(|t| cloud.positions[tree.to_original(t)]).collect();
            let mut lo = [f64::INFINITY; 3];
            let mut hi = [f64::NEG_INFINITY; 3];
            for p in &pts {
                for d in 0..3 {
                    lo[d] = lo[d].min(p[d]);
                    hi[d] = hi[d].max(p[d]);
                }
            }
            (0..3).map(|d| (hi[d] - lo[d]).powi(2)).sum::<f64>().sqrt()
        };
        for level in 1..=tree.depth() {
            for id in tree.nodes_at_level(level) {
                let parent = (id - 1) / 2;
                assert!(diam(id) <= diam(parent) + 1e-12);
            }
        }
    }
}
