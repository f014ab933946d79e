//! Transformation forests: unit-norm root templates whose leaves are affine
//! transformations of the root, reached through per-edge Lie-algebra
//! parameters that add up along the root-to-leaf path.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::dataio::PatchBatch;
use crate::error::{Error, Result};
use crate::liegroup::{transform_matrix, GeneratorSet, TransformParams, GROUP_DIM};
use crate::scalar::Scalar;

/// Identifier of a node inside one tree. The root is always node 0.
pub type NodeId = usize;

pub const ROOT: NodeId = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct Tree<T: Scalar> {
    root: DVector<T>,
    /// `parents[n]` for every node; `None` only for the root.
    parents: Vec<Option<NodeId>>,
    /// Parameters on the edge into node `n`; zero for the root.
    edge_params: Vec<TransformParams<T>>,
}

impl<T: Scalar> Tree<T> {
    /// A depth-one tree with one leaf per parameter set.
    pub fn flat(root: DVector<T>, leaves: Vec<TransformParams<T>>) -> Self {
        let n = leaves.len();
        let mut parents = vec![None];
        parents.extend(std::iter::repeat_n(Some(ROOT), n));
        let mut edge_params = vec![TransformParams::zero()];
        edge_params.extend(leaves);
        Tree { root, parents, edge_params }
    }

    /// A complete tree where every internal node has `branching` children and
    /// leaves sit at `depth`. Edge parameters are produced by `params` in
    /// breadth-first node order.
    pub fn complete(
        root: DVector<T>,
        branching: usize,
        depth: usize,
        mut params: impl FnMut(NodeId) -> TransformParams<T>,
    ) -> Result<Self> {
        if branching == 0 || depth == 0 {
            return Err(Error::InvalidArgument("branching and depth must be positive".into()));
        }
        let mut parents = vec![None];
        let mut edge_params = vec![TransformParams::zero()];
        let mut frontier = vec![ROOT];
        for _ in 0..depth {
            let mut next = Vec::with_capacity(frontier.len() * branching);
            for &p in &frontier {
                for _ in 0..branching {
                    let id = parents.len();
                    parents.push(Some(p));
                    edge_params.push(params(id));
                    next.push(id);
                }
            }
            frontier = next;
        }
        Ok(Tree { root, parents, edge_params })
    }

    /// Builds a tree from `(parent, child, params)` edges.
    ///
    /// Children must be exactly the ids `1..=edges.len()`, each with one
    /// parent that is the root or another child, and no cycles.
    pub fn from_edges(root: DVector<T>, edges: Vec<(NodeId, NodeId, TransformParams<T>)>) -> Result<Self> {
        let n = edges.len() + 1;
        let mut parents: Vec<Option<NodeId>> = vec![None; n];
        let mut edge_params = vec![TransformParams::zero(); n];
        for (parent, child, params) in edges {
            if child == ROOT || child >= n {
                return Err(Error::Consistency(format!("edge into unknown node {child}")));
            }
            if parent >= n {
                return Err(Error::Consistency(format!("edge from unknown node {parent}")));
            }
            if parents[child].is_some() {
                return Err(Error::Consistency(format!("node {child} has more than one parent")));
            }
            parents[child] = Some(parent);
            edge_params[child] = params;
        }
        for start in 1..n {
            let mut node = start;
            let mut hops = 0;
            while let Some(p) = parents[node] {
                node = p;
                hops += 1;
                if hops > n {
                    return Err(Error::Consistency(format!("cycle through node {start}")));
                }
            }
            if node != ROOT {
                return Err(Error::Consistency(format!("node {start} is not connected to the root")));
            }
        }
        Ok(Tree { root, parents, edge_params })
    }

    pub fn root(&self) -> &DVector<T> {
        &self.root
    }

    pub fn set_root(&mut self, root: DVector<T>) {
        self.root = root;
    }

    pub fn node_count(&self) -> usize {
        self.parents.len()
    }

    pub fn edge_count(&self) -> usize {
        self.parents.len() - 1
    }

    pub fn parent(&self, node: NodeId) -> Option<NodeId> {
        self.parents.get(node).copied().flatten()
    }

    pub fn contains(&self, node: NodeId) -> bool {
        node < self.parents.len()
    }

    /// Edges as `(parent, child, params)`, ordered by child id.
    pub fn edges(&self) -> impl Iterator<Item = (NodeId, NodeId, &TransformParams<T>)> + '_ {
        (1..self.parents.len()).map(move |c| (self.parents[c].unwrap_or(ROOT), c, &self.edge_params[c]))
    }

    pub fn edge_params(&self, child: NodeId) -> Option<&TransformParams<T>> {
        if child == ROOT {
            None
        } else {
            self.edge_params.get(child)
        }
    }

    pub fn edge_params_mut(&mut self, child: NodeId) -> Option<&mut TransformParams<T>> {
        if child == ROOT {
            None
        } else {
            self.edge_params.get_mut(child)
        }
    }

    /// Childless nodes in ascending id order. A tree without edges has its root as sole leaf.
    pub fn leaves(&self) -> Vec<NodeId> {
        let mut has_child = vec![false; self.parents.len()];
        for p in self.parents.iter().flatten() {
            has_child[*p] = true;
        }
        (0..self.parents.len()).filter(|&n| !has_child[n]).collect()
    }

    /// Edge ids (child node ids) from the root down to `node`.
    pub fn path(&self, node: NodeId) -> Result<Vec<NodeId>> {
        if !self.contains(node) {
            return Err(Error::InvalidArgument(format!("unknown node {node}")));
        }
        let mut path = Vec::new();
        let mut n = node;
        while let Some(p) = self.parents[n] {
            path.push(n);
            n = p;
        }
        path.reverse();
        Ok(path)
    }

    /// `x_P`: componentwise sum of edge parameters from the root to `node`.
    pub fn path_params(&self, node: NodeId) -> Result<TransformParams<T>> {
        Ok(self
            .path(node)?
            .into_iter()
            .fold(TransformParams::zero(), |acc, e| acc + self.edge_params[e]))
    }

    /// True when every edge leaves the root directly.
    pub fn is_flat(&self) -> bool {
        self.parents.iter().skip(1).all(|p| *p == Some(ROOT))
    }
}

/// Location of one leaf in a forest.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LeafRef {
    pub tree: usize,
    pub node: NodeId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Forest<T: Scalar> {
    side: usize,
    trees: Vec<Tree<T>>,
}

impl<T: Scalar> Forest<T> {
    pub fn new(side: usize, trees: Vec<Tree<T>>) -> Result<Self> {
        if side == 0 {
            return Err(Error::InvalidArgument("patch side must be positive".into()));
        }
        let m = side * side;
        for (i, t) in trees.iter().enumerate() {
            if t.root.len() != m {
                return Err(Error::DimensionMismatch(format!(
                    "tree {i} root has {} entries, expected {m}",
                    t.root.len()
                )));
            }
        }
        Ok(Forest { side, trees })
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn pixels(&self) -> usize {
        self.side * self.side
    }

    pub fn trees(&self) -> &[Tree<T>] {
        &self.trees
    }

    pub fn trees_mut(&mut self) -> &mut [Tree<T>] {
        &mut self.trees
    }

    /// `(roots, branching)` when every tree is flat with the same branching factor.
    pub fn flat_layout(&self) -> Option<(usize, usize)> {
        let b = self.trees.first()?.edge_count();
        self.trees
            .iter()
            .all(|t| t.is_flat() && t.edge_count() == b)
            .then_some((self.trees.len(), b))
    }

    /// Leaves in dictionary column order: tree-major, node id minor.
    pub fn leaf_refs(&self) -> Vec<LeafRef> {
        self.trees
            .iter()
            .enumerate()
            .flat_map(|(tree, t)| t.leaves().into_iter().map(move |node| LeafRef { tree, node }))
            .collect()
    }

    pub fn leaf_count(&self) -> usize {
        self.trees.iter().map(|t| t.leaves().len()).sum()
    }

    pub fn edge_count(&self) -> usize {
        self.trees.iter().map(|t| t.edge_count()).sum()
    }

    pub fn path_params(&self, leaf: LeafRef) -> Result<TransformParams<T>> {
        self.trees
            .get(leaf.tree)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown tree {}", leaf.tree)))?
            .path_params(leaf.node)
    }

    /// Number of learned scalars: `(M − 1)` per unit-norm root plus `group_dim` per edge.
    pub fn degrees_of_freedom(&self, group_dim: usize) -> u64 {
        (self.trees.len() * (self.pixels() - 1) + self.edge_count() * group_dim) as u64
    }

    fn check_generators(&self, gens: &GeneratorSet<T>) -> Result<()> {
        if gens.pixels() != self.pixels() {
            return Err(Error::DimensionMismatch(format!(
                "generators are for {} pixels, forest has {}",
                gens.pixels(),
                self.pixels()
            )));
        }
        Ok(())
    }

    /// `T(x_P(b))` for every leaf, in column order.
    pub fn leaf_transforms(&self, gens: &GeneratorSet<T>) -> Result<Vec<DMatrix<T>>> {
        self.check_generators(gens)?;
        self.leaf_refs()
            .into_par_iter()
            .map(|leaf| {
                let x = self.path_params(leaf)?;
                transform_matrix(gens, &x).map_err(|e| Error::Leaf {
                    tree: leaf.tree,
                    leaf: leaf.node,
                    source: Box::new(e),
                })
            })
            .collect()
    }

    /// Leaf dictionary `U` (M × K): column `b` is `T(x_P(b)) F_v` for its root `v`.
    pub fn materialize_leaves(&self, gens: &GeneratorSet<T>) -> Result<DMatrix<T>> {
        let transforms = self.leaf_transforms(gens)?;
        Ok(self.leaves_from_transforms(&transforms))
    }

    /// Leaf dictionary from precomputed leaf transforms.
    pub fn leaves_from_transforms(&self, transforms: &[DMatrix<T>]) -> DMatrix<T> {
        let refs = self.leaf_refs();
        let mut u = DMatrix::zeros(self.pixels(), refs.len());
        for (col, (leaf, t)) in refs.iter().zip(transforms).enumerate() {
            u.set_column(col, &(t * &self.trees[leaf.tree].root));
        }
        u
    }

    /// `Σ_e x_{e,j}²` over every edge in the forest, per generator.
    pub fn param_sq_norms(&self) -> [T; GROUP_DIM] {
        let mut out = [T::zero(); GROUP_DIM];
        for t in &self.trees {
            for (_, _, x) in t.edges() {
                for (o, v) in out.iter_mut().zip(x.0) {
                    *o += v * v;
                }
            }
        }
        out
    }
}

/// Penalty coefficients `λ_w` and `λ_1..λ_6`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Penalties<T> {
    pub lambda_w: T,
    pub lambda_params: [T; GROUP_DIM],
}

impl<T: Scalar> Penalties<T> {
    pub fn zero() -> Self {
        Penalties { lambda_w: T::zero(), lambda_params: [T::zero(); GROUP_DIM] }
    }

    /// `λ_base` on every generator, scaled by `multipliers`.
    pub fn with_base(lambda_w: T, lambda_base: T, multipliers: [T; GROUP_DIM]) -> Self {
        Penalties { lambda_w, lambda_params: multipliers.map(|m| m * lambda_base) }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown<T> {
    pub mse: T,
    pub weight_penalty: T,
    pub param_penalties: [T; GROUP_DIM],
    pub total: T,
}

impl<T: Scalar> LossBreakdown<T> {
    pub fn new(mse: T, weight_penalty: T, param_penalties: [T; GROUP_DIM]) -> Self {
        let total = param_penalties.iter().fold(mse + weight_penalty, |a, &p| a + p);
        LossBreakdown { mse, weight_penalty, param_penalties, total }
    }

    pub fn param_penalty_total(&self) -> T {
        self.param_penalties.iter().fold(T::zero(), |a, &p| a + p)
    }
}

/// `(1/N) Σ_i ‖I_i − U w_i‖²` with `weights` as N × K.
pub fn reconstruction_mse<T: Scalar>(leaves: &DMatrix<T>, batch: &PatchBatch<T>, weights: &DMatrix<T>) -> Result<T> {
    let n = batch.len();
    if leaves.nrows() != batch.pixels() || weights.nrows() != n || weights.ncols() != leaves.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "leaves {:?}, batch {} x {}, weights {:?}",
            leaves.shape(),
            n,
            batch.pixels(),
            weights.shape()
        )));
    }
    if n == 0 {
        return Ok(T::zero());
    }
    let residual = batch.data() - leaves * weights.transpose();
    Ok(residual.norm_squared() / T::of(n as f64))
}

/// Full loss with leaves already materialized.
pub fn loss_with_leaves<T: Scalar>(
    forest: &Forest<T>,
    leaves: &DMatrix<T>,
    batch: &PatchBatch<T>,
    weights: &DMatrix<T>,
    penalties: &Penalties<T>,
) -> Result<LossBreakdown<T>> {
    let mse = reconstruction_mse(leaves, batch, weights)?;
    let n = batch.len().max(1);
    let weight_penalty = penalties.lambda_w * weights.iter().fold(T::zero(), |a, v| a + v.abs()) / T::of(n as f64);
    let sq = forest.param_sq_norms();
    let mut param = [T::zero(); GROUP_DIM];
    for j in 0..GROUP_DIM {
        param[j] = penalties.lambda_params[j] * sq[j];
    }
    Ok(LossBreakdown::new(mse, weight_penalty, param))
}

/// Full loss: reconstruction MSE, L1 weight penalty and squared-ℓ2 parameter penalties.
pub fn loss<T: Scalar>(
    forest: &Forest<T>,
    gens: &GeneratorSet<T>,
    batch: &PatchBatch<T>,
    weights: &DMatrix<T>,
    penalties: &Penalties<T>,
) -> Result<LossBreakdown<T>> {
    let leaves = forest.materialize_leaves(gens)?;
    loss_with_leaves(forest, &leaves, batch, weights, penalties)
}

/// Degrees of freedom of a flat forest: `V·(M − 1 + B·group_dim)`.
pub fn dof_tsc(roots: u64, branching: u64, pixels: u64, group_dim: u64) -> u64 {
    roots * (pixels - 1 + branching * group_dim)
}

/// Degrees of freedom of plain sparse coding: `K·(M − 1)`.
pub fn dof_sc(num_features: u64, pixels: u64) -> u64 {
    num_features * (pixels - 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::liegroup::{build_generators, Generator};

    fn unit(m: usize, i: usize) -> DVector<f64> {
        let mut v = DVector::zeros(m);
        v[i] = 1.0;
        v
    }

    #[test]
    fn depth_one_path_is_edge() {
        let x = TransformParams([0.1, -0.2, 0.3, 0.0, 0.05, 0.0]);
        let t = Tree::flat(unit(4, 0), vec![x]);
        assert_eq!(t.path_params(1).unwrap(), x);
    }

    #[test]
    fn depth_two_path_sums() {
        let root = unit(4, 0);
        let t = Tree::from_edges(
            root,
            vec![
                (0, 1, TransformParams::along(Generator::TranslateX, 0.1)),
                (1, 2, TransformParams::along(Generator::TranslateX, 0.2)),
            ],
        )
        .unwrap();
        let p = t.path_params(2).unwrap();
        assert!((p[0] - 0.3).abs() < 1e-15);
        assert!(p.0[1..].iter().all(|&v| v == 0.0));
        assert_eq!(t.leaves(), vec![2]);
    }

    #[test]
    fn path_params_rejects_unknown_node() {
        let t = Tree::flat(unit(4, 0), vec![TransformParams::zero()]);
        assert!(t.path_params(5).is_err());
    }

    #[test]
    fn zero_edges_reproduce_roots() {
        let gens = build_generators::<f64>(3).unwrap();
        let f = Forest::new(
            3,
            vec![
                Tree::flat(unit(9, 2), vec![TransformParams::zero(); 3]),
                Tree::flat(unit(9, 7), vec![TransformParams::zero(); 2]),
            ],
        )
        .unwrap();
        let u = f.materialize_leaves(&gens).unwrap();
        assert_eq!(u.ncols(), 5);
        for c in 0..3 {
            assert!((u.column(c) - unit(9, 2)).amax() < 1e-12);
        }
        for c in 3..5 {
            assert!((u.column(c) - unit(9, 7)).amax() < 1e-12);
        }
    }

    #[test]
    fn from_edges_validates() {
        let root = unit(4, 0);
        let z = TransformParams::zero();
        assert!(Tree::from_edges(root.clone(), vec![(0, 3, z)]).is_err());
        assert!(Tree::from_edges(root.clone(), vec![(0, 1, z), (0, 1, z)]).is_err());
        assert!(Tree::from_edges(root.clone(), vec![(2, 1, z), (1, 2, z)]).is_err());
        assert!(Tree::from_edges(root, vec![(0, 2, z), (2, 1, z)]).is_ok());
    }

    #[test]
    fn complete_binary_tree_shape() {
        let t = Tree::<f64>::complete(unit(4, 0), 2, 3, |_| TransformParams::zero()).unwrap();
        assert_eq!(t.edge_count(), 14);
        assert_eq!(t.leaves().len(), 8);
        assert_eq!(t.path(14).unwrap().len(), 3);
        assert!(!t.is_flat());
    }

    #[test]
    fn forest_rejects_wrong_root_size() {
        assert!(Forest::new(3, vec![Tree::flat(unit(4, 0), vec![])]).is_err());
    }

    #[test]
    fn flat_layout_detected() {
        let trees = (0..8).map(|i| Tree::flat(unit(64, i), vec![TransformParams::zero(); 8])).collect();
        let f = Forest::<f64>::new(8, trees).unwrap();
        assert_eq!(f.flat_layout(), Some((8, 8)));
        assert_eq!(f.leaf_count(), 64);
        assert_eq!(f.degrees_of_freedom(6), dof_tsc(8, 8, 64, 6));
    }

    #[test]
    fn dof_formulas() {
        assert_eq!(dof_tsc(8, 8, 100, 6), 1176);
        assert_eq!(dof_tsc(16, 16, 100, 6), 3120);
        assert_eq!(dof_tsc(1, 1, 100, 6), 105);
        assert_eq!(dof_sc(64, 100), 6336);
        assert_eq!(dof_sc(256, 100), 25344);
        assert_eq!(dof_sc(1, 2), 1);
    }

    #[test]
    fn loss_breakdown_total() {
        let l = LossBreakdown::<f64>::new(1.0, 0.5, [0.1, 0.2, 0.0, 0.0, 0.0, 0.3]);
        assert!((l.total - 2.1).abs() < 1e-12);
    }
}
