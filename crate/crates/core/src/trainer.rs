//! Alternating optimization of transformation forests.
//!
//! Each epoch samples a batch, infers exact sparse weights with feature-sign
//! search, takes one (backtracked) gradient step on every edge's Lie-algebra
//! parameters, solves each root in closed form against the residual of the
//! other trees, and periodically re-initializes under-used leaves.

use nalgebra::{DMatrix, DVector};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::dataio::PatchBatch;
use crate::error::{Error, Result};
use crate::liegroup::{
    build_generators, matexp_param_grad_rank_one, GeneratorSet, GradientQuadrature, QuadratureRule,
    TransformParams, DEFAULT_X_MAX, GROUP_DIM,
};
use crate::model::{loss_with_leaves, Forest, LeafRef, LossBreakdown, NodeId, Penalties, Tree};
use crate::scalar::Scalar;
use crate::sparse_solver::{default_max_iterations, FeatureSign};

/// Patches per parallel inference chunk. Fixed so results never depend on thread count.
const INFERENCE_CHUNK: usize = 64;

/// Hyperparameters for forest training and the sparse-coding baseline.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub side: usize,
    pub trees: usize,
    /// Children per internal node.
    pub branching: usize,
    /// Tree depth; 1 means flat trees.
    pub depth: usize,
    pub lambda_w: f64,
    pub lambda_base: f64,
    /// Per-generator multipliers on `lambda_base`.
    pub lambda_multipliers: [f64; GROUP_DIM],
    /// Feature-norm penalty; only meaningful for the sparse-coding baseline.
    pub lambda_f: f64,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub backtracking: bool,
    pub max_halvings: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub quadrature: GradientQuadrature,
    pub underuse_threshold: f64,
    pub reinit_sigma: f64,
    /// Re-initialization cadence in epochs; 0 disables it.
    pub reinit_every: usize,
    pub init_sigma: f64,
    /// Spread of the initial translation coordinates; `None` uses `init_sigma`.
    pub init_translation_sigma: Option<f64>,
    pub x_max: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            side: 8,
            trees: 8,
            branching: 8,
            depth: 1,
            lambda_w: 0.4,
            lambda_base: 1e-3,
            lambda_multipliers: [1.0, 1.0, 1.0, 10.0, 10.0, 1.0],
            lambda_f: 0.0,
            learning_rate: 0.1,
            lr_decay: 0.99,
            backtracking: true,
            max_halvings: 10,
            batch_size: 2000,
            epochs: 100,
            quadrature: GradientQuadrature::Stochastic(1),
            underuse_threshold: 0.005,
            reinit_sigma: 0.1,
            reinit_every: 5,
            init_sigma: 0.05,
            init_translation_sigma: None,
            x_max: DEFAULT_X_MAX,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.side == 0 || self.trees == 0 || self.branching == 0 || self.depth == 0 {
            return bad("side, trees, branching and depth must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.quadrature.samples() == 0 {
            return bad("gradient sample count must be at least 1");
        }
        let nonneg = [
            self.lambda_w,
            self.lambda_base,
            self.lambda_f,
            self.learning_rate,
            self.lr_decay,
            self.underuse_threshold,
            self.reinit_sigma,
            self.init_sigma,
            self.init_translation_sigma.unwrap_or(0.0),
            self.x_max,
        ];
        if nonneg.iter().chain(&self.lambda_multipliers).any(|v| !(v.is_finite() && *v >= 0.0)) {
            return bad("rates, penalties and noise scales must be finite and nonnegative");
        }
        Ok(())
    }

    pub fn penalties<T: Scalar>(&self) -> Penalties<T> {
        Penalties::with_base(T::of(self.lambda_w), T::of(self.lambda_base), self.lambda_multipliers.map(T::of))
    }

    pub fn leaves_per_tree(&self) -> usize {
        self.branching.pow(self.depth as u32)
    }

    pub fn total_leaves(&self) -> usize {
        self.trees * self.leaves_per_tree()
    }
}

/// A leaf whose transformation was reset.
#[derive(Clone, Debug, PartialEq)]
pub struct ReinitEvent {
    pub epoch: usize,
    pub tree: usize,
    pub leaf: NodeId,
    /// The sibling the new parameters were centered on; `None` means the identity.
    pub source: Option<NodeId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord<T> {
    pub epoch: usize,
    /// Loss on the epoch's batch right after weight inference.
    pub loss: LossBreakdown<T>,
    /// Mean number of nonzero weights per patch.
    pub sparsity: T,
    /// Leaves re-initialized at the end of this epoch.
    pub reinits: usize,
    /// Step size accepted by the transform update (0 when the step was rejected).
    pub step: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainMetrics<T> {
    pub epochs: Vec<EpochRecord<T>>,
    /// Per-leaf usage fractions on the most recent batch.
    pub usage: Vec<T>,
    pub reinit_log: Vec<ReinitEvent>,
    /// `(epoch, tree)` pairs whose root update was skipped.
    pub root_skips: Vec<(usize, usize)>,
    /// `(epoch, tree, edge)` whose transform step was skipped for overflow.
    pub overflow_skips: Vec<(usize, usize, NodeId)>,
}

impl<T> Default for TrainMetrics<T> {
    fn default() -> Self {
        TrainMetrics {
            epochs: Vec::new(),
            usage: Vec::new(),
            reinit_log: Vec::new(),
            root_skips: Vec::new(),
            overflow_skips: Vec::new(),
        }
    }
}

fn centered_unit<T: Scalar, R: Rng + ?Sized>(m: usize, rng: &mut R) -> DVector<T> {
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut v = DVector::from_fn(m, |_, _| normal.sample(rng));
    if m > 1 {
        let mean = v.mean();
        v.add_scalar_mut(-mean);
    }
    let n = v.norm();
    if n > 0.0 {
        v /= n;
    }
    v.map(T::of)
}

/// Random unit-norm roots and Gaussian edge parameters.
pub fn init_forest<T: Scalar, R: Rng + ?Sized>(config: &TrainConfig, rng: &mut R) -> Result<Forest<T>> {
    config.validate()?;
    let m = config.side * config.side;
    let sigma = Normal::new(0.0, config.init_sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let translation = Normal::new(0.0, config.init_translation_sigma.unwrap_or(config.init_sigma))
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let x_max = T::of(config.x_max);
    let mut trees = Vec::with_capacity(config.trees);
    for _ in 0..config.trees {
        let root = centered_unit(m, rng);
        let tree = Tree::complete(root, config.branching, config.depth, |_| {
            let x: [T; GROUP_DIM] = std::array::from_fn(|j| {
                let d = if j < 2 { &translation } else { &sigma };
                T::of(d.sample(rng))
            });
            TransformParams(x).clamped(x_max)
        })?;
        trees.push(tree);
    }
    Forest::new(config.side, trees)
}

/// Exact sparse codes for every patch: row `i` solves the lasso problem for patch `i`.
pub fn infer_weights<T: Scalar>(leaves: &DMatrix<T>, batch: &PatchBatch<T>, lambda_w: T) -> Result<DMatrix<T>> {
    if leaves.nrows() != batch.pixels() {
        return Err(Error::DimensionMismatch(format!(
            "leaves have {} rows, patches have {} pixels",
            leaves.nrows(),
            batch.pixels()
        )));
    }
    let k = leaves.ncols();
    let n = batch.len();
    let gram = leaves.tr_mul(leaves);
    let corr = leaves.tr_mul(batch.data());
    let solver = FeatureSign::new(&gram, lambda_w)?;
    let max_iter = default_max_iterations(k);

    let chunks: Vec<Vec<DVector<T>>> = (0..n.div_ceil(INFERENCE_CHUNK))
        .into_par_iter()
        .map(|chunk| {
            let start = chunk * INFERENCE_CHUNK;
            (start..(start + INFERENCE_CHUNK).min(n))
                .map(|i| {
                    solver
                        .solve(&corr.column(i).into_owned(), max_iter)
                        .map(|w| w.into_weights())
                        .map_err(|e| Error::Datum { index: i, source: Box::new(e) })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let mut weights = DMatrix::zeros(n, k);
    for (i, w) in chunks.into_iter().flatten().enumerate() {
        weights.set_row(i, &w.transpose());
    }
    Ok(weights)
}

/// Fraction of patches that use each leaf (nonzero weight).
pub fn usage_fractions<T: Scalar>(weights: &DMatrix<T>) -> Vec<T> {
    let n = weights.nrows().max(1);
    weights
        .column_iter()
        .map(|c| T::of(c.iter().filter(|v| **v != T::zero()).count() as f64 / n as f64))
        .collect()
}

/// Mean count of nonzero weights per patch.
pub fn average_sparsity<T: Scalar>(weights: &DMatrix<T>) -> T {
    let n = weights.nrows().max(1);
    T::of(weights.iter().filter(|v| **v != T::zero()).count() as f64 / n as f64)
}

/// Gradient of the full loss with respect to every edge's parameters.
#[derive(Clone, Debug)]
pub struct EdgeGradients<T> {
    /// `per_tree[t][child]` is the gradient for the edge into `child` (entry 0 unused).
    pub per_tree: Vec<Vec<[T; GROUP_DIM]>>,
    /// Leaves whose gradient overflowed; edges on their paths are frozen.
    pub overflowed: Vec<LeafRef>,
}

/// Full-loss gradient for all edges, given one quadrature rule per leaf.
///
/// For leaf `b` the reconstruction cotangent is `∂L/∂T_b = g_b F_vᵀ` with
/// `g_b = −(2/N) Σ_i w_ib r_i`. Edge gradients sum the gradients of every
/// descendant leaf and add the `2 λ_j x_j` penalty term.
pub fn edge_gradients<T: Scalar>(
    forest: &Forest<T>,
    gens: &GeneratorSet<T>,
    leaves: &DMatrix<T>,
    batch: &PatchBatch<T>,
    weights: &DMatrix<T>,
    penalties: &Penalties<T>,
    rules: &[QuadratureRule<T>],
) -> Result<EdgeGradients<T>> {
    let refs = forest.leaf_refs();
    if rules.len() != refs.len() || weights.ncols() != refs.len() || weights.nrows() != batch.len() {
        return Err(Error::DimensionMismatch("one quadrature rule and weight column per leaf required".into()));
    }
    let n = T::of(batch.len().max(1) as f64);
    let residual = batch.data() - leaves * weights.transpose();
    let left = (residual * weights) * (-T::of(2.0) / n);

    let leaf_grads: Vec<Result<[T; GROUP_DIM]>> = refs
        .par_iter()
        .enumerate()
        .map(|(b, leaf)| {
            let x = forest.path_params(*leaf)?;
            let root = forest.trees()[leaf.tree].root();
            matexp_param_grad_rank_one(gens, &x, &left.column(b).into_owned(), root, &rules[b])
        })
        .collect();

    let mut per_tree: Vec<Vec<[T; GROUP_DIM]>> =
        forest.trees().iter().map(|t| vec![[T::zero(); GROUP_DIM]; t.node_count()]).collect();
    let mut overflowed = Vec::new();
    for (leaf, g) in refs.iter().zip(leaf_grads) {
        let tree = &forest.trees()[leaf.tree];
        match g {
            Ok(g) => {
                for e in tree.path(leaf.node)? {
                    for j in 0..GROUP_DIM {
                        per_tree[leaf.tree][e][j] += g[j];
                    }
                }
            }
            Err(Error::ExpOverflow { .. }) => overflowed.push(*leaf),
            Err(e) => return Err(e),
        }
    }
    for (t, tree) in forest.trees().iter().enumerate() {
        for (_, child, x) in tree.edges() {
            for j in 0..GROUP_DIM {
                per_tree[t][child][j] += T::of(2.0) * penalties.lambda_params[j] * x[j];
            }
        }
    }
    Ok(EdgeGradients { per_tree, overflowed })
}

/// Settings for one transform update.
#[derive(Clone, Debug)]
pub struct TransformStep<T> {
    pub eta: T,
    pub penalties: Penalties<T>,
    pub quadrature: GradientQuadrature,
    pub x_max: T,
    pub backtracking: bool,
    pub max_halvings: usize,
}

/// What a transform update did.
#[derive(Clone, Debug)]
pub struct StepReport<T> {
    /// Accepted step size; zero if every trial was rejected.
    pub eta: T,
    pub halvings: usize,
    pub loss_before: T,
    pub loss_after: T,
    /// `(tree, edge)` pairs left unchanged because a leaf below them overflowed.
    pub skipped_edges: Vec<(usize, NodeId)>,
}

fn frozen_edges<T: Scalar>(forest: &Forest<T>, leaves: &[LeafRef]) -> Vec<(usize, NodeId)> {
    let mut out = Vec::new();
    for leaf in leaves {
        if let Ok(path) = forest.trees()[leaf.tree].path(leaf.node) {
            for e in path {
                if !out.contains(&(leaf.tree, e)) {
                    out.push((leaf.tree, e));
                }
            }
        }
    }
    out.sort_unstable();
    out
}

fn stepped<T: Scalar>(
    forest: &Forest<T>,
    grads: &EdgeGradients<T>,
    eta: T,
    x_max: T,
    frozen: &[(usize, NodeId)],
) -> Forest<T> {
    let mut next = forest.clone();
    for (t, tree) in next.trees_mut().iter_mut().enumerate() {
        for child in 1..tree.node_count() {
            if frozen.binary_search(&(t, child)).is_ok() {
                continue;
            }
            let g = grads.per_tree[t][child];
            if let Some(x) = tree.edge_params_mut(child) {
                let mut y = *x;
                for j in 0..GROUP_DIM {
                    y[j] -= eta * g[j];
                }
                *x = y.clamped(x_max);
            }
        }
    }
    next
}

/// Materializes `candidate`, reverting edges above overflowing leaves to `fallback` until none overflow.
fn settle_overflow<T: Scalar>(
    mut candidate: Forest<T>,
    fallback: &Forest<T>,
    gens: &GeneratorSet<T>,
    frozen: &mut Vec<(usize, NodeId)>,
) -> Result<(Forest<T>, Vec<DMatrix<T>>)> {
    loop {
        match candidate.leaf_transforms(gens) {
            Ok(ts) => return Ok((candidate, ts)),
            Err(Error::Leaf { tree, leaf, source }) if matches!(*source, Error::ExpOverflow { .. }) => {
                let path = candidate.trees()[tree].path(leaf)?;
                let mut changed = false;
                for e in path {
                    if !frozen.contains(&(tree, e)) {
                        frozen.push((tree, e));
                        let old = *fallback.trees()[tree].edge_params(e).expect("edge exists");
                        *candidate.trees_mut()[tree].edge_params_mut(e).expect("edge exists") = old;
                        changed = true;
                    }
                }
                frozen.sort_unstable();
                if !changed {
                    return Err(Error::Leaf { tree, leaf, source });
                }
            }
            Err(e) => return Err(e),
        }
    }
}

/// One gradient step on every edge's transformation parameters.
///
/// With backtracking the step size is halved until the full loss (weights
/// fixed) does not increase; if no trial succeeds the forest is returned
/// unchanged.
pub fn update_transforms<T: Scalar, R: Rng + ?Sized>(
    forest: &Forest<T>,
    gens: &GeneratorSet<T>,
    batch: &PatchBatch<T>,
    weights: &DMatrix<T>,
    step: &TransformStep<T>,
    rng: &mut R,
) -> Result<(Forest<T>, StepReport<T>)> {
    let leaves = forest.materialize_leaves(gens)?;
    let before = loss_with_leaves(forest, &leaves, batch, weights, &step.penalties)?.total;
    let rules = (0..leaves.ncols())
        .map(|_| step.quadrature.rule(rng))
        .collect::<Result<Vec<_>>>()?;
    let grads = edge_gradients(forest, gens, &leaves, batch, weights, &step.penalties, &rules)?;

    let mut frozen = frozen_edges(forest, &grads.overflowed);
    let mut eta = step.eta;
    let trials = if step.backtracking { step.max_halvings + 1 } else { 1 };
    for trial in 0..trials {
        let candidate = stepped(forest, &grads, eta, step.x_max, &frozen);
        let (candidate, transforms) = settle_overflow(candidate, forest, gens, &mut frozen)?;
        let cand_leaves = candidate.leaves_from_transforms(&transforms);
        let after = loss_with_leaves(&candidate, &cand_leaves, batch, weights, &step.penalties)?.total;
        if !step.backtracking || (after.is_finite() && after <= before) {
            return Ok((
                candidate,
                StepReport { eta, halvings: trial, loss_before: before, loss_after: after, skipped_edges: frozen },
            ));
        }
        eta *= T::of(0.5);
    }
    Ok((
        forest.clone(),
        StepReport {
            eta: T::zero(),
            halvings: step.max_halvings,
            loss_before: before,
            loss_after: before,
            skipped_edges: frozen,
        },
    ))
}

/// Unprojected least-squares solution for root `tree` against the residual of every other tree.
///
/// Returns `None` when the tree's leaves are unused or the normal matrix is singular.
pub fn solve_root<T: Scalar>(
    forest: &Forest<T>,
    transforms: &[DMatrix<T>],
    batch: &PatchBatch<T>,
    weights: &DMatrix<T>,
    tree: usize,
) -> Result<Option<DVector<T>>> {
    let refs = forest.leaf_refs();
    let leaves = forest.leaves_from_transforms(transforms);
    let residual = batch.data() - &leaves * weights.transpose();
    solve_root_from_residual(&refs, transforms, &leaves, &residual, weights, tree)
}

fn solve_root_from_residual<T: Scalar>(
    refs: &[LeafRef],
    transforms: &[DMatrix<T>],
    leaves: &DMatrix<T>,
    residual: &DMatrix<T>,
    weights: &DMatrix<T>,
    tree: usize,
) -> Result<Option<DVector<T>>> {
    let cols: Vec<usize> = refs.iter().enumerate().filter(|(_, l)| l.tree == tree).map(|(c, _)| c).collect();
    if cols.iter().all(|&c| weights.column(c).iter().all(|v| *v == T::zero())) {
        return Ok(None);
    }
    let m = leaves.nrows();
    // Residual with this tree's own contribution added back.
    let mut own = residual.clone();
    for &c in &cols {
        own += leaves.column(c) * weights.column(c).transpose();
    }
    let mut normal = DMatrix::<T>::zeros(m, m);
    let mut rhs = DVector::<T>::zeros(m);
    for &b in &cols {
        let wb = weights.column(b);
        let mut mixed = DMatrix::<T>::zeros(m, m);
        for &c in &cols {
            let gram = wb.dot(&weights.column(c));
            if gram != T::zero() {
                mixed.zip_apply(&transforms[c], |a, b| *a += gram * b);
            }
        }
        normal += transforms[b].tr_mul(&mixed);
        rhs += transforms[b].tr_mul(&(&own * wb));
    }
    // Symmetrize against rounding before the Cholesky factorization.
    let normal = (&normal + normal.transpose()) * T::of(0.5);
    Ok(normal.cholesky().map(|c| c.solve(&rhs)).filter(|f| f.iter().all(|v| v.is_finite())))
}

/// Closed-form root updates, one tree at a time in index order, each followed
/// by projection to unit norm. Returns the skipped trees.
pub fn update_roots<T: Scalar>(
    forest: &Forest<T>,
    transforms: &[DMatrix<T>],
    batch: &PatchBatch<T>,
    weights: &DMatrix<T>,
) -> Result<(Forest<T>, Vec<usize>)> {
    let refs = forest.leaf_refs();
    if transforms.len() != refs.len() || weights.ncols() != refs.len() || weights.nrows() != batch.len() {
        return Err(Error::DimensionMismatch("one transform and weight column per leaf required".into()));
    }
    let mut next = forest.clone();
    let mut leaves = next.leaves_from_transforms(transforms);
    let mut residual = batch.data() - &leaves * weights.transpose();
    let mut skipped = Vec::new();
    for t in 0..next.trees().len() {
        let Some(root) = solve_root_from_residual(&refs, transforms, &leaves, &residual, weights, t)? else {
            skipped.push(t);
            continue;
        };
        let norm = root.norm();
        if !(norm > T::zero()) {
            skipped.push(t);
            continue;
        }
        let root = root / norm;
        for (c, leaf) in refs.iter().enumerate() {
            if leaf.tree == t {
                let new_col = &transforms[c] * &root;
                residual -= (&new_col - leaves.column(c)) * weights.column(c).transpose();
                leaves.set_column(c, &new_col);
            }
        }
        next.trees_mut()[t].set_root(root);
    }
    Ok((next, skipped))
}

/// Index drawn with probability proportional to `weights`; `None` if they sum to zero.
pub fn choose_proportional<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> Option<usize> {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return None;
    }
    let mut target = rng.random::<f64>() * total;
    let mut last = None;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            last = Some(i);
            if target < w {
                return Some(i);
            }
            target -= w;
        }
    }
    last
}

/// Resets the transformations of leaves used by fewer than `threshold` of the batch.
///
/// The new path parameters are centered on a sibling chosen with probability
/// proportional to its usage (or on the identity if no sibling is used),
/// plus Gaussian noise with standard deviation `sigma`.
pub fn reinit_underused<T: Scalar, R: Rng + ?Sized>(
    forest: &Forest<T>,
    usage: &[T],
    threshold: f64,
    sigma: f64,
    x_max: f64,
    epoch: usize,
    rng: &mut R,
) -> Result<(Forest<T>, Vec<ReinitEvent>)> {
    let refs = forest.leaf_refs();
    if usage.len() != refs.len() {
        return Err(Error::DimensionMismatch("one usage fraction per leaf required".into()));
    }
    let noise = Normal::new(0.0, sigma).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut next = forest.clone();
    let mut events = Vec::new();
    for (t, tree) in forest.trees().iter().enumerate() {
        let cols: Vec<usize> = refs.iter().enumerate().filter(|(_, l)| l.tree == t).map(|(c, _)| c).collect();
        for &dead in &cols {
            if usage[dead].to_f64_lossy() >= threshold {
                continue;
            }
            let weights: Vec<f64> =
                cols.iter().map(|&c| if c == dead { 0.0 } else { usage[c].to_f64_lossy() }).collect();
            let source = choose_proportional(&weights, rng).map(|i| refs[cols[i]].node);
            let center = match source {
                Some(node) => tree.path_params(node)?,
                None => TransformParams::zero(),
            };
            let mut target = center;
            for j in 0..GROUP_DIM {
                target[j] += T::of(noise.sample(rng));
            }
            let leaf = refs[dead].node;
            let Some(parent) = tree.parent(leaf) else {
                continue;
            };
            let edge = (target - tree.path_params(parent)?).clamped(T::of(x_max));
            if let Some(x) = next.trees_mut()[t].edge_params_mut(leaf) {
                *x = edge;
            }
            events.push(ReinitEvent { epoch, tree: t, leaf, source });
        }
    }
    Ok((next, events))
}

/// Batch MSE and sparsity of a dictionary under exact inference.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation<T> {
    pub mse: T,
    pub weight_penalty: T,
    pub sparsity: T,
}

pub fn evaluate<T: Scalar>(dictionary: &DMatrix<T>, batch: &PatchBatch<T>, lambda_w: T) -> Result<Evaluation<T>> {
    let weights = infer_weights(dictionary, batch, lambda_w)?;
    let mse = crate::model::reconstruction_mse(dictionary, batch, &weights)?;
    let n = T::of(batch.len().max(1) as f64);
    let l1 = weights.iter().fold(T::zero(), |a, v| a + v.abs());
    Ok(Evaluation { mse, weight_penalty: lambda_w * l1 / n, sparsity: average_sparsity(&weights) })
}

fn sample_batch<T: Scalar, R: Rng + ?Sized>(pool: &PatchBatch<T>, size: usize, rng: &mut R) -> PatchBatch<T> {
    let n = pool.len();
    let idx = index::sample(rng, n, size.min(n)).into_vec();
    pool.select(&idx)
}

/// Trains a forest on patches drawn from `pool`.
pub fn train<T: Scalar>(config: &TrainConfig, pool: &PatchBatch<T>) -> Result<(Forest<T>, TrainMetrics<T>)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let forest = init_forest::<T, _>(config, &mut rng)?;
    run_epochs(config, pool, forest, &mut rng)
}

/// Continues training from `forest`, e.g. a loaded checkpoint. The rng is
/// seeded from `config.seed`; layout fields of `config` are ignored.
pub fn train_from<T: Scalar>(
    config: &TrainConfig,
    pool: &PatchBatch<T>,
    forest: Forest<T>,
) -> Result<(Forest<T>, TrainMetrics<T>)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    run_epochs(config, pool, forest, &mut rng)
}

fn run_epochs<T: Scalar>(
    config: &TrainConfig,
    pool: &PatchBatch<T>,
    mut forest: Forest<T>,
    rng: &mut ChaCha8Rng,
) -> Result<(Forest<T>, TrainMetrics<T>)> {
    if pool.side() != forest.side() {
        return Err(Error::DimensionMismatch(format!(
            "patches are {0}x{0}, model expects side {1}",
            pool.side(),
            forest.side()
        )));
    }
    if pool.is_empty() && config.epochs > 0 {
        return Err(Error::InvalidArgument("no training patches".into()));
    }
    let gens = build_generators::<T>(forest.side())?;
    let penalties = config.penalties::<T>();
    let mut metrics = TrainMetrics::default();

    for epoch in 0..config.epochs {
        let batch = sample_batch(pool, config.batch_size, rng);
        let transforms = forest.leaf_transforms(&gens)?;
        let leaves = forest.leaves_from_transforms(&transforms);
        let weights = infer_weights(&leaves, &batch, penalties.lambda_w)?;
        let loss = loss_with_leaves(&forest, &leaves, &batch, &weights, &penalties)?;
        if !loss.total.is_finite() {
            return Err(Error::Numerical(format!("non-finite loss at epoch {epoch}: {loss:?}")));
        }
        let usage = usage_fractions(&weights);
        let sparsity = average_sparsity(&weights);

        let eta = T::of(config.learning_rate * config.lr_decay.powi(epoch as i32));
        let step = TransformStep {
            eta,
            penalties,
            quadrature: config.quadrature,
            x_max: T::of(config.x_max),
            backtracking: config.backtracking,
            max_halvings: config.max_halvings,
        };
        let (stepped, report) = update_transforms(&forest, &gens, &batch, &weights, &step, rng)?;
        for &(t, e) in &report.skipped_edges {
            metrics.overflow_skips.push((epoch, t, e));
        }
        forest = stepped;

        let transforms = forest.leaf_transforms(&gens)?;
        let (updated, skipped) = update_roots(&forest, &transforms, &batch, &weights)?;
        forest = updated;
        metrics.root_skips.extend(skipped.into_iter().map(|t| (epoch, t)));

        let mut reinits = 0;
        if config.reinit_every > 0 && (epoch + 1) % config.reinit_every == 0 {
            let (updated, events) = reinit_underused(
                &forest,
                &usage,
                config.underuse_threshold,
                config.reinit_sigma,
                config.x_max,
                epoch,
                rng,
            )?;
            forest = updated;
            reinits = events.len();
            metrics.reinit_log.extend(events);
        }

        metrics.epochs.push(EpochRecord { epoch, loss, sparsity, reinits, step: report.eta });
        metrics.usage = usage;
    }
    Ok((forest, metrics))
}

/// Per-epoch record of the sparse-coding baseline.
#[derive(Clone, Debug, PartialEq)]
pub struct BaselineEpoch<T> {
    pub epoch: usize,
    pub mse: T,
    pub weight_penalty: T,
    /// `λ_F Σ_k ‖F_k‖²`; constant under the fixed-magnitude constraint.
    pub feature_penalty: T,
    pub sparsity: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineMetrics<T> {
    pub epochs: Vec<BaselineEpoch<T>>,
}

impl<T> Default for BaselineMetrics<T> {
    fn default() -> Self {
        BaselineMetrics { epochs: Vec::new() }
    }
}

/// One sweep of exact column updates under `‖F_k‖ = magnitude`.
///
/// With the other columns fixed, the constrained minimizer of the batch MSE
/// over column `k` is `magnitude · R_k w_k / ‖R_k w_k‖`, where `R_k` is the
/// residual with column `k` added back. Columns with no usage are kept.
pub fn sc_dictionary_update<T: Scalar>(
    dictionary: &DMatrix<T>,
    batch: &PatchBatch<T>,
    weights: &DMatrix<T>,
    magnitude: T,
) -> Result<DMatrix<T>> {
    if dictionary.nrows() != batch.pixels() || weights.shape() != (batch.len(), dictionary.ncols()) {
        return Err(Error::DimensionMismatch("dictionary, batch and weights disagree".into()));
    }
    let mut dict = dictionary.clone();
    let mut residual = batch.data() - &dict * weights.transpose();
    for k in 0..dict.ncols() {
        let wk = weights.column(k);
        if wk.iter().all(|v| *v == T::zero()) {
            continue;
        }
        let old = dict.column(k).into_owned();
        let target = &residual * wk + &old * wk.norm_squared();
        let norm = target.norm();
        if !(norm > T::zero()) {
            continue;
        }
        let new = target * (magnitude / norm);
        residual -= (&new - &old) * wk.transpose();
        dict.set_column(k, &new);
    }
    Ok(dict)
}

/// Sparse coding with every feature constrained to `fixed_magnitude`.
pub fn train_sc_baseline<T: Scalar>(
    pool: &PatchBatch<T>,
    num_features: usize,
    lambda_w: f64,
    fixed_magnitude: f64,
    config: &TrainConfig,
) -> Result<(DMatrix<T>, BaselineMetrics<T>)> {
    config.validate()?;
    if !(fixed_magnitude > 0.0 && fixed_magnitude.is_finite()) {
        return Err(Error::InvalidArgument("fixed feature magnitude must be positive".into()));
    }
    if num_features == 0 {
        return Err(Error::InvalidArgument("need at least one feature".into()));
    }
    if pool.is_empty() && config.epochs > 0 {
        return Err(Error::InvalidArgument("no training patches".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_5c00);
    let m = pool.pixels();
    let magnitude = T::of(fixed_magnitude);
    let mut dict = DMatrix::<T>::zeros(m, num_features);
    for k in 0..num_features {
        dict.set_column(k, &(centered_unit::<T, _>(m, &mut rng) * magnitude));
    }
    let lambda = T::of(lambda_w);
    let feature_penalty = T::of(config.lambda_f * fixed_magnitude * fixed_magnitude * num_features as f64);
    let mut metrics = BaselineMetrics::default();
    for epoch in 0..config.epochs {
        let batch = sample_batch(pool, config.batch_size, &mut rng);
        let weights = infer_weights(&dict, &batch, lambda)?;
        let mse = crate::model::reconstruction_mse(&dict, &batch, &weights)?;
        if !mse.is_finite() {
            return Err(Error::Numerical(format!("non-finite baseline loss at epoch {epoch}")));
        }
        let n = T::of(batch.len() as f64);
        let weight_penalty = lambda * weights.iter().fold(T::zero(), |a, v| a + v.abs()) / n;
        metrics.epochs.push(BaselineEpoch {
            epoch,
            mse,
            weight_penalty,
            feature_penalty,
            sparsity: average_sparsity(&weights),
        });
        dict = sc_dictionary_update(&dict, &batch, &weights, magnitude)?;
    }
    Ok((dict, metrics))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{gen_synthetic_lines, PatchSource};
    use crate::liegroup::Generator;

    fn batch_from(side: usize, cols: &[DVector<f64>]) -> PatchBatch<f64> {
        let data = DMatrix::from_columns(cols);
        PatchBatch::new(side, data, vec![PatchSource::Unknown; cols.len()]).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let c = TrainConfig { batch_size: 0, ..Default::default() };
        assert!(c.validate().is_err());
        let c = TrainConfig { lambda_w: -1.0, ..Default::default() };
        assert!(c.validate().is_err());
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pool: PatchBatch<f64> = gen_synthetic_lines(20, 8, &mut rng).unwrap();
        let cfg = TrainConfig { trees: 2, branching: 3, epochs: 0, seed: 11, ..Default::default() };
        let (forest, metrics) = train(&cfg, &pool).unwrap();
        assert!(metrics.epochs.is_empty());
        let expected = init_forest::<f64, _>(&cfg, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        assert_eq!(forest, expected);
        for t in forest.trees() {
            assert!((t.root().norm() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_patches_get_zero_weights() {
        let leaves = DMatrix::<f64>::identity(4, 3);
        let batch = batch_from(2, &[DVector::zeros(4), DVector::zeros(4)]);
        let w = infer_weights(&leaves, &batch, 0.1).unwrap();
        assert!(w.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn single_patch_matches_direct_solve() {
        let leaves = DMatrix::from_row_slice(4, 2, &[1.0, 0.2, 0.0, 1.0, -0.5, 0.3, 0.1, 0.0]);
        let patch = DVector::from_vec(vec![0.5, -0.2, 0.1, -0.4]);
        let batch = batch_from(2, std::slice::from_ref(&patch));
        let w = infer_weights(&leaves, &batch, 0.05).unwrap();
        let direct = crate::sparse_solver::feature_sign(&leaves, &patch, 0.05).unwrap();
        assert_eq!(w.row(0).transpose(), *direct.weights());
    }

    #[test]
    fn penalty_only_dynamics_shrink_params() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gens = build_generators::<f64>(4).unwrap();
        let root = centered_unit::<f64, _>(16, &mut rng);
        let x = TransformParams([0.3, -0.2, 0.1, 0.05, -0.04, 0.2]);
        let forest = Forest::new(4, vec![Tree::flat(root, vec![x])]).unwrap();
        let batch = batch_from(4, &[centered_unit(16, &mut rng)]);
        let weights = DMatrix::zeros(1, 1);
        let step = TransformStep {
            eta: 1.0,
            penalties: Penalties::with_base(0.0, 0.1, [1.0; 6]),
            quadrature: GradientQuadrature::FixedNodes(4),
            x_max: 5.0,
            backtracking: true,
            max_halvings: 10,
        };
        let (next, _) = update_transforms(&forest, &gens, &batch, &weights, &step, &mut rng).unwrap();
        let y = next.trees()[0].edge_params(1).unwrap();
        for j in 0..6 {
            assert!(y[j].abs() < x[j].abs());
            assert!((y[j] - 0.8 * x[j]).abs() < 1e-12);
        }
    }

    #[test]
    fn perfect_fit_has_zero_mse_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gens = build_generators::<f64>(5).unwrap();
        let root = centered_unit::<f64, _>(25, &mut rng);
        let x = TransformParams([0.4, -0.3, 0.2, 0.05, 0.0, -0.1]);
        let forest = Forest::new(5, vec![Tree::flat(root.clone(), vec![x])]).unwrap();
        let leaves = forest.materialize_leaves(&gens).unwrap();
        let batch = batch_from(5, &[leaves.column(0).into_owned()]);
        let weights = DMatrix::from_element(1, 1, 1.0);
        let rules = vec![QuadratureRule::gauss_legendre(16).unwrap()];
        let g = edge_gradients(&forest, &gens, &leaves, &batch, &weights, &Penalties::zero(), &rules).unwrap();
        assert!(g.per_tree[0][1].iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn identity_leaf_root_is_normalized_patch() {
        let patch = DVector::from_vec(vec![0.3, -0.1, 0.5, -0.7]);
        let forest = Forest::new(2, vec![Tree::flat(DVector::from_vec(vec![0.5, 0.5, -0.5, -0.5]), vec![TransformParams::zero()])]).unwrap();
        let transforms = vec![DMatrix::identity(4, 4)];
        let batch = batch_from(2, std::slice::from_ref(&patch));
        let weights = DMatrix::from_element(1, 1, 1.0);
        let (next, skipped) = update_roots(&forest, &transforms, &batch, &weights).unwrap();
        assert!(skipped.is_empty());
        assert!((next.trees()[0].root() - &patch / patch.norm()).amax() < 1e-12);
    }

    #[test]
    fn unused_root_is_unchanged() {
        let root = DVector::from_vec(vec![0.5, 0.5, -0.5, -0.5]);
        let forest = Forest::new(2, vec![Tree::flat(root.clone(), vec![TransformParams::zero()])]).unwrap();
        let batch = batch_from(2, &[DVector::from_vec(vec![1.0, 0.0, 0.0, -1.0])]);
        let (next, skipped) = update_roots(&forest, &[DMatrix::identity(4, 4)], &batch, &DMatrix::zeros(1, 1)).unwrap();
        assert_eq!(skipped, vec![0]);
        assert_eq!(next.trees()[0].root(), &root);
    }

    #[test]
    fn all_used_leaves_are_kept() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let root = DVector::from_element(4, 0.5);
        let x = TransformParams::along(Generator::Rotate, 0.3);
        let forest = Forest::new(2, vec![Tree::flat(root, vec![x, x])]).unwrap();
        let (next, events) = reinit_underused(&forest, &[0.5, 0.2], 0.005, 0.1, 5.0, 0, &mut rng).unwrap();
        assert!(events.is_empty());
        assert_eq!(next, forest);
    }

    #[test]
    fn dead_tree_resets_near_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = TransformParams([2.0; 6]);
        let forest = Forest::new(2, vec![Tree::flat(DVector::from_element(4, 0.5), vec![x, x])]).unwrap();
        let (next, events) = reinit_underused(&forest, &[0.0, 0.0], 0.005, 0.1, 5.0, 3, &mut rng).unwrap();
        assert_eq!(events.len(), 2);
        assert!(events.iter().all(|e| e.source.is_none() && e.epoch == 3));
        for leaf in [1, 2] {
            assert!(next.trees()[0].edge_params(leaf).unwrap().norm_inf() < 0.6);
        }
    }

    #[test]
    fn proportional_choice_handles_zero_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        assert_eq!(choose_proportional(&[0.0, 0.0], &mut rng), None);
        assert_eq!(choose_proportional(&[0.0, 1.0, 0.0], &mut rng), Some(1));
    }

    #[test]
    fn huge_lambda_keeps_baseline_dictionary() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pool: PatchBatch<f64> = gen_synthetic_lines(50, 8, &mut rng).unwrap();
        let cfg = TrainConfig { epochs: 0, batch_size: 50, ..Default::default() };
        let (d0, _) = train_sc_baseline(&pool, 4, 1e6, 0.8, &cfg).unwrap();
        let cfg = TrainConfig { epochs: 3, ..cfg };
        let (d3, metrics) = train_sc_baseline(&pool, 4, 1e6, 0.8, &cfg).unwrap();
        assert_eq!(d0, d3);
        assert!(metrics.epochs.iter().all(|e| e.sparsity == 0.0));
        for c in d3.column_iter() {
            assert!((c.norm() - 0.8).abs() < 1e-12);
        }
    }

    #[test]
    fn rank_one_baseline_finds_the_patch() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let patch = centered_unit::<f64, _>(16, &mut rng) * 2.0;
        let batch = batch_from(4, &vec![patch.clone(); 10]);
        let cfg = TrainConfig { epochs: 5, batch_size: 10, ..Default::default() };
        let (d, _) = train_sc_baseline(&batch, 1, 0.01, 1.0, &cfg).unwrap();
        let f = d.column(0);
        let cos = f.dot(&patch) / patch.norm();
        assert!((cos - 1.0).abs() < 1e-10, "{cos}");
    }
}
