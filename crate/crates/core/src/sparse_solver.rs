//! Exact L1-regularized least squares by feature-sign search.
//!
//! Minimizes `f(w) = ‖y − D w‖² + λ‖w‖₁` for a single signal `y`. The solver
//! works on the Gram matrix `DᵀD` and the correlations `Dᵀy`, so a batch of
//! signals against one dictionary shares the Gram computation.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Entries with magnitude below this are stored as exact zeros.
pub const ZERO_THRESHOLD: f64 = 1e-12;

/// Active Gram blocks with `min(L_ii)² ≤ ratio · max(G_ii)` count as singular.
const SINGULAR_RATIO: f64 = 1e-10;

enum Step<T> {
    Target(Vec<T>),
    Null(Vec<T>),
}

/// Sparse code for one signal.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseWeights<T: Scalar> {
    w: DVector<T>,
    support: Vec<usize>,
}

impl<T: Scalar> SparseWeights<T> {
    /// Builds weights from a dense vector, zeroing entries below [`ZERO_THRESHOLD`].
    pub fn from_dense(mut w: DVector<T>) -> Self {
        let eps = T::of(ZERO_THRESHOLD);
        let mut support = Vec::new();
        for (k, v) in w.iter_mut().enumerate() {
            if v.abs() < eps {
                *v = T::zero();
            } else {
                support.push(k);
            }
        }
        SparseWeights { w, support }
    }

    pub fn weights(&self) -> &DVector<T> {
        &self.w
    }

    pub fn into_weights(self) -> DVector<T> {
        self.w
    }

    /// Indices of nonzero entries, ascending.
    pub fn support(&self) -> &[usize] {
        &self.support
    }

    pub fn nnz(&self) -> usize {
        self.support.len()
    }
}

/// `‖signal − dictionary·w‖² + λ‖w‖₁`.
pub fn lasso_objective<T: Scalar>(dictionary: &DMatrix<T>, signal: &DVector<T>, w: &DVector<T>, lambda_w: T) -> Result<T> {
    if dictionary.nrows() != signal.len() || dictionary.ncols() != w.len() {
        return Err(Error::DimensionMismatch(format!(
            "dictionary {:?}, signal {}, weights {}",
            dictionary.shape(),
            signal.len(),
            w.len()
        )));
    }
    let residual = signal - dictionary * w;
    Ok(residual.norm_squared() + lambda_w * w.lp_norm(1))
}

/// Default iteration cap for a dictionary with `k` columns.
pub fn default_max_iterations(k: usize) -> usize {
    10 * k.max(1)
}

/// Solves the lasso problem for `signal` against `dictionary`.
pub fn feature_sign<T: Scalar>(dictionary: &DMatrix<T>, signal: &DVector<T>, lambda_w: T) -> Result<SparseWeights<T>> {
    if dictionary.nrows() != signal.len() {
        return Err(Error::DimensionMismatch(format!(
            "dictionary has {} rows, signal has {} entries",
            dictionary.nrows(),
            signal.len()
        )));
    }
    let gram = dictionary.tr_mul(dictionary);
    let corr = dictionary.tr_mul(signal);
    FeatureSign::new(&gram, lambda_w)?.solve(&corr, default_max_iterations(dictionary.ncols()))
}

/// Feature-sign solver bound to a fixed Gram matrix.
#[derive(Debug, Clone)]
pub struct FeatureSign<'a, T: Scalar> {
    gram: &'a DMatrix<T>,
    lambda: T,
}

impl<'a, T: Scalar> FeatureSign<'a, T> {
    pub fn new(gram: &'a DMatrix<T>, lambda_w: T) -> Result<Self> {
        if !gram.is_square() {
            return Err(Error::DimensionMismatch("Gram matrix must be square".into()));
        }
        if !(lambda_w >= T::zero()) {
            return Err(Error::InvalidArgument("lambda_w must be nonnegative".into()));
        }
        Ok(FeatureSign { gram, lambda: lambda_w })
    }

    /// Smooth part of the objective up to the constant `yᵀy`: `wᵀGw − 2cᵀw`,
    /// plus the L1 penalty. Only the `active` coordinates of `w` are nonzero.
    fn objective(&self, corr: &DVector<T>, active: &[usize], w: &[T]) -> T {
        let two = T::of(2.0);
        let mut f = T::zero();
        for (a, &i) in active.iter().enumerate() {
            let mut gw = T::zero();
            for (b, &j) in active.iter().enumerate() {
                gw += self.gram[(i, j)] * w[b];
            }
            f += w[a] * gw - two * corr[i] * w[a] + self.lambda * w[a].abs();
        }
        f
    }

    /// Gradient of `‖y − Dw‖²` at `w`: `2(Gw − c)`.
    fn smooth_gradient(&self, corr: &DVector<T>, x: &DVector<T>) -> DVector<T> {
        (self.gram * x - corr) * T::of(2.0)
    }

    /// Solves `G_aa z = c_a − λθ_a/2`. When `G_aa` is singular the active
    /// columns are dependent and a null direction `d` with `θᵀd < 0` is
    /// returned instead.
    fn subproblem(&self, corr: &DVector<T>, active: &[usize], theta: &[T]) -> Step<T> {
        let n = active.len();
        let half = T::of(0.5);
        let g = DMatrix::from_fn(n, n, |a, b| self.gram[(active[a], active[b])]);
        let rhs = DVector::from_fn(n, |a, _| corr[active[a]] - self.lambda * half * theta[a]);
        let diag_max = g.diagonal().amax();
        if let Some(chol) = g.clone().cholesky() {
            let l_min = chol.l_dirty().diagonal().iter().fold(T::max_value().unwrap(), |m, &v| m.min(v));
            let z = chol.solve(&rhs);
            if l_min * l_min > diag_max * T::of(SINGULAR_RATIO) && z.iter().all(|v| v.is_finite()) {
                return Step::Target(z.iter().copied().collect());
            }
        }
        let svd = g.svd(false, true);
        let v_t = svd.v_t.expect("requested right singular vectors");
        let (smallest, _) = svd
            .singular_values
            .iter()
            .enumerate()
            .fold((0, T::max_value().unwrap()), |(bi, bv), (i, &v)| if v < bv { (i, v) } else { (bi, bv) });
        let mut d: Vec<T> = v_t.row(smallest).iter().copied().collect();
        let slope = d.iter().zip(theta).fold(T::zero(), |s, (&di, &t)| s + di * t);
        if slope > T::zero() {
            d.iter_mut().for_each(|v| *v = -*v);
        }
        Step::Null(d)
    }

    /// Moves along a null direction of the active columns, where the
    /// quadratic term is constant, to the breakpoint minimizing the L1 norm.
    fn null_step(&self, current: &[T], d: &[T]) -> Option<Vec<T>> {
        let l1 = |p: &[T]| p.iter().fold(T::zero(), |s, v| s + v.abs());
        let mut best: Option<(T, Vec<T>)> = None;
        for (a, (&c, &da)) in current.iter().zip(d).enumerate() {
            if c == T::zero() || da == T::zero() {
                continue;
            }
            let t = -c / da;
            if t <= T::zero() {
                continue;
            }
            let mut point: Vec<T> = current.iter().zip(d).map(|(&c, &di)| c + t * di).collect();
            point[a] = T::zero();
            let value = l1(&point);
            if best.as_ref().is_none_or(|(bv, _)| value < *bv) {
                best = Some((value, point));
            }
        }
        best.filter(|(v, _)| *v <= l1(current)).map(|(_, p)| p)
    }

    /// Runs feature-sign search for correlations `corr = Dᵀy`.
    pub fn solve(&self, corr: &DVector<T>, max_iterations: usize) -> Result<SparseWeights<T>> {
        let k = self.gram.nrows();
        if corr.len() != k {
            return Err(Error::DimensionMismatch(format!("correlations have {} entries, expected {k}", corr.len())));
        }
        let scale = T::one().max(self.lambda).max(corr.amax()).max(self.gram.amax());
        let tol = scale * T::of(1e-10);

        let mut x = DVector::<T>::zeros(k);
        let mut active: Vec<usize> = Vec::new();
        let mut steps = 0usize;

        loop {
            // Activate the zero coefficient with the steepest violation.
            let grad = self.smooth_gradient(corr, &x);
            let mut best: Option<(usize, T)> = None;
            for i in 0..k {
                if x[i] != T::zero() || active.contains(&i) {
                    continue;
                }
                let gi = grad[i].abs();
                if gi > self.lambda + tol && best.is_none_or(|(_, b)| gi > b) {
                    best = Some((i, gi));
                }
            }
            let Some((entering, _)) = best else {
                break;
            };
            active.push(entering);
            let mut theta: Vec<T> = active
                .iter()
                .map(|&i| {
                    if i == entering {
                        -grad[i].signum()
                    } else {
                        x[i].signum()
                    }
                })
                .collect();

            // Feature-sign steps until the active coefficients are optimal.
            loop {
                steps += 1;
                if steps > max_iterations {
                    return Err(Error::NonConvergence { iterations: max_iterations });
                }
                let current: Vec<T> = active.iter().map(|&i| x[i]).collect();
                let target = match self.subproblem(corr, &active, &theta) {
                    Step::Target(z) => z,
                    Step::Null(d) => match self.null_step(&current, &d) {
                        Some(p) => p,
                        None => break,
                    },
                };

                let mut best_point = target.clone();
                let mut best_value = self.objective(corr, &active, &target);
                for a in 0..active.len() {
                    let (c, t) = (current[a], target[a]);
                    if c != T::zero() && c * t < T::zero() {
                        let s = c / (c - t);
                        let mut point: Vec<T> = current.iter().zip(&target).map(|(&c, &t)| c + (t - c) * s).collect();
                        point[a] = T::zero();
                        let value = self.objective(corr, &active, &point);
                        if value < best_value {
                            best_value = value;
                            best_point = point;
                        }
                    }
                }

                let moved = best_point
                    .iter()
                    .zip(&current)
                    .any(|(&b, &c)| (b - c).abs() > T::of(ZERO_THRESHOLD) * (T::one() + c.abs()));
                for (a, &i) in active.iter().enumerate() {
                    x[i] = best_point[a];
                }
                active.retain(|&i| x[i] != T::zero());
                theta = active.iter().map(|&i| x[i].signum()).collect();

                let grad = self.smooth_gradient(corr, &x);
                let optimal = active
                    .iter()
                    .all(|&i| (grad[i] + self.lambda * x[i].signum()).abs() <= tol);
                if optimal || !moved {
                    break;
                }
            }
        }

        Ok(SparseWeights::from_dense(x))
    }
}
