//! Generators of the 2D affine group acting on a discrete pixel grid, the
//! finite transformations they generate, and gradients of those
//! transformations with respect to the Lie-algebra coordinates.
//!
//! Derivatives along the grid are periodic spectral (sinc-interpolation)
//! derivatives, so integer translations of band-limited patches are exact
//! circular shifts. Pixel coordinates are centered on the patch center with
//! unit spacing; `x` grows with the column index and `y` with the row index.

use std::f64::consts::PI;
use std::ops::{Add, Index, IndexMut, Neg, Sub};

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dimension of the full affine group.
pub const GROUP_DIM: usize = 6;

/// Default cap on each Lie-algebra coordinate.
pub const DEFAULT_X_MAX: f64 = 5.0;

/// Entries of `exp(A)` above this magnitude are treated as overflow.
pub const EXP_OVERFLOW_LIMIT: f64 = 1e12;

/// The six one-parameter transformation families, in generator order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Generator {
    TranslateX,
    TranslateY,
    Rotate,
    Scale,
    /// Area-preserving stretch along the X/Y axes.
    HyperbolicAxes,
    /// Area-preserving stretch along the diagonals.
    HyperbolicDiagonal,
}

impl Generator {
    pub const ALL: [Generator; GROUP_DIM] = [
        Generator::TranslateX,
        Generator::TranslateY,
        Generator::Rotate,
        Generator::Scale,
        Generator::HyperbolicAxes,
        Generator::HyperbolicDiagonal,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Generator::TranslateX => "translate-x",
            Generator::TranslateY => "translate-y",
            Generator::Rotate => "rotate",
            Generator::Scale => "scale",
            Generator::HyperbolicAxes => "hyperbolic-axes",
            Generator::HyperbolicDiagonal => "hyperbolic-diagonal",
        }
    }

    /// Velocity field `(u, v)` of the transformation at centered coordinates `(x, y)`.
    pub fn vector_field(self, x: f64, y: f64) -> (f64, f64) {
        match self {
            Generator::TranslateX => (1.0, 0.0),
            Generator::TranslateY => (0.0, 1.0),
            Generator::Rotate => (-y, x),
            Generator::Scale => (x, y),
            Generator::HyperbolicAxes => (x, -y),
            Generator::HyperbolicDiagonal => (y, x),
        }
    }
}

/// Coordinates of a group element in the generator basis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransformParams<T>(pub [T; GROUP_DIM]);

impl<T: Scalar> TransformParams<T> {
    pub fn zero() -> Self {
        TransformParams([T::zero(); GROUP_DIM])
    }

    pub fn new(x: [T; GROUP_DIM]) -> Self {
        TransformParams(x)
    }

    /// A pure motion along one generator.
    pub fn along(generator: Generator, amount: T) -> Self {
        let mut p = Self::zero();
        p.0[generator.index()] = amount;
        p
    }

    pub fn as_array(&self) -> &[T; GROUP_DIM] {
        &self.0
    }

    pub fn scaled(&self, s: T) -> Self {
        TransformParams(self.0.map(|v| v * s))
    }

    pub fn norm_inf(&self) -> T {
        self.0.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    /// Clamps every coordinate into `[-x_max, x_max]`.
    pub fn clamped(&self, x_max: T) -> Self {
        TransformParams(self.0.map(|v| v.max(-x_max).min(x_max)))
    }
}

impl<T: Scalar> Default for TransformParams<T> {
    fn default() -> Self {
        Self::zero()
    }
}

impl<T: Scalar> Add for TransformParams<T> {
    type Output = Self;
    fn add(self, rhs: Self) -> Self {
        let mut out = self.0;
        for (o, r) in out.iter_mut().zip(rhs.0) {
            *o += r;
        }
        TransformParams(out)
    }
}

impl<T: Scalar> Sub for TransformParams<T> {
    type Output = Self;
    fn sub(self, rhs: Self) -> Self {
        self + (-rhs)
    }
}

impl<T: Scalar> Neg for TransformParams<T> {
    type Output = Self;
    fn neg(self) -> Self {
        TransformParams(self.0.map(|v| -v))
    }
}

impl<T> Index<usize> for TransformParams<T> {
    type Output = T;
    fn index(&self, i: usize) -> &T {
        &self.0[i]
    }
}

impl<T> IndexMut<usize> for TransformParams<T> {
    fn index_mut(&mut self, i: usize) -> &mut T {
        &mut self.0[i]
    }
}

/// The six generator matrices for a `side × side` patch, in [`Generator::ALL`] order.
#[derive(Clone, Debug)]
pub struct GeneratorSet<T: Scalar> {
    side: usize,
    generators: Vec<DMatrix<T>>,
}

impl<T: Scalar> GeneratorSet<T> {
    pub fn side(&self) -> usize {
        self.side
    }

    /// Number of pixels `M = side²`.
    pub fn pixels(&self) -> usize {
        self.side * self.side
    }

    pub fn get(&self, g: Generator) -> &DMatrix<T> {
        &self.generators[g.index()]
    }

    pub fn matrices(&self) -> &[DMatrix<T>] {
        &self.generators
    }

    /// `A = Σ_j x_j G_j`.
    pub fn combination(&self, x: &TransformParams<T>) -> DMatrix<T> {
        let m = self.pixels();
        let mut a = DMatrix::zeros(m, m);
        for (g, &xj) in self.generators.iter().zip(x.0.iter()) {
            if xj != T::zero() {
                a.zip_apply(g, |a, b| *a += xj * b);
            }
        }
        a
    }
}

/// Periodic spectral first-derivative matrix on `n` unit-spaced samples.
///
/// For even `n` the Nyquist mode is dropped, which keeps the matrix real and
/// skew-symmetric.
pub fn spectral_derivative<T: Scalar>(n: usize) -> DMatrix<T> {
    let nf = n as f64;
    DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            return T::zero();
        }
        let k = i as f64 - j as f64;
        let sign = if (i + j) % 2 == 0 { 1.0 } else { -1.0 };
        let angle = k * PI / nf;
        let v = if n % 2 == 0 {
            sign * (PI / nf) / angle.tan()
        } else {
            sign * (PI / nf) / angle.sin()
        };
        T::of(v)
    })
}

/// Builds `G_j = -(U_j D_x + V_j D_y)` for each of the six affine vector fields.
pub fn build_generators<T: Scalar>(side: usize) -> Result<GeneratorSet<T>> {
    if side == 0 {
        return Err(Error::InvalidArgument("patch side must be at least 1".into()));
    }
    let m = side * side;
    let d = spectral_derivative::<f64>(side);
    let center = (side as f64 - 1.0) / 2.0;

    let generators = Generator::ALL
        .iter()
        .map(|&g| {
            let mut out = DMatrix::<T>::zeros(m, m);
            for row in 0..side {
                for col in 0..side {
                    let p = row * side + col;
                    let (u, v) = g.vector_field(col as f64 - center, row as f64 - center);
                    // D_x differentiates along a row, D_y along a column.
                    for k in 0..side {
                        if u != 0.0 {
                            out[(p, row * side + k)] -= T::of(u * d[(col, k)]);
                        }
                        if v != 0.0 {
                            out[(p, k * side + col)] -= T::of(v * d[(row, k)]);
                        }
                    }
                }
            }
            out
        })
        .collect();

    Ok(GeneratorSet { side, generators })
}

fn checked_exp<T: Scalar>(a: &DMatrix<T>) -> Result<DMatrix<T>> {
    let e = a.clone().exp();
    let mut max_entry = 0.0f64;
    for v in e.iter() {
        let v = v.to_f64_lossy().abs();
        if !v.is_finite() {
            return Err(Error::ExpOverflow { max_entry: f64::INFINITY });
        }
        max_entry = max_entry.max(v);
    }
    if max_entry > EXP_OVERFLOW_LIMIT {
        return Err(Error::ExpOverflow { max_entry });
    }
    Ok(e)
}

/// `T(x) = exp(Σ_j x_j G_j)`.
pub fn transform_matrix<T: Scalar>(gens: &GeneratorSet<T>, x: &TransformParams<T>) -> Result<DMatrix<T>> {
    if !x.is_finite() {
        return Err(Error::InvalidArgument("non-finite transformation parameters".into()));
    }
    checked_exp(&gens.combination(x))
}

pub fn apply_transform<T: Scalar>(
    gens: &GeneratorSet<T>,
    x: &TransformParams<T>,
    image: &DVector<T>,
) -> Result<DVector<T>> {
    if image.len() != gens.pixels() {
        return Err(Error::DimensionMismatch(format!(
            "image has {} pixels, generators expect {}",
            image.len(),
            gens.pixels()
        )));
    }
    Ok(transform_matrix(gens, x)? * image)
}

/// Nodes and weights on `[0, 1]` for estimating `E_α[D(α)]`, `α ~ U(0, 1)`.
#[derive(Clone, Debug)]
pub struct QuadratureRule<T> {
    pub nodes: Vec<T>,
    pub weights: Vec<T>,
}

impl<T: Scalar> QuadratureRule<T> {
    /// Gauss–Legendre rule with `n` nodes mapped to `[0, 1]`.
    pub fn gauss_legendre(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument("quadrature needs at least one node".into()));
        }
        let mut nodes = vec![0.0f64; n];
        let mut weights = vec![0.0f64; n];
        let nf = n as f64;
        for i in 0..n.div_ceil(2) {
            let mut z = (PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
            let mut dp;
            loop {
                let (mut p1, mut p2) = (1.0f64, 0.0f64);
                for j in 1..=n {
                    let p3 = p2;
                    p2 = p1;
                    let jf = j as f64;
                    p1 = ((2.0 * jf - 1.0) * z * p2 - (jf - 1.0) * p3) / jf;
                }
                dp = nf * (z * p1 - p2) / (z * z - 1.0);
                let prev = z;
                z = prev - p1 / dp;
                if (z - prev).abs() < 1e-15 {
                    break;
                }
            }
            let w = 2.0 / ((1.0 - z * z) * dp * dp);
            nodes[i] = (1.0 - z) / 2.0;
            nodes[n - 1 - i] = (1.0 + z) / 2.0;
            weights[i] = w / 2.0;
            weights[n - 1 - i] = w / 2.0;
        }
        Ok(QuadratureRule {
            nodes: nodes.into_iter().map(T::of).collect(),
            weights: weights.into_iter().map(T::of).collect(),
        })
    }

    /// `samples` independent uniform draws, equally weighted.
    pub fn stochastic<R: Rng + ?Sized>(samples: usize, rng: &mut R) -> Result<Self> {
        if samples == 0 {
            return Err(Error::InvalidArgument("stochastic quadrature needs at least one sample".into()));
        }
        let w = T::of(1.0 / samples as f64);
        Ok(QuadratureRule {
            nodes: (0..samples).map(|_| T::of(rng.random::<f64>())).collect(),
            weights: vec![w; samples],
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }
}

/// How the `α` expectation in the matrix-exponential gradient is estimated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradientQuadrature {
    /// `S` uniform samples per evaluation.
    Stochastic(usize),
    /// Deterministic `S`-node Gauss–Legendre rule.
    FixedNodes(usize),
}

impl GradientQuadrature {
    pub fn rule<T: Scalar, R: Rng + ?Sized>(&self, rng: &mut R) -> Result<QuadratureRule<T>> {
        match *self {
            GradientQuadrature::Stochastic(s) => QuadratureRule::stochastic(s, rng),
            GradientQuadrature::FixedNodes(s) => QuadratureRule::gauss_legendre(s),
        }
    }

    pub fn samples(&self) -> usize {
        match *self {
            GradientQuadrature::Stochastic(s) | GradientQuadrature::FixedNodes(s) => s,
        }
    }
}

fn frobenius<T: Scalar>(a: &DMatrix<T>, b: &DMatrix<T>) -> T {
    a.iter().zip(b.iter()).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Gradient of `⟨C, T(x)⟩` with respect to `x`, where `C = ∂L/∂T`.
///
/// Uses `∂e^A/∂x_j = ∫₀¹ e^{αA} G_j e^{(1-α)A} dα`, so
/// `g_j = E_α ⟨e^{αA}ᵀ C e^{(1-α)A}ᵀ, G_j⟩`.
pub fn matexp_param_grad<T: Scalar>(
    gens: &GeneratorSet<T>,
    x: &TransformParams<T>,
    cotangent: &DMatrix<T>,
    rule: &QuadratureRule<T>,
) -> Result<[T; GROUP_DIM]> {
    let m = gens.pixels();
    if cotangent.shape() != (m, m) {
        return Err(Error::DimensionMismatch(format!(
            "cotangent is {:?}, expected {m}x{m}",
            cotangent.shape()
        )));
    }
    if rule.is_empty() {
        return Err(Error::InvalidArgument("empty quadrature rule".into()));
    }
    let a = gens.combination(x);
    let mut grad = [T::zero(); GROUP_DIM];
    for (&alpha, &w) in rule.nodes.iter().zip(rule.weights.iter()) {
        let left = checked_exp(&(&a * alpha))?;
        let right = checked_exp(&(&a * (T::one() - alpha)))?;
        let k = left.transpose() * cotangent * right.transpose();
        for (g, gen) in grad.iter_mut().zip(gens.matrices()) {
            *g += w * frobenius(&k, gen);
        }
    }
    Ok(grad)
}

/// [`matexp_param_grad`] for a rank-one cotangent `C = left · rightᵀ`.
///
/// This is the shape of the reconstruction-loss cotangent for a leaf
/// (`left` is a weighted residual, `right` the root feature) and avoids
/// forming any M×M product besides the exponentials.
pub fn matexp_param_grad_rank_one<T: Scalar>(
    gens: &GeneratorSet<T>,
    x: &TransformParams<T>,
    left: &DVector<T>,
    right: &DVector<T>,
    rule: &QuadratureRule<T>,
) -> Result<[T; GROUP_DIM]> {
    let m = gens.pixels();
    if left.len() != m || right.len() != m {
        return Err(Error::DimensionMismatch(format!(
            "rank-one cotangent factors have lengths {} and {}, expected {m}",
            left.len(),
            right.len()
        )));
    }
    if rule.is_empty() {
        return Err(Error::InvalidArgument("empty quadrature rule".into()));
    }
    let a = gens.combination(x);
    let mut grad = [T::zero(); GROUP_DIM];
    for (&alpha, &w) in rule.nodes.iter().zip(rule.weights.iter()) {
        let pre = checked_exp(&(&a * alpha))?.tr_mul(left);
        let post = checked_exp(&(&a * (T::one() - alpha)))? * right;
        for (g, gen) in grad.iter_mut().zip(gens.matrices()) {
            *g += w * pre.dot(&(gen * &post));
        }
    }
    Ok(grad)
}
