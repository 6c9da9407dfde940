//! Scalar and array primitives shared by all solvers: KL divergence, entropy,
//! Gibbs kernels, cost constructors, mass checks.
//!
//! All functions are pure and all types immutable.

use ndarray::{Array1, Array2};
use thiserror::Error;

use crate::Scalar;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum NumericsError {
    #[error("shape mismatch: {0} vs {1}")]
    ShapeMismatch(usize, usize),
    #[error("epsilon must be positive")]
    EpsilonNonPositive,
    #[error("negative entry at index {0}")]
    NegativeEntry(usize),
    #[error("non-finite entry at index {0}")]
    NonFiniteEntry(usize),
    #[error("matrix entries must be strictly positive (zero at {0})")]
    NonPositiveEntry(usize),
    #[error("mass mismatch: marginals {0} and {1} differ beyond tolerance")]
    MassMismatch(usize, usize),
    #[error("empty marginal list")]
    Empty,
}

/// A nonnegative mass vector over discrete states.
#[derive(Debug, Clone, PartialEq)]
pub struct Marginal<T: Scalar>(Array1<T>);

impl<T: Scalar> Marginal<T> {
    pub fn new(weights: Array1<T>) -> Result<Self, NumericsError> {
        for (i, &w) in weights.iter().enumerate() {
            if !w.is_finite() {
                return Err(NumericsError::NonFiniteEntry(i));
            }
            if w < T::zero() {
                return Err(NumericsError::NegativeEntry(i));
            }
        }
        Ok(Marginal(weights))
    }

    pub fn from_slice(weights: &[T]) -> Result<Self, NumericsError> {
        Self::new(Array1::from(weights.to_vec()))
    }

    pub fn uniform(n: usize) -> Self {
        let w = T::one() / T::from_usize(n).unwrap();
        Marginal(Array1::from_elem(n, w))
    }

    /// Point mass at 1-based state `state` out of `n`.
    pub fn point_mass(n: usize, state: usize) -> Self {
        let mut w = Array1::zeros(n);
        w[state - 1] = T::one();
        Marginal(w)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn weights(&self) -> &Array1<T> {
        &self.0
    }

    pub fn into_weights(self) -> Array1<T> {
        self.0
    }

    pub fn mass(&self) -> T {
        self.0.sum()
    }

    pub fn scaled(&self, factor: T) -> Self {
        Marginal(&self.0 * factor)
    }

    /// L1 distance to another mass vector of the same length.
    pub fn l1_distance(&self, other: &Array1<T>) -> T {
        self.0
            .iter()
            .zip(other.iter())
            .map(|(&a, &b)| (a - b).abs())
            .sum()
    }
}

/// A nonnegative, finite cost matrix on an edge; `cost(j2, j1)` is the
/// transpose of `cost(j1, j2)` by convention.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix<T: Scalar>(Array2<T>);

impl<T: Scalar> CostMatrix<T> {
    pub fn new(entries: Array2<T>) -> Result<Self, NumericsError> {
        for (i, &c) in entries.iter().enumerate() {
            if !c.is_finite() {
                return Err(NumericsError::NonFiniteEntry(i));
            }
            if c < T::zero() {
                return Err(NumericsError::NegativeEntry(i));
            }
        }
        Ok(CostMatrix(entries))
    }

    pub fn entries(&self) -> &Array2<T> {
        &self.0
    }

    pub fn transposed(&self) -> Self {
        CostMatrix(self.0.t().to_owned())
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.dim()
    }
}

/// A positive kernel on an edge, kept in both linear and log form.
///
/// The log form is the primary representation: `exp(-C/eps)` may round to
/// zero in the linear form for small `eps`, while `-C/eps` stays finite.
/// Structural zeros (from a transition matrix with zero entries) are `-inf`
/// in log form.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix<T: Scalar> {
    lin: Array2<T>,
    log: Array2<T>,
}

impl<T: Scalar> KernelMatrix<T> {
    /// Gibbs kernel `exp(-C/eps)` of a cost matrix.
    pub fn from_cost(cost: &CostMatrix<T>, epsilon: T) -> Result<Self, NumericsError> {
        if epsilon <= T::zero() || !epsilon.is_finite() {
            return Err(NumericsError::EpsilonNonPositive);
        }
        let log = cost.entries().mapv(|c| -c / epsilon);
        let lin = log.mapv(T::exp);
        Ok(KernelMatrix { lin, log })
    }

    /// Wraps a nonnegative matrix (e.g. a transition probability matrix)
    /// directly as a kernel. Zero entries become `-inf` in log form.
    pub fn from_nonnegative(entries: Array2<T>) -> Result<Self, NumericsError> {
        for (i, &k) in entries.iter().enumerate() {
            if !k.is_finite() {
                return Err(NumericsError::NonFiniteEntry(i));
            }
            if k < T::zero() {
                return Err(NumericsError::NegativeEntry(i));
            }
        }
        let log = entries.mapv(T::ln);
        Ok(KernelMatrix { lin: entries, log })
    }

    /// Wraps a strictly positive matrix; rejects zeros.
    pub fn from_positive(entries: Array2<T>) -> Result<Self, NumericsError> {
        for (i, &k) in entries.iter().enumerate() {
            if k <= T::zero() {
                return Err(NumericsError::NonPositiveEntry(i));
            }
        }
        Self::from_nonnegative(entries)
    }

    pub fn entries(&self) -> &Array2<T> {
        &self.lin
    }

    pub fn log_entries(&self) -> &Array2<T> {
        &self.log
    }

    pub fn shape(&self) -> (usize, usize) {
        self.lin.dim()
    }

    pub fn transposed(&self) -> Self {
        KernelMatrix {
            lin: self.lin.t().to_owned(),
            log: self.log.t().to_owned(),
        }
    }
}

/// Gibbs kernel `exp(-C/eps)`: elementwise, strictly positive in exact
/// arithmetic.
pub fn gibbs_kernel<T: Scalar>(
    cost: &CostMatrix<T>,
    epsilon: T,
) -> Result<KernelMatrix<T>, NumericsError> {
    KernelMatrix::from_cost(cost, epsilon)
}

/// Normalized KL divergence `sum(p log(p/q) - p + q)` with `0 log 0 = 0`.
///
/// Returns `+inf` when `p` puts mass where `q` has none; intermediate
/// objective logging may legitimately hit that on a first sweep, so it is a
/// sentinel rather than an error.
pub fn kl_divergence<T: Scalar>(p: &[T], q: &[T]) -> Result<T, NumericsError> {
    if p.len() != q.len() {
        return Err(NumericsError::ShapeMismatch(p.len(), q.len()));
    }
    let mut acc = T::zero();
    for (&pi, &qi) in p.iter().zip(q.iter()) {
        if pi == T::zero() {
            acc += qi;
        } else if qi == T::zero() {
            return Ok(T::infinity());
        } else {
            acc += pi * (pi / qi).ln() - pi + qi;
        }
    }
    Ok(acc)
}

/// `H(p) = H(p | 1) = sum(p log p - p + 1)`, the negative entropy of `p`
/// relative to the counting measure.
pub fn neg_entropy<T: Scalar>(p: &[T]) -> T {
    let mut acc = T::zero();
    for &pi in p {
        if pi == T::zero() {
            acc += T::one();
        } else {
            acc += pi * pi.ln() - pi + T::one();
        }
    }
    acc
}

/// Shannon entropy `-sum(p̂ log p̂)` of the unit-normalized distribution.
/// Larger means more smoothed out; zero for a point mass.
pub fn shannon_entropy<T: Scalar>(p: &[T]) -> T {
    let mass: T = p.iter().copied().sum();
    if mass <= T::zero() {
        return T::zero();
    }
    let mut acc = T::zero();
    for &pi in p {
        if pi > T::zero() {
            let r = pi / mass;
            acc -= r * r.ln();
        }
    }
    acc
}

/// Pairwise Euclidean distance matrix of a point list.
pub fn euclidean_cost<T: Scalar>(points: &[Vec<T>]) -> CostMatrix<T> {
    let n = points.len();
    let mut c = Array2::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let d = points[i]
                .iter()
                .zip(points[j].iter())
                .map(|(&a, &b)| (a - b) * (a - b))
                .sum::<T>()
                .sqrt();
            c[(i, j)] = d;
            c[(j, i)] = d;
        }
    }
    CostMatrix(c)
}

/// `n` evenly spaced points on `[0, 1]` as 1-d coordinates.
pub fn unit_grid<T: Scalar>(n: usize) -> Vec<Vec<T>> {
    if n == 1 {
        return vec![vec![T::zero()]];
    }
    let step = T::one() / T::from_usize(n - 1).unwrap();
    (0..n)
        .map(|i| vec![T::from_usize(i).unwrap() * step])
        .collect()
}

/// Checks all marginal masses agree within `rel_tol`, returning copies
/// normalized to unit mass plus the common mass for rescaling outputs.
pub fn check_mass_balance<T: Scalar>(
    marginals: &[Marginal<T>],
    rel_tol: T,
) -> Result<(Vec<Marginal<T>>, T), NumericsError> {
    if marginals.is_empty() {
        return Err(NumericsError::Empty);
    }
    let masses: Vec<T> = marginals.iter().map(|m| m.mass()).collect();
    let mean = masses.iter().copied().sum::<T>() / T::from_usize(masses.len()).unwrap();
    let mut worst = (0usize, 0usize, T::zero());
    for i in 0..masses.len() {
        for j in (i + 1)..masses.len() {
            let gap = (masses[i] - masses[j]).abs();
            if gap > worst.2 {
                worst = (i, j, gap);
            }
        }
    }
    if worst.2 > rel_tol * mean.max(T::one()) {
        return Err(NumericsError::MassMismatch(worst.0, worst.1));
    }
    let normalized = marginals
        .iter()
        .zip(masses.iter())
        .map(|(m, &mass)| Marginal(m.weights() / mass))
        .collect();
    Ok((normalized, mean))
}
