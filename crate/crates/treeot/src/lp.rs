//! A small dense two-phase simplex for equality-constrained LPs in standard
//! form: minimize `c'x` subject to `A x = b`, `x >= 0`.
//!
//! Used by the brute-force feasibility check and the earth-mover distance at
//! desk scale; Bland's rule keeps it cycle-free on degenerate vertices.

use ndarray::{Array1, Array2};
use thiserror::Error;

use crate::Scalar;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LpError {
    #[error("dimension mismatch between A, b, c")]
    DimensionMismatch,
    #[error("problem exceeds the size cap")]
    TooLarge,
    #[error("objective is unbounded below")]
    Unbounded,
    #[error("marginal masses differ; no transport plan exists")]
    MassMismatch,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LpOutcome<T: Scalar> {
    Optimal { x: Array1<T>, value: T },
    Infeasible,
}

const MAX_CELLS: usize = 8_000_000;

/// Dense tableau: `m` constraint rows plus one objective row (index `m`);
/// columns are the `n` structural variables, `m` artificials, and the rhs.
struct Tableau<T: Scalar> {
    t: Array2<T>,
    basis: Vec<usize>,
    m: usize,
    n: usize,
}

impl<T: Scalar> Tableau<T> {
    fn obj(&self) -> usize {
        self.m
    }

    fn rhs(&self) -> usize {
        self.n + self.m
    }

    fn pivot(&mut self, row: usize, col: usize) {
        let rhs = self.rhs();
        let piv = self.t[(row, col)];
        for c in 0..=rhs {
            self.t[(row, c)] = self.t[(row, c)] / piv;
        }
        for r in 0..=self.m {
            if r == row {
                continue;
            }
            let f = self.t[(r, col)];
            if f != T::zero() {
                for c in 0..=rhs {
                    let delta = f * self.t[(row, c)];
                    self.t[(r, c)] = self.t[(r, c)] - delta;
                }
            }
        }
        self.basis[row] = col;
    }

    /// Simplex iterations minimizing the objective row, with entering
    /// columns restricted to `0..allowed`. Bland's rule throughout.
    fn optimize(&mut self, allowed: usize, tol: T) -> Result<(), LpError> {
        let obj = self.obj();
        let rhs = self.rhs();
        loop {
            let mut enter = None;
            for c in 0..allowed {
                if self.t[(obj, c)] < -tol {
                    enter = Some(c);
                    break;
                }
            }
            let Some(col) = enter else { return Ok(()) };
            let mut leave: Option<(usize, T)> = None;
            for r in 0..self.m {
                let a = self.t[(r, col)];
                if a > tol {
                    let ratio = self.t[(r, rhs)] / a;
                    let better = match leave {
                        None => true,
                        Some((lr, lratio)) => {
                            ratio < lratio - tol
                                || (ratio <= lratio + tol && self.basis[r] < self.basis[lr])
                        }
                    };
                    if better {
                        leave = Some((r, ratio));
                    }
                }
            }
            let Some((row, _)) = leave else {
                return Err(LpError::Unbounded);
            };
            self.pivot(row, col);
        }
    }
}

/// Minimizes `c'x` subject to `A x = b`, `x >= 0`.
pub fn solve_standard_form<T: Scalar>(
    a: &Array2<T>,
    b: &Array1<T>,
    c: &Array1<T>,
    tol: T,
) -> Result<LpOutcome<T>, LpError> {
    let (m, n) = a.dim();
    if b.len() != m || c.len() != n {
        return Err(LpError::DimensionMismatch);
    }
    if (m + 2) * (n + m + 2) > MAX_CELLS {
        return Err(LpError::TooLarge);
    }

    let mut t: Array2<T> = Array2::zeros((m + 1, n + m + 1));
    for r in 0..m {
        let flip = b[r] < T::zero();
        for j in 0..n {
            t[(r, j)] = if flip { -a[(r, j)] } else { a[(r, j)] };
        }
        t[(r, n + r)] = T::one();
        t[(r, n + m)] = b[r].abs();
    }
    // Phase-1 objective: sum of artificials, with basic columns eliminated.
    for r in 0..m {
        for j in 0..=(n + m) {
            let delta = t[(r, j)];
            t[(m, j)] = t[(m, j)] - delta;
        }
    }
    for r in 0..m {
        t[(m, n + r)] = T::zero();
    }

    let mut tab = Tableau {
        t,
        basis: (n..n + m).collect(),
        m,
        n,
    };
    tab.optimize(n, tol)?;
    let phase1 = -tab.t[(m, n + m)];
    if phase1 > tol {
        return Ok(LpOutcome::Infeasible);
    }

    // Drive artificials out of the basis where a nonzero structural pivot
    // exists; rows where none exists are redundant and harmlessly keep a
    // zero-valued artificial basic (excluded from entering in phase 2).
    for r in 0..m {
        if tab.basis[r] >= n {
            if let Some(col) = (0..n).find(|&j| tab.t[(r, j)].abs() > tol) {
                tab.pivot(r, col);
            }
        }
    }

    // Phase 2: rebuild the objective row from c and eliminate basics.
    for j in 0..=(n + m) {
        tab.t[(m, j)] = T::zero();
    }
    for j in 0..n {
        tab.t[(m, j)] = c[j];
    }
    for r in 0..m {
        let bcol = tab.basis[r];
        if bcol < n {
            let f = tab.t[(m, bcol)];
            if f != T::zero() {
                for j in 0..=(n + m) {
                    let delta = f * tab.t[(r, j)];
                    tab.t[(m, j)] = tab.t[(m, j)] - delta;
                }
            }
        }
    }
    tab.optimize(n, tol)?;

    let mut x: Array1<T> = Array1::zeros(n);
    for r in 0..m {
        if tab.basis[r] < n {
            x[tab.basis[r]] = tab.t[(r, n + m)];
        }
    }
    let value = x.iter().zip(c.iter()).map(|(&xi, &ci)| xi * ci).sum::<T>();
    Ok(LpOutcome::Optimal { x, value })
}

/// True iff `A x = b`, `x >= 0` admits a solution.
pub fn is_feasible<T: Scalar>(a: &Array2<T>, b: &Array1<T>, tol: T) -> Result<bool, LpError> {
    let c = Array1::zeros(a.ncols());
    match solve_standard_form(a, b, &c, tol)? {
        LpOutcome::Optimal { .. } => Ok(true),
        LpOutcome::Infeasible => Ok(false),
    }
}

/// Exact earth-mover (unregularized transport) cost between two mass vectors
/// under a ground cost matrix. The marginals must carry equal mass.
pub fn earth_mover_distance<T: Scalar>(
    mu: &Array1<T>,
    nu: &Array1<T>,
    cost: &Array2<T>,
    tol: T,
) -> Result<T, LpError> {
    let n = mu.len();
    let m = nu.len();
    if cost.dim() != (n, m) {
        return Err(LpError::DimensionMismatch);
    }
    if (mu.sum() - nu.sum()).abs() > tol * mu.sum().max(T::one()) {
        return Err(LpError::MassMismatch);
    }
    // Transportation polytope: row sums = mu, column sums = nu. The last
    // column constraint is redundant and dropped to keep the system full rank.
    let rows = n + m - 1;
    let mut a = Array2::zeros((rows, n * m));
    let mut b = Array1::zeros(rows);
    for i in 0..n {
        for j in 0..m {
            a[(i, i * m + j)] = T::one();
        }
        b[i] = mu[i];
    }
    for j in 0..m - 1 {
        for i in 0..n {
            a[(n + j, i * m + j)] = T::one();
        }
        b[n + j] = nu[j];
    }
    let c = Array1::from_iter(cost.iter().copied());
    match solve_standard_form(&a, &b, &c, tol)? {
        LpOutcome::Optimal { value, .. } => Ok(value),
        LpOutcome::Infeasible => Ok(T::nan()),
    }
}
