//! Brute-force reference implementation over explicit dense tensors.
//!
//! Everything here sums over tensor entries directly — no message passing —
//! so it is exponential in the number of marginals and capped at desk scale.
//! It exists as the ground truth the structured code is tested against.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use thiserror::Error;

use crate::graph::Tree;
use crate::lp;
use crate::numerics::{check_mass_balance, neg_entropy, CostMatrix, Marginal, NumericsError};
use crate::Scalar;

/// Hard cap on tensor entries (and LP size) for all oracle operations.
pub const ENTRY_CAP: usize = 1_000_000;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("tensor would have {0} entries, above the {ENTRY_CAP} cap")]
    TooLarge(usize),
    #[error("mode {0} out of range 1..={1}")]
    ModeOutOfRange(usize, usize),
    #[error("projection modes must be distinct")]
    EqualModes,
    #[error("no cost matrix supplied for edge ({0}, {1})")]
    MissingEdgeCost(usize, usize),
    #[error("cost matrix shapes disagree at node {0}")]
    InconsistentSizes(usize),
    #[error("shape mismatch between tensors")]
    ShapeMismatch,
    #[error("sinkhorn did not converge in {sweeps} sweeps (residual {residual})")]
    MaxSweepsExceeded { sweeps: usize, residual: f64 },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Lp(#[from] lp::LpError),
}

/// An explicit dense tensor in row-major order. Mode sizes may differ.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor<T: Scalar> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> DenseTensor<T> {
    pub fn zeros(shape: Vec<usize>) -> Result<Self, OracleError> {
        let len: usize = shape.iter().product();
        if len > ENTRY_CAP {
            return Err(OracleError::TooLarge(len));
        }
        Ok(DenseTensor {
            data: vec![T::zero(); len],
            shape,
        })
    }

    pub fn from_data(shape: Vec<usize>, data: Vec<T>) -> Result<Self, OracleError> {
        let len: usize = shape.iter().product();
        if len > ENTRY_CAP {
            return Err(OracleError::TooLarge(len));
        }
        if data.len() != len {
            return Err(OracleError::ShapeMismatch);
        }
        Ok(DenseTensor { shape, data })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn modes(&self) -> usize {
        self.shape.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn total_mass(&self) -> T {
        self.data.iter().copied().sum()
    }

    /// Decodes flat index `flat` into the multi-index `idx`.
    fn unravel(&self, mut flat: usize, idx: &mut [usize]) {
        for m in (0..self.shape.len()).rev() {
            idx[m] = flat % self.shape[m];
            flat /= self.shape[m];
        }
    }

    pub fn map<F: Fn(T) -> T>(&self, f: F) -> Self {
        DenseTensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise product.
    pub fn hadamard(&self, other: &Self) -> Result<Self, OracleError> {
        if self.shape != other.shape {
            return Err(OracleError::ShapeMismatch);
        }
        Ok(DenseTensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| a * b)
                .collect(),
        })
    }

    /// Scales mode `j` (1-based) by vector `v`: entry *= v[i_j].
    pub fn scale_mode(&mut self, j: usize, v: &Array1<T>) -> Result<(), OracleError> {
        if j == 0 || j > self.modes() {
            return Err(OracleError::ModeOutOfRange(j, self.modes()));
        }
        if v.len() != self.shape[j - 1] {
            return Err(OracleError::ShapeMismatch);
        }
        let mut idx = vec![0usize; self.modes()];
        for flat in 0..self.data.len() {
            self.unravel(flat, &mut idx);
            self.data[flat] *= v[idx[j - 1]];
        }
        Ok(())
    }

    /// Projection onto a subset of modes (1-based, distinct), producing a
    /// tensor whose modes follow the order given in `modes`.
    pub fn project_subset(&self, modes: &[usize]) -> Result<DenseTensor<T>, OracleError> {
        for &m in modes {
            if m == 0 || m > self.modes() {
                return Err(OracleError::ModeOutOfRange(m, self.modes()));
            }
        }
        for (a, &m) in modes.iter().enumerate() {
            if modes[..a].contains(&m) {
                return Err(OracleError::EqualModes);
            }
        }
        let out_shape: Vec<usize> = modes.iter().map(|&m| self.shape[m - 1]).collect();
        let mut out = DenseTensor::zeros(out_shape)?;
        let mut idx = vec![0usize; self.modes()];
        for flat in 0..self.data.len() {
            self.unravel(flat, &mut idx);
            let mut out_flat = 0usize;
            for &m in modes {
                out_flat = out_flat * self.shape[m - 1] + idx[m - 1];
            }
            out.data[out_flat] += self.data[flat];
        }
        Ok(out)
    }

    /// Marginal projection onto mode `j`.
    pub fn project(&self, j: usize) -> Result<Marginal<T>, OracleError> {
        let t = self.project_subset(&[j])?;
        Ok(Marginal::new(Array1::from(t.data)).expect("projection of nonnegative tensor"))
    }

    /// Pairwise projection onto modes `(j1, j2)` as a matrix.
    pub fn project_pair(&self, j1: usize, j2: usize) -> Result<Array2<T>, OracleError> {
        let t = self.project_subset(&[j1, j2])?;
        let (n1, n2) = (t.shape[0], t.shape[1]);
        Ok(Array2::from_shape_vec((n1, n2), t.data).expect("shape"))
    }

}

/// Inner product of two tensors of identical shape.
pub fn inner_product<T: Scalar>(
    a: &DenseTensor<T>,
    b: &DenseTensor<T>,
) -> Result<T, OracleError> {
    if a.shape != b.shape {
        return Err(OracleError::ShapeMismatch);
    }
    Ok(a.data
        .iter()
        .zip(b.data.iter())
        .map(|(&x, &y)| x * y)
        .sum())
}

/// Assembles the cost tensor whose entry at a multi-index is the sum of the
/// per-edge cost matrices evaluated at the corresponding index pair.
pub fn assemble_cost_tensor<T: Scalar>(
    tree: &Tree,
    edge_costs: &BTreeMap<(usize, usize), CostMatrix<T>>,
) -> Result<DenseTensor<T>, OracleError> {
    let j_count = tree.node_count();
    // Derive per-node sizes from the matrices; check consistency.
    let mut sizes = vec![0usize; j_count];
    for &(a, b) in tree.edges() {
        let c = edge_costs
            .get(&(a, b))
            .ok_or(OracleError::MissingEdgeCost(a, b))?;
        let (ra, rb) = c.shape();
        for (node, dim) in [(a, ra), (b, rb)] {
            if sizes[node - 1] == 0 {
                sizes[node - 1] = dim;
            } else if sizes[node - 1] != dim {
                return Err(OracleError::InconsistentSizes(node));
            }
        }
    }
    // A single-node tree has no edges; give it one state by convention.
    for s in &mut sizes {
        if *s == 0 {
            *s = 1;
        }
    }
    let mut out = DenseTensor::zeros(sizes)?;
    let mut idx = vec![0usize; j_count];
    for flat in 0..out.data.len() {
        out.unravel(flat, &mut idx);
        let mut acc = T::zero();
        for &(a, b) in tree.edges() {
            acc += edge_costs[&(a, b)].entries()[(idx[a - 1], idx[b - 1])];
        }
        out.data[flat] = acc;
    }
    Ok(out)
}

/// The full instance for the dense solver: cost tensor, regularization, and
/// the constrained marginals.
#[derive(Debug, Clone)]
pub struct TensorProblem<T: Scalar> {
    pub cost: DenseTensor<T>,
    pub epsilon: T,
    pub constraints: BTreeMap<usize, Marginal<T>>,
}

/// Result of a dense Sinkhorn solve.
#[derive(Debug, Clone)]
pub struct DenseSolve<T: Scalar> {
    /// The optimal transport tensor, scaled to the constraints' common mass.
    pub plan: DenseTensor<T>,
    /// Scaling vectors per constrained mode (unit-mass convention).
    pub scalings: BTreeMap<usize, Array1<T>>,
    pub sweeps: usize,
    pub residual: T,
    /// Dual objective value per sweep (unit-mass convention).
    pub dual_history: Vec<T>,
}

/// Full-tensor Sinkhorn: repeatedly rescales each constrained mode until all
/// projections match. Ground truth for the message-passing solver.
pub fn dense_sinkhorn<T: Scalar>(
    problem: &TensorProblem<T>,
    tol: T,
    max_sweeps: usize,
) -> Result<DenseSolve<T>, OracleError> {
    let kernel = problem.cost.map(|c| (-c / problem.epsilon).exp());
    let modes: Vec<usize> = problem.constraints.keys().copied().collect();
    let marginals: Vec<Marginal<T>> = problem.constraints.values().cloned().collect();
    let (normalized, mass) = check_mass_balance(&marginals, T::of(1e-9))?;
    let targets: BTreeMap<usize, Marginal<T>> =
        modes.iter().copied().zip(normalized).collect();

    let mut scalings: BTreeMap<usize, Array1<T>> = modes
        .iter()
        .map(|&j| (j, Array1::ones(problem.cost.shape()[j - 1])))
        .collect();

    let scaled = |scalings: &BTreeMap<usize, Array1<T>>| -> DenseTensor<T> {
        let mut m = kernel.clone();
        for (&j, u) in scalings {
            m.scale_mode(j, u).expect("validated shapes");
        }
        m
    };

    let mut dual_history = Vec::new();
    let mut residual = T::infinity();
    for sweep in 1..=max_sweeps {
        for &j in &modes {
            let m = scaled(&scalings);
            let proj = m.project(j)?;
            let u = scalings.get_mut(&j).unwrap();
            for i in 0..u.len() {
                let target = targets[&j].weights()[i];
                if target == T::zero() {
                    u[i] = T::zero();
                } else {
                    u[i] = u[i] * target / proj.weights()[i];
                }
            }
        }
        let m = scaled(&scalings);
        residual = modes
            .iter()
            .map(|&j| targets[&j].l1_distance(m.project(j).unwrap().weights()))
            .fold(T::zero(), T::max);
        // Dual value: -eps <K, U> + sum lambda_j' mu_j with lambda = eps log u.
        let mut dual = -problem.epsilon * m.total_mass();
        for &j in &modes {
            for (ui, &ti) in scalings[&j].iter().zip(targets[&j].weights().iter()) {
                if ti > T::zero() {
                    dual += problem.epsilon * ui.ln() * ti;
                }
            }
        }
        dual_history.push(dual);
        if residual <= tol {
            let mut plan = m;
            for v in &mut plan.data {
                *v = *v * mass;
            }
            return Ok(DenseSolve {
                plan,
                scalings,
                sweeps: sweep,
                residual,
                dual_history,
            });
        }
    }
    Err(OracleError::MaxSweepsExceeded {
        sweeps: max_sweeps,
        residual: residual.to_f64().unwrap_or(f64::NAN),
    })
}

/// `<C, M> + eps * H(M)` evaluated directly on the flattened tensors.
pub fn dense_objective<T: Scalar>(
    plan: &DenseTensor<T>,
    cost: &DenseTensor<T>,
    epsilon: T,
) -> Result<T, OracleError> {
    if plan.shape != cost.shape {
        return Err(OracleError::ShapeMismatch);
    }
    Ok(inner_product(plan, cost)? + epsilon * neg_entropy(plan.data()))
}

/// Decides by linear programming whether a nonnegative tensor exists whose
/// pairwise projections on the given graph edges equal the given matrices.
///
/// `sizes[j-1]` is the state count of node `j`; edges may form any graph
/// (cycles allowed — that is the point of the counterexample).
pub fn feasibility_check<T: Scalar>(
    sizes: &[usize],
    pair_marginals: &[((usize, usize), Array2<T>)],
) -> Result<bool, OracleError> {
    let entries: usize = sizes.iter().product();
    if entries > ENTRY_CAP {
        return Err(OracleError::TooLarge(entries));
    }
    let j_count = sizes.len();
    for &((a, b), _) in pair_marginals {
        for node in [a, b] {
            if node == 0 || node > j_count {
                return Err(OracleError::ModeOutOfRange(node, j_count));
            }
        }
        if a == b {
            return Err(OracleError::EqualModes);
        }
    }
    let rows: usize = pair_marginals
        .iter()
        .map(|((a, b), _)| sizes[a - 1] * sizes[b - 1])
        .sum();
    let mut a_mat: Array2<T> = Array2::zeros((rows, entries));
    let mut b_vec: Array1<T> = Array1::zeros(rows);
    let mut idx = vec![0usize; j_count];
    let probe = DenseTensor::<T>::zeros(sizes.to_vec())?;
    let mut row0 = 0usize;
    for &((ja, jb), ref p) in pair_marginals {
        if p.dim() != (sizes[ja - 1], sizes[jb - 1]) {
            return Err(OracleError::ShapeMismatch);
        }
        for flat in 0..entries {
            probe.unravel(flat, &mut idx);
            let r = row0 + idx[ja - 1] * sizes[jb - 1] + idx[jb - 1];
            a_mat[(r, flat)] = T::one();
        }
        for ia in 0..sizes[ja - 1] {
            for ib in 0..sizes[jb - 1] {
                b_vec[row0 + ia * sizes[jb - 1] + ib] = p[(ia, ib)];
            }
        }
        row0 += sizes[ja - 1] * sizes[jb - 1];
    }
    Ok(lp::is_feasible(&a_mat, &b_vec, T::of(1e-9))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn ones(shape: Vec<usize>) -> DenseTensor<f64> {
        let len = shape.iter().product();
        DenseTensor::from_data(shape, vec![1.0; len]).unwrap()
    }

    #[test]
    fn cost_tensor_two_nodes_is_the_matrix() {
        let tree = Tree::new(2, &[(1, 2)]).unwrap();
        let c = CostMatrix::new(array![[0.0, 1.0], [1.0, 0.0]]).unwrap();
        let mut costs = BTreeMap::new();
        costs.insert((1, 2), c);
        let t = assemble_cost_tensor(&tree, &costs).unwrap();
        assert_eq!(t.shape(), &[2, 2]);
        assert_eq!(t.data(), &[0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn cost_tensor_path_zero_costs() {
        let tree = Tree::new(3, &[(1, 2), (2, 3)]).unwrap();
        let zero = CostMatrix::<f64>::new(Array2::zeros((2, 2))).unwrap();
        let mut costs = BTreeMap::new();
        costs.insert((1, 2), zero.clone());
        costs.insert((2, 3), zero);
        let t = assemble_cost_tensor(&tree, &costs).unwrap();
        assert_eq!(t.shape(), &[2, 2, 2]);
        assert!(t.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cost_tensor_missing_edge() {
        let tree = Tree::new(2, &[(1, 2)]).unwrap();
        let costs: BTreeMap<(usize, usize), CostMatrix<f64>> = BTreeMap::new();
        assert!(matches!(
            assemble_cost_tensor(&tree, &costs),
            Err(OracleError::MissingEdgeCost(1, 2))
        ));
    }

    #[test]
    fn project_counts() {
        let t = ones(vec![2, 2, 2]);
        assert_eq!(t.project(1).unwrap().weights(), &array![4.0, 4.0]);
        let p = t.project_pair(1, 3).unwrap();
        assert_eq!(p, array![[2.0, 2.0], [2.0, 2.0]]);
    }

    #[test]
    fn project_rank_one() {
        // u ⊗ v: projecting on mode 2 gives (sum u) * v.
        let u = [2.0, 3.0];
        let v = [0.5, 1.5, 1.0];
        let data: Vec<f64> = u.iter().flat_map(|&a| v.iter().map(move |&b| a * b)).collect();
        let t = DenseTensor::from_data(vec![2, 3], data).unwrap();
        let p = t.project(2).unwrap();
        for (got, want) in p.weights().iter().zip(v.iter().map(|&b| 5.0 * b)) {
            assert_abs_diff_eq!(got, &want, epsilon = 1e-14);
        }
    }

    #[test]
    fn projection_matches_independent_loop_order() {
        // Sum over the other modes with explicit nested loops in a different
        // order than project() uses.
        let shape = vec![3, 3, 3];
        let data: Vec<f64> = (0..27).map(|i| ((i * 7 + 3) % 11) as f64).collect();
        let t = DenseTensor::from_data(shape, data.clone()).unwrap();
        let p = t.project(2).unwrap();
        let mut manual = [0.0; 3];
        for i3 in 0..3 {
            for i1 in 0..3 {
                for i2 in 0..3 {
                    manual[i2] += data[i1 * 9 + i2 * 3 + i3];
                }
            }
        }
        for (a, b) in p.weights().iter().zip(manual.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
    }

    #[test]
    fn pair_projection_consistent_with_marginals() {
        let data: Vec<f64> = (0..8).map(|i| (i + 1) as f64).collect();
        let t = DenseTensor::from_data(vec![2, 2, 2], data).unwrap();
        let p12 = t.project_pair(1, 2).unwrap();
        let p1 = t.project(1).unwrap();
        let p2 = t.project(2).unwrap();
        for i in 0..2 {
            assert_abs_diff_eq!(p12.row(i).sum(), p1.weights()[i], epsilon = 1e-12);
            assert_abs_diff_eq!(p12.column(i).sum(), p2.weights()[i], epsilon = 1e-12);
        }
        // J = 2 tensor: the pair projection is the tensor itself.
        let m = DenseTensor::from_data(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(m.project_pair(1, 2).unwrap(), array![[1.0, 2.0], [3.0, 4.0]]);
    }

    #[test]
    fn projections_commute_with_mode_permutation() {
        let data: Vec<f64> = (0..8).map(|i| ((i * 5 + 2) % 7) as f64 + 0.5).collect();
        let t = DenseTensor::from_data(vec![2, 2, 2], data.clone()).unwrap();
        // Permuted tensor: swap modes 1 and 3.
        let mut permuted = vec![0.0; 8];
        for i1 in 0..2 {
            for i2 in 0..2 {
                for i3 in 0..2 {
                    permuted[i3 * 4 + i2 * 2 + i1] = data[i1 * 4 + i2 * 2 + i3];
                }
            }
        }
        let tp = DenseTensor::from_data(vec![2, 2, 2], permuted).unwrap();
        assert_eq!(t.project(1).unwrap(), tp.project(3).unwrap());
        assert_eq!(t.project_pair(1, 2).unwrap(), tp.project_pair(3, 2).unwrap());
    }

    #[test]
    fn dense_sinkhorn_zero_cost_gives_product_coupling() {
        let tree = Tree::new(2, &[(1, 2)]).unwrap();
        let zero = CostMatrix::new(Array2::zeros((2, 2))).unwrap();
        let mut costs = BTreeMap::new();
        costs.insert((1, 2), zero);
        let cost = assemble_cost_tensor(&tree, &costs).unwrap();
        let mut constraints = BTreeMap::new();
        constraints.insert(1, Marginal::from_slice(&[0.5, 0.5]).unwrap());
        constraints.insert(2, Marginal::from_slice(&[0.5, 0.5]).unwrap());
        let problem = TensorProblem { cost: cost.clone(), epsilon: 1.0, constraints };
        let sol = dense_sinkhorn(&problem, 1e-12, 1000).unwrap();
        for &v in sol.plan.data() {
            assert_abs_diff_eq!(v, 0.25, epsilon = 1e-10);
        }
        // Objective of the product coupling at zero cost is eps * H(plan).
        let obj = dense_objective(&sol.plan, &cost, 1.0).unwrap();
        assert_abs_diff_eq!(obj, neg_entropy(sol.plan.data()), epsilon = 1e-12);
    }

    #[test]
    fn dense_sinkhorn_symmetric_closed_form() {
        // C = [[0,1],[1,0]], eps = 1, uniform marginals: the symmetric
        // scaling gives a = e/(2(1+e)) on the diagonal, b = 1/(2(1+e)) off.
        let tree = Tree::new(2, &[(1, 2)]).unwrap();
        let c = CostMatrix::new(array![[0.0, 1.0], [1.0, 0.0]]).unwrap();
        let mut costs = BTreeMap::new();
        costs.insert((1, 2), c);
        let cost = assemble_cost_tensor(&tree, &costs).unwrap();
        let mut constraints = BTreeMap::new();
        constraints.insert(1, Marginal::from_slice(&[0.5, 0.5]).unwrap());
        constraints.insert(2, Marginal::from_slice(&[0.5, 0.5]).unwrap());
        let problem = TensorProblem { cost, epsilon: 1.0, constraints };
        let sol = dense_sinkhorn(&problem, 1e-13, 2000).unwrap();
        let e = std::f64::consts::E;
        let a = e / (2.0 * (1.0 + e));
        let b = 1.0 / (2.0 * (1.0 + e));
        assert_abs_diff_eq!(sol.plan.data()[0], a, epsilon = 1e-10);
        assert_abs_diff_eq!(sol.plan.data()[1], b, epsilon = 1e-10);
        assert_abs_diff_eq!(sol.plan.data()[2], b, epsilon = 1e-10);
        assert_abs_diff_eq!(sol.plan.data()[3], a, epsilon = 1e-10);
        assert_abs_diff_eq!(sol.plan.data()[0] / sol.plan.data()[1], e, epsilon = 1e-8);
    }

    #[test]
    fn dense_sinkhorn_unconstrained_middle_preserves_mass() {
        let tree = Tree::new(3, &[(1, 2), (2, 3)]).unwrap();
        let c = CostMatrix::new(array![[0.1, 0.9], [0.4, 0.2]]).unwrap();
        let mut costs = BTreeMap::new();
        costs.insert((1, 2), c.clone());
        costs.insert((2, 3), c);
        let cost = assemble_cost_tensor(&tree, &costs).unwrap();
        let mut constraints = BTreeMap::new();
        constraints.insert(1, Marginal::from_slice(&[0.3, 0.7]).unwrap());
        constraints.insert(3, Marginal::from_slice(&[0.6, 0.4]).unwrap());
        let problem = TensorProblem { cost, epsilon: 0.5, constraints };
        let sol = dense_sinkhorn(&problem, 1e-12, 2000).unwrap();
        let mid = sol.plan.project(2).unwrap();
        assert!(mid.weights().iter().all(|&v| v >= 0.0));
        assert_abs_diff_eq!(mid.mass(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn dense_sinkhorn_dual_is_nondecreasing() {
        let tree = Tree::new(3, &[(1, 2), (2, 3)]).unwrap();
        let c1 = CostMatrix::new(array![[0.3, 1.2], [0.8, 0.1]]).unwrap();
        let c2 = CostMatrix::new(array![[0.9, 0.2], [0.5, 1.1]]).unwrap();
        let mut costs = BTreeMap::new();
        costs.insert((1, 2), c1);
        costs.insert((2, 3), c2);
        let cost = assemble_cost_tensor(&tree, &costs).unwrap();
        let mut constraints = BTreeMap::new();
        constraints.insert(1, Marginal::from_slice(&[0.2, 0.8]).unwrap());
        constraints.insert(3, Marginal::from_slice(&[0.5, 0.5]).unwrap());
        let problem = TensorProblem { cost, epsilon: 0.7, constraints };
        let sol = dense_sinkhorn(&problem, 1e-12, 2000).unwrap();
        for w in sol.dual_history.windows(2) {
            assert!(w[1] >= w[0] - 1e-12);
        }
    }

    #[test]
    fn dense_sinkhorn_fixed_point_is_stable() {
        let tree = Tree::new(2, &[(1, 2)]).unwrap();
        let c = CostMatrix::new(array![[0.0, 1.0], [1.0, 0.0]]).unwrap();
        let mut costs = BTreeMap::new();
        costs.insert((1, 2), c);
        let cost = assemble_cost_tensor(&tree, &costs).unwrap();
        let mut constraints = BTreeMap::new();
        constraints.insert(1, Marginal::from_slice(&[0.25, 0.75]).unwrap());
        constraints.insert(2, Marginal::from_slice(&[0.5, 0.5]).unwrap());
        let problem = TensorProblem { cost, epsilon: 1.0, constraints };
        let tol = 1e-12;
        let sol = dense_sinkhorn(&problem, tol, 2000).unwrap();
        // Applying one more round of scaling updates by hand moves each
        // scaling by less than tol in the max norm, up to a global factor.
        let kernel = problem.cost.map(|c: f64| (-c / problem.epsilon).exp());
        let mut scalings = sol.scalings.clone();
        let targets: BTreeMap<usize, Marginal<f64>> = problem
            .constraints
            .iter()
            .map(|(&j, m)| (j, m.scaled(1.0 / m.mass())))
            .collect();
        for (&j, u) in scalings.iter_mut() {
            let mut m = kernel.clone();
            for (&jj, uu) in &sol.scalings {
                m.scale_mode(jj, uu).unwrap();
            }
            let proj = m.project(j).unwrap();
            for i in 0..u.len() {
                u[i] = u[i] * targets[&j].weights()[i] / proj.weights()[i];
            }
        }
        for (&j, u) in &sol.scalings {
            let v = &scalings[&j];
            let ratio = u[0] / v[0];
            for (a, b) in u.iter().zip(v.iter()) {
                assert!((a - b * ratio).abs() < tol * 100.0);
            }
        }
    }

    #[test]
    fn dense_objective_single_entry() {
        let m = DenseTensor::from_data(vec![1], vec![2.0]).unwrap();
        let c = DenseTensor::from_data(vec![1], vec![2.0]).unwrap();
        let obj = dense_objective(&m, &c, 1.0).unwrap();
        assert_abs_diff_eq!(obj, 4.0 + 2.0 * 2.0f64.ln() - 1.0, epsilon = 1e-14);
        let all_ones = ones(vec![2, 2]);
        let zero = DenseTensor::zeros(vec![2, 2]).unwrap();
        assert_abs_diff_eq!(dense_objective(&all_ones, &zero, 1.0).unwrap(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn counterexample_projections_are_infeasible() {
        // Identity pair plans on (1,2) and (2,3), anti-identity on (1,3):
        // i1 = i2, i2 = i3, i1 != i3 cannot hold at once.
        let eye = array![[1.0, 0.0], [0.0, 1.0]];
        let anti = array![[0.0, 1.0], [1.0, 0.0]];
        let feasible = feasibility_check(
            &[2, 2, 2],
            &[((1, 2), eye.clone()), ((2, 3), eye), ((1, 3), anti)],
        )
        .unwrap();
        assert!(!feasible);
    }

    #[test]
    fn product_projections_are_feasible() {
        let quarter = array![[0.25, 0.25], [0.25, 0.25]];
        let feasible = feasibility_check(
            &[2, 2, 2],
            &[
                ((1, 2), quarter.clone()),
                ((2, 3), quarter.clone()),
                ((1, 3), quarter),
            ],
        )
        .unwrap();
        assert!(feasible);
    }

    #[test]
    fn tree_consistent_projections_are_feasible() {
        let tree = Tree::new(3, &[(1, 2), (2, 3)]).unwrap();
        let c = CostMatrix::new(array![[0.0, 0.8], [0.3, 0.4]]).unwrap();
        let mut costs = BTreeMap::new();
        costs.insert((1, 2), c.clone());
        costs.insert((2, 3), c);
        let cost = assemble_cost_tensor(&tree, &costs).unwrap();
        let mut constraints = BTreeMap::new();
        constraints.insert(1, Marginal::from_slice(&[0.4, 0.6]).unwrap());
        constraints.insert(3, Marginal::from_slice(&[0.5, 0.5]).unwrap());
        let problem = TensorProblem { cost, epsilon: 1.0, constraints };
        let sol = dense_sinkhorn(&problem, 1e-11, 2000).unwrap();
        let feasible = feasibility_check(
            &[2, 2, 2],
            &[
                ((1, 2), sol.plan.project_pair(1, 2).unwrap()),
                ((2, 3), sol.plan.project_pair(2, 3).unwrap()),
            ],
        )
        .unwrap();
        assert!(feasible);
    }

    #[test]
    fn size_cap_is_enforced() {
        assert!(matches!(
            DenseTensor::<f64>::zeros(vec![101, 101, 101]),
            Err(OracleError::TooLarge(_))
        ));
    }
}
