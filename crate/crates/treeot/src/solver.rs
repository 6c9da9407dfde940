//! The scheduled Sinkhorn iteration over leaf constraints.
//!
//! One sweep visits the constrained leaves in a fixed depth-first Euler
//! order, resets each leaf's scaling to `mu ./ (message product)`, and then
//! refreshes only the messages on the path to the next scheduled leaf.
//! Convergence is judged after each full sweep on the exact leaf residuals,
//! with the dual objective tracked as evidence of coordinate ascent.
//!
//! Constraints on internal nodes are handled by `preprocess`, which splits
//! the tree at constrained internal nodes and leaves unconstrained leaves in
//! place (their messages are constants that are never updated).

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array1, Array2};
use thiserror::Error;

use crate::graph::{GraphError, Tree};
use crate::numerics::{check_mass_balance, neg_entropy, CostMatrix, Marginal, NumericsError};
use crate::projections::{Domain, EdgeKernels, ProjectionError, ScalingState};
use crate::Scalar;

#[derive(Debug, Error)]
pub enum SolveError<T: Scalar> {
    #[error("no constraints given")]
    NoConstraints,
    #[error("constrained node {0} is internal to the active tree; run preprocess first")]
    NotPreprocessed(usize),
    #[error("edge ({0}, {1}) has no cost matrix")]
    MissingEdgeCost(usize, usize),
    #[error("cost shapes or marginal lengths disagree at node {0}")]
    InconsistentSizes(usize),
    #[error("epsilon must be positive")]
    EpsilonNonPositive,
    #[error("solver did not converge in {sweeps} sweeps (residual {residual})")]
    MaxSweepsExceeded {
        sweeps: usize,
        residual: T,
        report: Box<SolveReport<T>>,
    },
    #[error("numerical underflow in linear domain and log-domain retry disabled or failed")]
    NumericalUnderflow,
    #[error("constraint mass unreachable at node {0}, state {1}: no admissible path")]
    Infeasible(usize, usize),
    #[error("report is not converged; use the unchecked accessor to extract anyway")]
    NotConverged,
    #[error(transparent)]
    Projection(#[from] ProjectionError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// When to run message passing in log domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LogDomainPolicy {
    /// Linear first; restart in log domain on underflow or when a kernel has
    /// zero entries in linear form.
    #[default]
    Auto,
    On,
    Off,
}

#[derive(Debug, Clone)]
pub struct SolveOptions<T: Scalar> {
    pub tol: T,
    pub max_sweeps: usize,
    pub log_domain: LogDomainPolicy,
}

impl<T: Scalar> Default for SolveOptions<T> {
    fn default() -> Self {
        SolveOptions {
            tol: T::of(1e-8),
            max_sweeps: 10_000,
            log_domain: LogDomainPolicy::Auto,
        }
    }
}

/// A multi-marginal transport instance on a tree: per-edge costs, the
/// regularization strength, and the constrained marginals.
#[derive(Debug, Clone)]
pub struct TreeOTProblem<T: Scalar> {
    tree: Tree,
    edge_costs: BTreeMap<(usize, usize), CostMatrix<T>>,
    epsilon: T,
    constraints: BTreeMap<usize, Marginal<T>>,
    sizes: Vec<usize>,
}

impl<T: Scalar> TreeOTProblem<T> {
    /// Edge costs may be given in either orientation; they are stored on the
    /// canonical `(min, max)` orientation with the transpose convention.
    pub fn new(
        tree: Tree,
        edge_costs: Vec<((usize, usize), CostMatrix<T>)>,
        epsilon: T,
        constraints: BTreeMap<usize, Marginal<T>>,
    ) -> Result<Self, SolveError<T>> {
        if epsilon <= T::zero() || !epsilon.is_finite() {
            return Err(SolveError::EpsilonNonPositive);
        }
        let mut canonical = BTreeMap::new();
        for ((a, b), c) in edge_costs {
            let (key, cost) = if a <= b { ((a, b), c) } else { ((b, a), c.transposed()) };
            canonical.insert(key, cost);
        }
        let mut sizes = vec![0usize; tree.node_count()];
        for &(a, b) in tree.edges() {
            let c = canonical
                .get(&(a, b))
                .ok_or(SolveError::MissingEdgeCost(a, b))?;
            let (ra, rb) = c.shape();
            for (node, dim) in [(a, ra), (b, rb)] {
                if sizes[node - 1] == 0 {
                    sizes[node - 1] = dim;
                } else if sizes[node - 1] != dim {
                    return Err(SolveError::InconsistentSizes(node));
                }
            }
        }
        for (&j, m) in &constraints {
            if sizes[j - 1] == 0 {
                sizes[j - 1] = m.len();
            } else if sizes[j - 1] != m.len() {
                return Err(SolveError::InconsistentSizes(j));
            }
        }
        Ok(TreeOTProblem {
            tree,
            edge_costs: canonical,
            epsilon,
            constraints,
            sizes,
        })
    }

    pub fn tree(&self) -> &Tree {
        &self.tree
    }

    pub fn epsilon(&self) -> T {
        self.epsilon
    }

    pub fn constraints(&self) -> &BTreeMap<usize, Marginal<T>> {
        &self.constraints
    }

    pub fn edge_costs(&self) -> &BTreeMap<(usize, usize), CostMatrix<T>> {
        &self.edge_costs
    }

    pub fn size_of(&self, j: usize) -> usize {
        self.sizes[j - 1]
    }

    /// Nodes spanned by the constraints: the union of paths between
    /// constrained nodes. Everything else is pruned at solve time.
    pub fn active_nodes(&self) -> BTreeSet<usize> {
        let tree = &self.tree;
        let mut active = vec![true; tree.node_count()];
        let mut deg: Vec<usize> = tree.nodes().map(|j| tree.degree(j)).collect();
        let mut queue: Vec<usize> = tree
            .nodes()
            .filter(|j| !self.constraints.contains_key(j) && deg[j - 1] <= 1)
            .collect();
        while let Some(j) = queue.pop() {
            if !active[j - 1] || self.constraints.contains_key(&j) {
                continue;
            }
            if deg[j - 1] <= 1 {
                active[j - 1] = false;
                for &k in tree.neighbors(j) {
                    if active[k - 1] {
                        deg[k - 1] -= 1;
                        if !self.constraints.contains_key(&k) && deg[k - 1] <= 1 {
                            queue.push(k);
                        }
                    }
                }
            }
        }
        tree.nodes().filter(|&j| active[j - 1]).collect()
    }
}

/// A piece produced by `preprocess`, with its relabeling back to the
/// original node labels (`node_map[local - 1] = original`).
#[derive(Debug, Clone)]
pub struct SubProblem<T: Scalar> {
    pub problem: TreeOTProblem<T>,
    pub node_map: Vec<usize>,
}

/// Splits a problem at constrained internal nodes so that every piece has
/// its constraints exactly on active leaves (the constrained marginal is
/// copied to each piece touching the cut). Unconstrained leaves are kept in
/// the piece they hang off; the solver never updates them.
pub fn preprocess<T: Scalar>(
    problem: &TreeOTProblem<T>,
) -> Result<Vec<SubProblem<T>>, SolveError<T>> {
    if problem.constraints.is_empty() {
        return Err(SolveError::NoConstraints);
    }
    let tree = &problem.tree;
    let active = problem.active_nodes();
    let cuts: BTreeSet<usize> = active
        .iter()
        .copied()
        .filter(|j| {
            problem.constraints.contains_key(j)
                && tree.neighbors(*j).iter().filter(|k| active.contains(k)).count() >= 2
        })
        .collect();
    if cuts.is_empty() {
        return Ok(vec![SubProblem {
            problem: problem.clone(),
            node_map: tree.nodes().collect(),
        }]);
    }

    // Union-find over tree edges: active edges sharing a non-cut endpoint
    // belong to the same piece; pruned branches join their attachment point.
    let edges = tree.edges();
    let mut uf: Vec<usize> = (0..edges.len()).collect();
    fn find(uf: &mut Vec<usize>, i: usize) -> usize {
        if uf[i] != i {
            let r = find(uf, uf[i]);
            uf[i] = r;
        }
        uf[i]
    }
    let edge_index: BTreeMap<(usize, usize), usize> = edges
        .iter()
        .enumerate()
        .map(|(i, &e)| (e, i))
        .collect();
    for j in tree.nodes() {
        let merge_here = !cuts.contains(&j) || !active.contains(&j);
        if !merge_here {
            continue;
        }
        let incident: Vec<usize> = tree
            .neighbors(j)
            .iter()
            .map(|&k| edge_index[&(j.min(k), j.max(k))])
            .collect();
        for w in incident.windows(2) {
            let (a, b) = (find(&mut uf, w[0]), find(&mut uf, w[1]));
            if a != b {
                uf[a] = b;
            }
        }
    }

    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..edges.len() {
        let r = find(&mut uf, i);
        groups.entry(r).or_default().push(i);
    }

    let mut pieces = Vec::new();
    for group in groups.values() {
        let mut nodes: BTreeSet<usize> = BTreeSet::new();
        for &ei in group {
            nodes.insert(edges[ei].0);
            nodes.insert(edges[ei].1);
        }
        let node_map: Vec<usize> = nodes.iter().copied().collect();
        let local: BTreeMap<usize, usize> = node_map
            .iter()
            .enumerate()
            .map(|(i, &orig)| (orig, i + 1))
            .collect();
        let local_edges: Vec<(usize, usize)> = group
            .iter()
            .map(|&ei| (local[&edges[ei].0], local[&edges[ei].1]))
            .collect();
        let sub_tree = Tree::new(node_map.len(), &local_edges)?;
        let costs: Vec<((usize, usize), CostMatrix<T>)> = group
            .iter()
            .map(|&ei| {
                let (a, b) = edges[ei];
                (
                    (local[&a], local[&b]),
                    problem.edge_costs[&(a, b)].clone(),
                )
            })
            .collect();
        let constraints: BTreeMap<usize, Marginal<T>> = node_map
            .iter()
            .filter_map(|&orig| {
                problem
                    .constraints
                    .get(&orig)
                    .map(|m| (local[&orig], m.clone()))
            })
            .collect();
        pieces.push(SubProblem {
            problem: TreeOTProblem::new(sub_tree, costs, problem.epsilon, constraints)?,
            node_map,
        });
    }
    Ok(pieces)
}

/// Outcome of a solve: the final scaling state plus convergence evidence.
/// Marginals and plans extracted from it are rescaled by `mass` (solves run
/// on unit-mass-normalized constraints).
#[derive(Debug, Clone)]
pub struct SolveReport<T: Scalar> {
    pub state: ScalingState<T>,
    pub sweeps: usize,
    /// Max L1 leaf residual after each sweep, on unit mass.
    pub residual_history: Vec<T>,
    /// Dual objective after each sweep (nondecreasing under exact arithmetic).
    pub dual_history: Vec<T>,
    pub converged: bool,
    pub mass: T,
}

impl<T: Scalar> SolveReport<T> {
    pub fn final_residual(&self) -> T {
        self.residual_history.last().copied().unwrap_or(T::infinity())
    }

    /// Marginal of node `j`, rescaled to the problem's mass.
    pub fn marginal(&self, j: usize) -> Result<Marginal<T>, SolveError<T>> {
        if !self.converged {
            return Err(SolveError::NotConverged);
        }
        Ok(self.marginal_unchecked(j)?)
    }

    /// Marginal extraction without the convergence gate.
    pub fn marginal_unchecked(&self, j: usize) -> Result<Marginal<T>, ProjectionError> {
        Ok(self.state.project_marginal(j)?.scaled(self.mass))
    }

    /// Pairwise transport plan between `j1` and `j2` (adjacent or not),
    /// rescaled to the problem's mass.
    pub fn plan(&self, j1: usize, j2: usize) -> Result<Array2<T>, SolveError<T>> {
        if !self.converged {
            return Err(SolveError::NotConverged);
        }
        Ok(self.plan_unchecked(j1, j2)?)
    }

    pub fn plan_unchecked(&self, j1: usize, j2: usize) -> Result<Array2<T>, ProjectionError> {
        Ok(self.state.project_pair(j1, j2)? * self.mass)
    }

    /// Dual variables `lambda_j = eps * log(u_j)` for a constrained node.
    pub fn dual_variable(&self, j: usize, epsilon: T) -> Option<Array1<T>> {
        self.state.scaling(j).map(|v| match self.state.domain() {
            Domain::Linear => v.mapv(|x| epsilon * x.ln()),
            Domain::Log => v.mapv(|x| epsilon * x),
        })
    }
}

/// `<C, M> + eps H(M)` without materializing the tensor: the cost term sums
/// per-edge plan inner products; the entropy of a tree-factorized tensor
/// decomposes over edge plans minus repeated node marginals, plus a
/// data-independent constant aligning it with the flattened-tensor entropy.
pub fn primal_objective<T: Scalar>(
    report: &SolveReport<T>,
    problem: &TreeOTProblem<T>,
) -> Result<T, SolveError<T>> {
    if !report.converged {
        return Err(SolveError::NotConverged);
    }
    let tree = problem.tree();
    if tree.node_count() == 1 {
        let m = report.marginal_unchecked(1)?;
        let w: Vec<T> = m.weights().iter().copied().collect();
        return Ok(problem.epsilon * neg_entropy(&w));
    }
    let mut cost_term = T::zero();
    let mut edge_entropy = T::zero();
    let mut edge_cells = T::zero();
    for &(a, b) in tree.edges() {
        let plan = report.plan_unchecked(a, b)?;
        let c = problem.edge_costs()[&(a, b)].entries();
        cost_term += plan.iter().zip(c.iter()).map(|(&m, &c)| m * c).sum::<T>();
        let flat: Vec<T> = plan.iter().copied().collect();
        edge_entropy += neg_entropy(&flat);
        edge_cells += T::from_usize(plan.len()).unwrap();
    }
    let mut node_entropy = T::zero();
    let mut node_cells = T::zero();
    for j in tree.nodes() {
        let deg = tree.degree(j);
        if deg >= 2 {
            let over = T::from_usize(deg - 1).unwrap();
            let m = report.marginal_unchecked(j)?;
            let w: Vec<T> = m.weights().iter().copied().collect();
            node_entropy += over * neg_entropy(&w);
            node_cells += over * T::from_usize(problem.size_of(j)).unwrap();
        }
    }
    let tensor_cells = problem
        .sizes
        .iter()
        .map(|&n| T::from_usize(n).unwrap())
        .fold(T::one(), |a, b| a * b);
    let constant = tensor_cells - edge_cells + node_cells;
    Ok(cost_term + problem.epsilon * (edge_entropy - node_entropy + constant))
}

/// Current-domain residual of one constrained node, on unit mass.
fn leaf_residual<T: Scalar>(
    state: &ScalingState<T>,
    j: usize,
    target: &Marginal<T>,
) -> Result<T, ProjectionError> {
    Ok(target.l1_distance(state.project_marginal(j)?.weights()))
}

struct SweepOutcome<T: Scalar> {
    state: ScalingState<T>,
    residual_history: Vec<T>,
    dual_history: Vec<T>,
    sweeps: usize,
    converged: bool,
}

fn run_sweeps<T: Scalar>(
    tree: &Tree,
    kernels: EdgeKernels<T>,
    targets: &BTreeMap<usize, Marginal<T>>,
    schedule: &[usize],
    domain: Domain,
    epsilon: T,
    opts: &SolveOptions<T>,
) -> Result<SweepOutcome<T>, SolveError<T>> {
    let initial: BTreeMap<usize, Array1<T>> = targets
        .keys()
        .map(|&j| (j, Array1::ones(kernels.size_of(j))))
        .collect();
    let mut state = ScalingState::new(tree.clone(), kernels, initial, domain)?;
    let mut residual_history = Vec::new();
    let mut dual_history = Vec::new();
    let mut converged = false;
    let mut sweeps = 0;

    for sweep in 1..=opts.max_sweeps {
        sweeps = sweep;
        for (idx, &j) in schedule.iter().enumerate() {
            update_scaling(&mut state, j, &targets[&j])?;
            let next = schedule[(idx + 1) % schedule.len()];
            state.mark_path_dirty(j, next);
            state.refresh_path(j, next)?;
        }
        state.refresh_all()?;
        let mut residual = T::zero();
        for (&j, target) in targets {
            residual = residual.max(leaf_residual(&state, j, target)?);
        }
        residual_history.push(residual);
        dual_history.push(dual_value(&state, targets, epsilon)?);
        if residual <= opts.tol {
            converged = true;
            break;
        }
    }
    Ok(SweepOutcome {
        state,
        residual_history,
        dual_history,
        sweeps,
        converged,
    })
}

/// `u_j := mu_j ./ (product of messages at j)`, with `0 / x = 0` at
/// zero-mass bins. Stored in the state's domain.
fn update_scaling<T: Scalar>(
    state: &mut ScalingState<T>,
    j: usize,
    target: &Marginal<T>,
) -> Result<(), SolveError<T>> {
    let n = target.len();
    let mut combined: Array1<T> = match state.domain() {
        Domain::Linear => Array1::ones(n),
        Domain::Log => Array1::zeros(n),
    };
    for &k in state.tree().neighbors(j).iter().collect::<Vec<_>>() {
        let msg = state
            .message(j, k)
            .expect("messages initialized for all edges")
            .clone();
        match state.domain() {
            Domain::Linear => combined = &combined * &msg,
            Domain::Log => combined = &combined + &msg,
        }
    }
    let updated = match state.domain() {
        Domain::Linear => {
            let mut u: Array1<T> = Array1::zeros(n);
            for i in 0..n {
                let m = target.weights()[i];
                if m > T::zero() {
                    let w = combined[i];
                    if w <= T::zero() || !w.is_finite() {
                        return Err(SolveError::Projection(ProjectionError::NonFiniteMessage(
                            j, j,
                        )));
                    }
                    u[i] = m / w;
                    if !u[i].is_finite() {
                        return Err(SolveError::Projection(ProjectionError::NonFiniteMessage(
                            j, j,
                        )));
                    }
                }
            }
            u
        }
        Domain::Log => {
            let mut u: Array1<T> = Array1::zeros(n);
            for i in 0..n {
                let m = target.weights()[i];
                if m > T::zero() {
                    if combined[i] == T::neg_infinity() {
                        return Err(SolveError::Infeasible(j, i + 1));
                    }
                    u[i] = m.ln() - combined[i];
                } else {
                    u[i] = T::neg_infinity();
                }
            }
            u
        }
    };
    state.set_scaling_raw(j, updated);
    Ok(())
}

/// Dual objective `-eps <K, U> + sum_j lambda_j' mu_j` with
/// `lambda_j = eps log u_j`; zero-mass bins contribute nothing.
fn dual_value<T: Scalar>(
    state: &ScalingState<T>,
    targets: &BTreeMap<usize, Marginal<T>>,
    epsilon: T,
) -> Result<T, SolveError<T>> {
    let mut dual = -epsilon * state.total_mass()?;
    for (&j, target) in targets {
        let u = state.scaling(j).expect("constrained nodes carry scalings");
        for (i, &m) in target.weights().iter().enumerate() {
            if m > T::zero() {
                let log_u = match state.domain() {
                    Domain::Linear => u[i].ln(),
                    Domain::Log => u[i],
                };
                dual += epsilon * log_u * m;
            }
        }
    }
    Ok(dual)
}

/// Solves a preprocessed problem (all constraints on active leaves).
pub fn solve<T: Scalar>(
    problem: &TreeOTProblem<T>,
    opts: &SolveOptions<T>,
) -> Result<SolveReport<T>, SolveError<T>> {
    if problem.constraints.is_empty() {
        return Err(SolveError::NoConstraints);
    }
    let tree = problem.tree();
    let active = problem.active_nodes();
    for &j in problem.constraints.keys() {
        let active_degree = tree
            .neighbors(j)
            .iter()
            .filter(|k| active.contains(k))
            .count();
        if active_degree >= 2 {
            return Err(SolveError::NotPreprocessed(j));
        }
    }

    let marginals: Vec<Marginal<T>> = problem.constraints.values().cloned().collect();
    let (normalized, mass) = check_mass_balance(&marginals, T::of(1e-9))?;
    let targets: BTreeMap<usize, Marginal<T>> = problem
        .constraints
        .keys()
        .copied()
        .zip(normalized)
        .collect();

    let kernels = EdgeKernels::from_costs(tree, &problem.edge_costs, problem.epsilon)?;
    let schedule: Vec<usize> = {
        let constrained: BTreeSet<usize> = targets.keys().copied().collect();
        let start = *constrained.iter().next().unwrap();
        tree.euler_leaf_order(start, &constrained)
    };

    let initial_domain = match opts.log_domain {
        LogDomainPolicy::On => Domain::Log,
        LogDomainPolicy::Off => Domain::Linear,
        LogDomainPolicy::Auto => {
            if kernels.has_zero_entries() {
                Domain::Log
            } else {
                Domain::Linear
            }
        }
    };

    let attempt = run_sweeps(
        tree,
        kernels.clone(),
        &targets,
        &schedule,
        initial_domain,
        problem.epsilon,
        opts,
    );
    let outcome = match attempt {
        Ok(o) => o,
        Err(SolveError::Projection(ProjectionError::NonFiniteMessage(..))) => {
            match (opts.log_domain, initial_domain) {
                (LogDomainPolicy::Auto, Domain::Linear) => run_sweeps(
                    tree,
                    kernels,
                    &targets,
                    &schedule,
                    Domain::Log,
                    problem.epsilon,
                    opts,
                )?,
                _ => return Err(SolveError::NumericalUnderflow),
            }
        }
        Err(e) => return Err(e),
    };

    let report = SolveReport {
        converged: outcome.converged,
        sweeps: outcome.sweeps,
        residual_history: outcome.residual_history,
        dual_history: outcome.dual_history,
        mass,
        state: outcome.state,
    };
    if !report.converged {
        let residual = report.final_residual();
        let sweeps = report.sweeps;
        return Err(SolveError::MaxSweepsExceeded {
            sweeps,
            residual,
            report: Box::new(report),
        });
    }
    Ok(report)
}

/// Node marginals and edge plans on the original labels, merged from the
/// preprocessed pieces.
#[derive(Debug, Clone)]
pub struct TreeSolution<T: Scalar> {
    pub marginals: BTreeMap<usize, Marginal<T>>,
    pub plans: BTreeMap<(usize, usize), Array2<T>>,
    pub converged: bool,
    pub sweeps: usize,
    pub mass: T,
    pub reports: Vec<(Vec<usize>, SolveReport<T>)>,
}

/// Preprocess, solve every piece, and merge the results back onto the
/// original node labels.
pub fn solve_problem<T: Scalar>(
    problem: &TreeOTProblem<T>,
    opts: &SolveOptions<T>,
) -> Result<TreeSolution<T>, SolveError<T>> {
    let pieces = preprocess(problem)?;
    let mut marginals = BTreeMap::new();
    let mut plans = BTreeMap::new();
    let mut reports = Vec::new();
    let mut sweeps = 0;
    let mut mass = T::one();
    for piece in &pieces {
        let report = solve(&piece.problem, opts)?;
        sweeps = sweeps.max(report.sweeps);
        mass = report.mass;
        for (local, &orig) in piece.node_map.iter().enumerate() {
            let local_node = local + 1;
            marginals
                .entry(orig)
                .or_insert(report.marginal_unchecked(local_node)?);
        }
        for &(la, lb) in piece.problem.tree().edges() {
            let (oa, ob) = (piece.node_map[la - 1], piece.node_map[lb - 1]);
            // Piece labels preserve the original order, so (la, lb) canonical
            // implies (oa, ob) canonical.
            plans.insert((oa, ob), report.plan_unchecked(la, lb)?);
        }
        reports.push((piece.node_map.clone(), report));
    }
    Ok(TreeSolution {
        marginals,
        plans,
        converged: true,
        sweeps,
        mass,
        reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{assemble_cost_tensor, dense_sinkhorn, dense_objective, TensorProblem};
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn bimarginal_problem() -> TreeOTProblem<f64> {
        let tree = Tree::new(2, &[(1, 2)]).unwrap();
        let c = CostMatrix::new(array![[0.0, 1.0], [1.0, 0.0]]).unwrap();
        let mut constraints = BTreeMap::new();
        constraints.insert(1, Marginal::from_slice(&[0.5, 0.5]).unwrap());
        constraints.insert(2, Marginal::from_slice(&[0.5, 0.5]).unwrap());
        TreeOTProblem::new(tree, vec![((1, 2), c)], 1.0, constraints).unwrap()
    }

    #[test]
    fn bimarginal_closed_form() {
        let problem = bimarginal_problem();
        let report = solve(&problem, &SolveOptions::default()).unwrap();
        let plan = report.plan(1, 2).unwrap();
        let e = std::f64::consts::E;
        let a = e / (2.0 * (1.0 + e));
        let b = 1.0 / (2.0 * (1.0 + e));
        assert_abs_diff_eq!(plan[(0, 0)], a, epsilon = 1e-7);
        assert_abs_diff_eq!(plan[(0, 1)], b, epsilon = 1e-7);
        assert_abs_diff_eq!(plan[(1, 0)], b, epsilon = 1e-7);
        assert_abs_diff_eq!(plan[(1, 1)], a, epsilon = 1e-7);
    }

    fn example_tree_problem(constrain: &[usize]) -> TreeOTProblem<f64> {
        let tree = Tree::new(4, &[(1, 2), (2, 3), (1, 4)]).unwrap();
        let costs = vec![
            (
                (1, 2),
                CostMatrix::new(array![[0.1, 0.8], [0.7, 0.2]]).unwrap(),
            ),
            (
                (2, 3),
                CostMatrix::new(array![[0.5, 0.3], [0.9, 0.1]]).unwrap(),
            ),
            (
                (1, 4),
                CostMatrix::new(array![[0.4, 0.6], [0.3, 1.0]]).unwrap(),
            ),
        ];
        let margins = [
            array![0.3, 0.7],
            array![0.5, 0.5],
            array![0.6, 0.4],
            array![0.2, 0.8],
        ];
        let constraints = constrain
            .iter()
            .map(|&j| (j, Marginal::new(margins[j - 1].clone()).unwrap()))
            .collect();
        TreeOTProblem::new(tree, costs, 0.8, constraints).unwrap()
    }

    fn dense_of(problem: &TreeOTProblem<f64>) -> TensorProblem<f64> {
        TensorProblem {
            cost: assemble_cost_tensor(problem.tree(), problem.edge_costs()).unwrap(),
            epsilon: problem.epsilon(),
            constraints: problem.constraints().clone(),
        }
    }

    #[test]
    fn matches_dense_oracle_on_example_tree() {
        let problem = example_tree_problem(&[3, 4]);
        let report = solve(&problem, &SolveOptions::default()).unwrap();
        let dense = dense_sinkhorn(&dense_of(&problem), 1e-10, 5000).unwrap();
        for j in problem.tree().nodes() {
            let fast = report.marginal(j).unwrap();
            let slow = dense.plan.project(j).unwrap();
            assert!(fast.l1_distance(slow.weights()) < 1e-6);
        }
        for &(a, b) in problem.tree().edges() {
            let fast = report.plan(a, b).unwrap();
            let slow = dense.plan.project_pair(a, b).unwrap();
            let gap: f64 = fast.iter().zip(slow.iter()).map(|(x, y)| (x - y).abs()).sum();
            assert!(gap < 1e-6);
        }
    }

    #[test]
    fn constrained_marginals_are_met() {
        let problem = example_tree_problem(&[3, 4]);
        let report = solve(&problem, &SolveOptions::default()).unwrap();
        for (&j, m) in problem.constraints() {
            let got = report.marginal(j).unwrap();
            assert!(m.l1_distance(got.weights()) < 1e-7);
        }
    }

    #[test]
    fn dual_history_is_nondecreasing() {
        let problem = example_tree_problem(&[3, 4]);
        let report = solve(&problem, &SolveOptions::default()).unwrap();
        for w in report.dual_history.windows(2) {
            assert!(w[1] >= w[0] - 1e-12);
        }
    }

    #[test]
    fn scaling_class_invariance() {
        // Scaling one leaf's vector by c and another's by 1/c leaves every
        // extracted marginal and plan unchanged.
        let problem = example_tree_problem(&[3, 4]);
        let report = solve(&problem, &SolveOptions::default()).unwrap();
        let mut scaled = report.clone();
        let c = 7.3;
        let u3 = scaled.state.scaling(3).unwrap() * c;
        let u4 = scaled.state.scaling(4).unwrap() / c;
        scaled.state.set_scaling_raw(3, u3);
        scaled.state.set_scaling_raw(4, u4);
        scaled.state.refresh_all().unwrap();
        for j in problem.tree().nodes() {
            let a = report.marginal(j).unwrap();
            let b = scaled.marginal(j).unwrap();
            assert!(a.l1_distance(b.weights()) < 1e-10);
        }
        let a = report.plan(2, 4).unwrap();
        let b = scaled.plan(2, 4).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn symmetric_path_solution_is_symmetric() {
        // Identical leaf marginals and symmetric costs on a path: the
        // solution is invariant under reversing the path.
        let tree = Tree::new(3, &[(1, 2), (2, 3)]).unwrap();
        let c = CostMatrix::new(array![[0.0, 0.5], [0.5, 0.0]]).unwrap();
        let mu = Marginal::from_slice(&[0.3, 0.7]).unwrap();
        let mut constraints = BTreeMap::new();
        constraints.insert(1, mu.clone());
        constraints.insert(3, mu);
        let problem = TreeOTProblem::new(
            tree,
            vec![((1, 2), c.clone()), ((2, 3), c)],
            0.7,
            constraints,
        )
        .unwrap();
        let report = solve(&problem, &SolveOptions::default()).unwrap();
        let m1 = report.marginal(1).unwrap();
        let m3 = report.marginal(3).unwrap();
        assert!(m1.l1_distance(m3.weights()) < 1e-8);
        let p12 = report.plan(1, 2).unwrap();
        let p32 = report.plan(3, 2).unwrap();
        for (a, b) in p12.iter().zip(p32.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-8);
        }
    }

    #[test]
    fn preprocess_splits_at_internal_constraint() {
        let tree = Tree::new(3, &[(1, 2), (2, 3)]).unwrap();
        let c = CostMatrix::new(array![[0.0, 1.0], [1.0, 0.0]]).unwrap();
        let mu = Marginal::from_slice(&[0.5, 0.5]).unwrap();
        let mut constraints = BTreeMap::new();
        constraints.insert(1, mu.clone());
        constraints.insert(2, mu.clone());
        constraints.insert(3, mu);
        let problem = TreeOTProblem::new(
            tree,
            vec![((1, 2), c.clone()), ((2, 3), c)],
            1.0,
            constraints,
        )
        .unwrap();
        let pieces = preprocess(&problem).unwrap();
        assert_eq!(pieces.len(), 2);
        assert_eq!(pieces[0].node_map, vec![1, 2]);
        assert_eq!(pieces[1].node_map, vec![2, 3]);
        for p in &pieces {
            assert_eq!(p.problem.constraints().len(), 2);
        }
    }

    #[test]
    fn preprocess_keeps_leaf_constrained_problem() {
        let problem = example_tree_problem(&[3, 4]);
        let pieces = preprocess(&problem).unwrap();
        assert_eq!(pieces.len(), 1);
        assert_eq!(pieces[0].node_map, vec![1, 2, 3, 4]);
    }

    #[test]
    fn pruned_leaf_matches_full_oracle() {
        // Path 1-2-3 with constraints on {1, 2}: node 3 is pruned; its
        // message is the constant row sum and marginals still match the
        // oracle solve of the full problem.
        let tree = Tree::new(3, &[(1, 2), (2, 3)]).unwrap();
        let c12 = CostMatrix::new(array![[0.1, 0.6], [0.8, 0.3]]).unwrap();
        let c23 = CostMatrix::new(array![[0.2, 0.9], [0.4, 0.5]]).unwrap();
        let mut constraints = BTreeMap::new();
        constraints.insert(1, Marginal::from_slice(&[0.4, 0.6]).unwrap());
        constraints.insert(2, Marginal::from_slice(&[0.7, 0.3]).unwrap());
        let problem = TreeOTProblem::new(
            tree,
            vec![((1, 2), c12), ((2, 3), c23)],
            0.9,
            constraints,
        )
        .unwrap();
        assert_eq!(problem.active_nodes(), BTreeSet::from([1, 2]));
        let report = solve(&problem, &SolveOptions::default()).unwrap();
        let dense = dense_sinkhorn(&dense_of(&problem), 1e-11, 5000).unwrap();
        for j in 1..=3 {
            let fast = report.marginal(j).unwrap();
            let slow = dense.plan.project(j).unwrap();
            assert!(fast.l1_distance(slow.weights()) < 1e-7);
        }
    }

    #[test]
    fn decomposed_solve_matches_oracle() {
        // Constraint on internal node 1 of the example tree: split and merge,
        // then compare everything against the undecomposed dense solve.
        let problem = example_tree_problem(&[1, 3, 4]);
        let solution = solve_problem(&problem, &SolveOptions::default()).unwrap();
        let dense = dense_sinkhorn(&dense_of(&problem), 1e-11, 5000).unwrap();
        for j in problem.tree().nodes() {
            let fast = &solution.marginals[&j];
            let slow = dense.plan.project(j).unwrap();
            assert!(fast.l1_distance(slow.weights()) < 1e-6);
        }
        for &(a, b) in problem.tree().edges() {
            let fast = &solution.plans[&(a, b)];
            let slow = dense.plan.project_pair(a, b).unwrap();
            let gap: f64 = fast.iter().zip(slow.iter()).map(|(x, y)| (x - y).abs()).sum();
            assert!(gap < 1e-6);
        }
    }

    #[test]
    fn single_node_problem_passes_through() {
        let tree = Tree::new(1, &[]).unwrap();
        let mut constraints = BTreeMap::new();
        constraints.insert(1, Marginal::from_slice(&[0.2, 0.5, 0.3]).unwrap());
        let problem = TreeOTProblem::new(tree, vec![], 1.0, constraints).unwrap();
        let report = solve(&problem, &SolveOptions::default()).unwrap();
        let m = report.marginal(1).unwrap();
        assert!(m.l1_distance(&array![0.2, 0.5, 0.3]) < 1e-12);
    }

    #[test]
    fn primal_objective_matches_oracle() {
        for constrain in [vec![3, 4], vec![2, 3, 4]] {
            let problem = example_tree_problem(&constrain);
            if constrain == vec![3, 4] {
                let report = solve(&problem, &SolveOptions::default()).unwrap();
                let fast = primal_objective(&report, &problem).unwrap();
                let dense = dense_sinkhorn(&dense_of(&problem), 1e-12, 5000).unwrap();
                let slow = dense_objective(
                    &dense.plan,
                    &assemble_cost_tensor(problem.tree(), problem.edge_costs()).unwrap(),
                    problem.epsilon(),
                )
                .unwrap();
                assert_abs_diff_eq!(fast, slow, epsilon = 1e-8);
            }
        }
        // Random-ish path instance, n = 2.
        let tree = Tree::new(3, &[(1, 2), (2, 3)]).unwrap();
        let c12 = CostMatrix::new(array![[0.3, 1.2], [0.7, 0.4]]).unwrap();
        let c23 = CostMatrix::new(array![[0.8, 0.2], [0.1, 0.9]]).unwrap();
        let mut constraints = BTreeMap::new();
        constraints.insert(1, Marginal::from_slice(&[0.45, 0.55]).unwrap());
        constraints.insert(3, Marginal::from_slice(&[0.8, 0.2]).unwrap());
        let problem =
            TreeOTProblem::new(tree, vec![((1, 2), c12), ((2, 3), c23)], 0.6, constraints)
                .unwrap();
        let report = solve(&problem, &SolveOptions::default()).unwrap();
        let fast = primal_objective(&report, &problem).unwrap();
        let dense = dense_sinkhorn(&dense_of(&problem), 1e-12, 5000).unwrap();
        let slow = dense_objective(
            &dense.plan,
            &assemble_cost_tensor(problem.tree(), problem.edge_costs()).unwrap(),
            problem.epsilon(),
        )
        .unwrap();
        assert_abs_diff_eq!(fast, slow, epsilon = 1e-8);
    }

    #[test]
    fn zero_cost_objective_matches_oracle() {
        let tree = Tree::new(3, &[(1, 2), (2, 3)]).unwrap();
        let zero = CostMatrix::new(Array2::zeros((2, 2))).unwrap();
        let mu = Marginal::from_slice(&[0.5, 0.5]).unwrap();
        let mut constraints = BTreeMap::new();
        constraints.insert(1, mu.clone());
        constraints.insert(3, mu);
        let problem = TreeOTProblem::new(
            tree,
            vec![((1, 2), zero.clone()), ((2, 3), zero)],
            1.0,
            constraints,
        )
        .unwrap();
        let report = solve(&problem, &SolveOptions::default()).unwrap();
        let fast = primal_objective(&report, &problem).unwrap();
        let dense = dense_sinkhorn(&dense_of(&problem), 1e-12, 5000).unwrap();
        let slow = dense_objective(
            &dense.plan,
            &assemble_cost_tensor(problem.tree(), problem.edge_costs()).unwrap(),
            problem.epsilon(),
        )
        .unwrap();
        assert_abs_diff_eq!(fast, slow, epsilon = 1e-9);
    }

    #[test]
    fn log_domain_policy_on_matches_linear() {
        let problem = example_tree_problem(&[3, 4]);
        let lin = solve(&problem, &SolveOptions::default()).unwrap();
        let log = solve(
            &problem,
            &SolveOptions {
                log_domain: LogDomainPolicy::On,
                ..SolveOptions::default()
            },
        )
        .unwrap();
        for j in problem.tree().nodes() {
            let a = lin.marginal(j).unwrap();
            let b = log.marginal(j).unwrap();
            assert!(a.l1_distance(b.weights()) < 1e-7);
        }
    }

    #[test]
    fn tiny_epsilon_triggers_log_retry() {
        // Euclidean costs, eps small enough that linear kernels underflow.
        let tree = Tree::new(2, &[(1, 2)]).unwrap();
        let grid = crate::numerics::unit_grid::<f64>(8);
        let c = crate::numerics::euclidean_cost(&grid);
        let mut constraints = BTreeMap::new();
        let mut a = vec![0.0; 8];
        a[1] = 0.6;
        a[2] = 0.4;
        let mut b = vec![0.0; 8];
        b[6] = 1.0;
        constraints.insert(1, Marginal::from_slice(&a).unwrap());
        constraints.insert(2, Marginal::from_slice(&b).unwrap());
        let problem = TreeOTProblem::new(tree, vec![((1, 2), c)], 5e-4, constraints).unwrap();
        let report = solve(&problem, &SolveOptions::default()).unwrap();
        assert_eq!(report.state.domain(), Domain::Log);
        assert!(report.converged);
        // With Off the same instance must refuse.
        let err = solve(
            &problem,
            &SolveOptions {
                log_domain: LogDomainPolicy::Off,
                ..SolveOptions::default()
            },
        );
        assert!(matches!(err, Err(SolveError::NumericalUnderflow)));
    }

    #[test]
    fn unpreprocessed_internal_constraint_is_rejected() {
        let problem = example_tree_problem(&[1, 3, 4]);
        assert!(matches!(
            solve(&problem, &SolveOptions::default()),
            Err(SolveError::NotPreprocessed(1))
        ));
    }

    #[test]
    fn no_constraints_is_rejected() {
        let tree = Tree::new(2, &[(1, 2)]).unwrap();
        let c = CostMatrix::new(Array2::zeros((2, 2))).unwrap();
        let problem = TreeOTProblem::new(tree, vec![((1, 2), c)], 1.0, BTreeMap::new()).unwrap();
        assert!(matches!(
            preprocess(&problem),
            Err(SolveError::NoConstraints)
        ));
    }

    #[test]
    fn zero_mass_bins_are_allowed() {
        let tree = Tree::new(2, &[(1, 2)]).unwrap();
        let c = CostMatrix::new(array![[0.0, 1.0], [1.0, 0.0]]).unwrap();
        let mut constraints = BTreeMap::new();
        constraints.insert(1, Marginal::from_slice(&[1.0, 0.0]).unwrap());
        constraints.insert(2, Marginal::from_slice(&[0.0, 1.0]).unwrap());
        let problem = TreeOTProblem::new(tree, vec![((1, 2), c)], 1.0, constraints).unwrap();
        let report = solve(&problem, &SolveOptions::default()).unwrap();
        let plan: Array2<f64> = report.plan(1, 2).unwrap();
        assert_abs_diff_eq!(plan[(0, 1)], 1.0, epsilon = 1e-9);
        assert!(plan[(0, 0)].abs() < 1e-12);
        assert!(plan[(1, 1)].abs() < 1e-12);
    }

    #[test]
    fn mass_rescaling_round_trip() {
        // Non-unit masses are normalized internally and restored on output.
        let tree = Tree::new(2, &[(1, 2)]).unwrap();
        let c = CostMatrix::new(array![[0.0, 1.0], [1.0, 0.0]]).unwrap();
        let mut constraints = BTreeMap::new();
        constraints.insert(1, Marginal::from_slice(&[1.5, 1.5]).unwrap());
        constraints.insert(2, Marginal::from_slice(&[2.0, 1.0]).unwrap());
        let problem = TreeOTProblem::new(tree, vec![((1, 2), c)], 1.0, constraints).unwrap();
        let report = solve(&problem, &SolveOptions::default()).unwrap();
        assert_abs_diff_eq!(report.mass, 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(report.marginal(1).unwrap().mass(), 3.0, epsilon = 1e-8);
    }
}
