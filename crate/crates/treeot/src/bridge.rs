//! Schrödinger bridges on trees rooted at a leaf: given row-stochastic
//! transition matrices on the directed edges and marginals on (some of) the
//! leaves, find the KL-closest Markov law on the tree.
//!
//! The solution factorizes through backward potentials (propagated from the
//! leaves toward the root) and forward potentials (root toward the leaves);
//! a node marginal is the elementwise product of its two potentials and an
//! edge plan is the transition matrix scaled by diagonal potential factors.
//! The fixed point is reached by a Sinkhorn-style sweep over the leaf
//! scaling vectors `v`, which is block coordinate ascent in a Lagrange dual.
//!
//! This module deliberately does not reuse the multi-marginal solver engine:
//! the equivalence of the two routes is a theorem the test suite checks, so
//! both sides are implemented independently.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2};
use thiserror::Error;

use crate::graph::{GraphError, RootedTree, Tree};
use crate::numerics::{check_mass_balance, kl_divergence, neg_entropy, Marginal, NumericsError};
use crate::solver::TreeOTProblem;
use crate::Scalar;

#[derive(Debug, Error)]
pub enum BridgeError<T: Scalar> {
    #[error("transition matrix on edge ({0}, {1}) is not row-stochastic within tolerance")]
    NotRowStochastic(usize, usize),
    #[error("transition matrix on edge ({0}, {1}) has a negative or non-finite entry")]
    InvalidTransition(usize, usize),
    #[error("node {0} expected state size {1}, got {2}")]
    SizeMismatch(usize, usize, usize),
    #[error("marginal given for node {0}, which is not a leaf")]
    NotALeaf(usize),
    #[error("no leaf marginals given")]
    NoConstraints,
    #[error("constraint mass unreachable at node {0}, state {1}")]
    Infeasible(usize, usize),
    #[error("backward potential has a non-positive entry at node {0}, state {1}")]
    NonPositiveEntry(usize, usize),
    #[error("bridge iteration did not converge in {sweeps} sweeps (residual {residual})")]
    MaxSweepsExceeded { sweeps: usize, residual: T },
    #[error("relative-entropy term has mass outside the prior's support")]
    SupportViolation,
    #[error("state {1} of chain marginal {0} carries no mass; transition row left uniform")]
    ZeroMassState(usize, usize),
    #[error("row sums of the kernels leaving node {0} disagree; no common normalizer")]
    IncompatibleRowSums(usize),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// A Markov law prior on a rooted tree plus marginal constraints on leaves.
#[derive(Debug, Clone)]
pub struct MarkovTreeProblem<T: Scalar> {
    rooted: RootedTree,
    /// Row-stochastic transition matrix per directed edge `(parent, child)`,
    /// rows indexed by the parent's states.
    transitions: BTreeMap<(usize, usize), Array2<T>>,
    leaf_marginals: BTreeMap<usize, Marginal<T>>,
    sizes: Vec<usize>,
}

const ROW_SUM_TOL: f64 = 1e-12;

impl<T: Scalar> MarkovTreeProblem<T> {
    /// Validates row-stochasticity (within `1e-12`) and shape consistency.
    /// Strictly positive transitions guarantee a solution exists; zeros are
    /// accepted as long as the constraints remain reachable, which the solve
    /// itself reports otherwise.
    pub fn new(
        rooted: RootedTree,
        transitions: BTreeMap<(usize, usize), Array2<T>>,
        leaf_marginals: BTreeMap<usize, Marginal<T>>,
    ) -> Result<Self, BridgeError<T>> {
        let tree = rooted.base();
        let mut sizes = vec![0usize; tree.node_count()];
        for (parent, child) in rooted.directed_edges() {
            let a = transitions
                .get(&(parent, child))
                .ok_or(BridgeError::InvalidTransition(parent, child))?;
            let (rows, cols) = a.dim();
            for (node, dim) in [(parent, rows), (child, cols)] {
                if sizes[node - 1] == 0 {
                    sizes[node - 1] = dim;
                } else if sizes[node - 1] != dim {
                    return Err(BridgeError::SizeMismatch(node, sizes[node - 1], dim));
                }
            }
            for row in a.rows() {
                let mut sum = T::zero();
                let mut positive = false;
                for &x in row {
                    if !x.is_finite() || x < T::zero() {
                        return Err(BridgeError::InvalidTransition(parent, child));
                    }
                    if x > T::zero() {
                        positive = true;
                    }
                    sum += x;
                }
                if !positive || (sum - T::one()).abs() > T::of(ROW_SUM_TOL) {
                    return Err(BridgeError::NotRowStochastic(parent, child));
                }
            }
        }
        for s in &mut sizes {
            if *s == 0 {
                *s = 1;
            }
        }
        for (&j, m) in &leaf_marginals {
            if !tree.is_leaf(j) {
                return Err(BridgeError::NotALeaf(j));
            }
            if m.len() != sizes[j - 1] {
                return Err(BridgeError::SizeMismatch(j, sizes[j - 1], m.len()));
            }
        }
        Ok(MarkovTreeProblem {
            rooted,
            transitions,
            leaf_marginals,
            sizes,
        })
    }

    pub fn rooted(&self) -> &RootedTree {
        &self.rooted
    }

    pub fn tree(&self) -> &Tree {
        self.rooted.base()
    }

    pub fn root(&self) -> usize {
        self.rooted.root()
    }

    pub fn transitions(&self) -> &BTreeMap<(usize, usize), Array2<T>> {
        &self.transitions
    }

    pub fn leaf_marginals(&self) -> &BTreeMap<usize, Marginal<T>> {
        &self.leaf_marginals
    }

    pub fn size_of(&self, j: usize) -> usize {
        self.sizes[j - 1]
    }
}

/// Backward potentials: per node, and the per-edge propagated factors
/// `A^(p,c) phi_c` they are assembled from.
#[derive(Debug, Clone)]
pub struct BackwardPass<T: Scalar> {
    pub phi: BTreeMap<usize, Array1<T>>,
    edge_factors: BTreeMap<(usize, usize), Array1<T>>,
}

/// Propagates the leaf vectors `v` toward the root: a non-root leaf carries
/// `v` itself (all-ones when absent), and every other node multiplies the
/// factors propagated from its children.
pub fn backward_pass<T: Scalar>(
    problem: &MarkovTreeProblem<T>,
    v: &BTreeMap<usize, Array1<T>>,
) -> Result<BackwardPass<T>, BridgeError<T>> {
    let rooted = problem.rooted();
    let mut phi: BTreeMap<usize, Array1<T>> = BTreeMap::new();
    let mut edge_factors = BTreeMap::new();
    for &j in rooted.preorder().iter().rev() {
        let children = rooted.children(j);
        if children.is_empty() {
            let vec = v
                .get(&j)
                .cloned()
                .unwrap_or_else(|| Array1::ones(problem.size_of(j)));
            if vec.len() != problem.size_of(j) {
                return Err(BridgeError::SizeMismatch(j, problem.size_of(j), vec.len()));
            }
            phi.insert(j, vec);
        } else {
            let mut acc: Option<Array1<T>> = None;
            for &c in children {
                let factor = problem.transitions()[&(j, c)].dot(&phi[&c]);
                acc = Some(match acc {
                    None => factor.clone(),
                    Some(prev) => &prev * &factor,
                });
                edge_factors.insert((j, c), factor);
            }
            phi.insert(j, acc.expect("non-leaf node has children"));
        }
    }
    Ok(BackwardPass { phi, edge_factors })
}

/// Forward potentials and the per-edge exclusion factors (backward potential
/// of the parent with the child's own branch removed).
#[derive(Debug, Clone)]
pub struct ForwardPass<T: Scalar> {
    pub phi_hat: BTreeMap<usize, Array1<T>>,
    pub excluded: BTreeMap<(usize, usize), Array1<T>>,
}

/// Propagates from the root toward the leaves. The root potential is
/// `1 ./ v_root`; every other node pulls its parent's potential through the
/// transition transpose, joined with the exclusion factor of its siblings.
///
/// Exclusion factors are computed as products over sibling branches rather
/// than by dividing them out of the parent potential, so structural zeros in
/// the transitions cannot poison the result.
pub fn forward_pass<T: Scalar>(
    problem: &MarkovTreeProblem<T>,
    v: &BTreeMap<usize, Array1<T>>,
    backward: &BackwardPass<T>,
) -> Result<ForwardPass<T>, BridgeError<T>> {
    let rooted = problem.rooted();
    let root = rooted.root();
    let mut phi_hat: BTreeMap<usize, Array1<T>> = BTreeMap::new();
    let mut excluded = BTreeMap::new();
    let root_hat = match v.get(&root) {
        Some(vr) => vr.mapv(|x| {
            if x == T::infinity() {
                T::zero()
            } else {
                T::one() / x
            }
        }),
        None => Array1::ones(problem.size_of(root)),
    };
    phi_hat.insert(root, root_hat);
    for &p in rooted.preorder() {
        let children = rooted.children(p);
        for &c in children {
            // Product of the sibling branch factors at p, excluding c.
            let mut excl: Array1<T> = Array1::ones(problem.size_of(p));
            for &s in children {
                if s != c {
                    excl = &excl * &backward.edge_factors[&(p, s)];
                }
            }
            let pulled = &phi_hat[&p] * &excl;
            let hat = problem.transitions()[&(p, c)].t().dot(&pulled);
            phi_hat.insert(c, hat);
            excluded.insert((p, c), excl);
        }
    }
    Ok(ForwardPass { phi_hat, excluded })
}

/// The assembled bridge: node marginals, directed-edge plans, and the
/// potentials behind them. `factors` is absent on solutions obtained by
/// transformations (rerooting) rather than a solve.
#[derive(Debug, Clone)]
pub struct BridgeSolution<T: Scalar> {
    pub rooted: RootedTree,
    pub mu: BTreeMap<usize, Marginal<T>>,
    pub plans: BTreeMap<(usize, usize), Array2<T>>,
    pub factors: Option<BridgeFactors<T>>,
    pub mass: T,
}

#[derive(Debug, Clone)]
pub struct BridgeFactors<T: Scalar> {
    pub backward: BTreeMap<usize, Array1<T>>,
    pub forward: BTreeMap<usize, Array1<T>>,
    pub excluded: BTreeMap<(usize, usize), Array1<T>>,
    pub v: BTreeMap<usize, Array1<T>>,
}

/// A finished run: the solution plus convergence evidence.
#[derive(Debug, Clone)]
pub struct BridgeRun<T: Scalar> {
    pub solution: BridgeSolution<T>,
    pub sweeps: usize,
    pub residual_history: Vec<T>,
    pub converged: bool,
}

#[derive(Debug, Clone)]
pub struct BridgeOptions<T: Scalar> {
    pub tol: T,
    pub max_sweeps: usize,
}

impl<T: Scalar> Default for BridgeOptions<T> {
    fn default() -> Self {
        BridgeOptions {
            tol: T::of(1e-8),
            max_sweeps: 10_000,
        }
    }
}

/// Sinkhorn-style dual ascent on the leaf scalings: the root update first,
/// then the other constrained leaves in depth-first Euler order, each with
/// freshly propagated potentials.
pub fn bridge_sinkhorn<T: Scalar>(
    problem: &MarkovTreeProblem<T>,
    opts: &BridgeOptions<T>,
) -> Result<BridgeRun<T>, BridgeError<T>> {
    if problem.leaf_marginals().is_empty() {
        return Err(BridgeError::NoConstraints);
    }
    let root = problem.root();
    let marginals: Vec<Marginal<T>> = problem.leaf_marginals().values().cloned().collect();
    let (normalized, mass) = check_mass_balance(&marginals, T::of(1e-9))?;
    let targets: BTreeMap<usize, Marginal<T>> = problem
        .leaf_marginals()
        .keys()
        .copied()
        .zip(normalized)
        .collect();

    // Root first, then the remaining constrained leaves in Euler order.
    let mut schedule: Vec<usize> = Vec::new();
    if targets.contains_key(&root) {
        schedule.push(root);
    }
    for leaf in problem.tree().leaf_schedule() {
        if leaf != root && targets.contains_key(&leaf) {
            schedule.push(leaf);
        }
    }

    let mut v: BTreeMap<usize, Array1<T>> = targets
        .keys()
        .map(|&j| (j, Array1::ones(problem.size_of(j))))
        .collect();

    let mut residual_history = Vec::new();
    let mut converged = false;
    let mut sweeps = 0;
    for sweep in 1..=opts.max_sweeps {
        sweeps = sweep;
        for &j in &schedule {
            let backward = backward_pass(problem, &v)?;
            if j == root {
                let phi_r = &backward.phi[&root];
                let mu_r = targets[&root].weights();
                let mut vr = Array1::zeros(phi_r.len());
                for i in 0..phi_r.len() {
                    if mu_r[i] == T::zero() {
                        vr[i] = T::infinity();
                    } else {
                        if phi_r[i] <= T::zero() {
                            return Err(BridgeError::Infeasible(root, i + 1));
                        }
                        vr[i] = phi_r[i] / mu_r[i];
                    }
                }
                v.insert(root, vr);
            } else {
                let forward = forward_pass(problem, &v, &backward)?;
                let hat = &forward.phi_hat[&j];
                let mu_j = targets[&j].weights();
                let mut vj = Array1::zeros(hat.len());
                for i in 0..hat.len() {
                    if mu_j[i] == T::zero() {
                        vj[i] = T::zero();
                    } else {
                        if hat[i] <= T::zero() {
                            return Err(BridgeError::Infeasible(j, i + 1));
                        }
                        vj[i] = mu_j[i] / hat[i];
                    }
                }
                v.insert(j, vj);
            }
        }
        // Residuals of the marginal conditions at the current iterate.
        let backward = backward_pass(problem, &v)?;
        let forward = forward_pass(problem, &v, &backward)?;
        let mut residual = T::zero();
        for (&j, target) in &targets {
            let current = &backward.phi[&j] * &forward.phi_hat[&j];
            residual = residual.max(target.l1_distance(&current));
        }
        residual_history.push(residual);
        if residual <= opts.tol {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(BridgeError::MaxSweepsExceeded {
            sweeps,
            residual: residual_history.last().copied().unwrap_or(T::infinity()),
        });
    }

    // Gauge: normalize the root's backward potential to unit sum by scaling
    // the non-root leaf vectors jointly (the fixed point is scale-invariant,
    // so this only pins the reported factors).
    let non_root: Vec<usize> = v.keys().copied().filter(|&j| j != root).collect();
    if !non_root.is_empty() {
        let backward = backward_pass(problem, &v)?;
        let s = backward.phi[&root].sum();
        if s > T::zero() && s.is_finite() {
            let t = s.powf(-T::one() / T::from_usize(non_root.len()).unwrap());
            for &j in &non_root {
                let scaled = v[&j].mapv(|x| x * t);
                v.insert(j, scaled);
            }
            if let Some(vr) = v.get(&root) {
                let scaled = vr.mapv(|x| x / s);
                v.insert(root, scaled);
            }
        }
    }

    let solution = assemble_solution(problem, &v, mass)?;
    Ok(BridgeRun {
        solution,
        sweeps,
        residual_history,
        converged,
    })
}

fn assemble_solution<T: Scalar>(
    problem: &MarkovTreeProblem<T>,
    v: &BTreeMap<usize, Array1<T>>,
    mass: T,
) -> Result<BridgeSolution<T>, BridgeError<T>> {
    let backward = backward_pass(problem, v)?;
    let forward = forward_pass(problem, v, &backward)?;
    let rooted = problem.rooted().clone();
    let mut mu = BTreeMap::new();
    for j in problem.tree().nodes() {
        let m = (&backward.phi[&j] * &forward.phi_hat[&j]).mapv(|x| x * mass);
        mu.insert(j, Marginal::new(m)?);
    }
    let mut plans = BTreeMap::new();
    for (p, c) in rooted.directed_edges() {
        let a = &problem.transitions()[&(p, c)];
        let row_scale = &forward.phi_hat[&p] * &forward.excluded[&(p, c)];
        let mut plan = a.clone();
        for (i, r) in row_scale.iter().enumerate() {
            plan.row_mut(i).mapv_inplace(|x| x * *r);
        }
        for (jdx, cval) in backward.phi[&c].iter().enumerate() {
            plan.column_mut(jdx).mapv_inplace(|x| x * *cval * mass);
        }
        plans.insert((p, c), plan);
    }
    Ok(BridgeSolution {
        rooted,
        mu,
        plans,
        factors: Some(BridgeFactors {
            backward: backward.phi,
            forward: forward.phi_hat,
            excluded: forward.excluded,
            v: v.clone(),
        }),
        mass,
    })
}

/// Transports a converged solution to a different leaf root: marginals are
/// unchanged, and plans on the reversed path edges are transposed.
pub fn reroot_solution<T: Scalar>(
    problem: &MarkovTreeProblem<T>,
    solution: &BridgeSolution<T>,
    new_root: usize,
) -> Result<BridgeSolution<T>, BridgeError<T>> {
    let tree = problem.tree();
    let rerooted = tree.root_at(new_root)?;
    let path = tree.path_between(problem.root(), new_root)?;
    let mut reversed = std::collections::BTreeSet::new();
    for w in path.windows(2) {
        reversed.insert((w[0], w[1]));
    }
    let mut plans = BTreeMap::new();
    for (&(a, b), plan) in &solution.plans {
        if reversed.contains(&(a, b)) {
            plans.insert((b, a), plan.t().to_owned());
        } else {
            plans.insert((a, b), plan.clone());
        }
    }
    Ok(BridgeSolution {
        rooted: rerooted,
        mu: solution.mu.clone(),
        plans,
        factors: None,
        mass: solution.mass,
    })
}

/// The bridge objective in both algebraic forms:
/// - `markov`: sum over edges of `H(plan | diag(mu_parent) A)`;
/// - `bethe`: sum of `H(plan | A)` minus repeated node entropies, including
///   the root's (a constant the optimization may drop, kept here so the two
///   forms agree identically).
pub fn bridge_objective<T: Scalar>(
    problem: &MarkovTreeProblem<T>,
    solution: &BridgeSolution<T>,
) -> Result<(T, T), BridgeError<T>> {
    let tree = problem.tree();
    let mut markov = T::zero();
    let mut bethe = T::zero();
    for (p, c) in problem.rooted().directed_edges() {
        let plan = &solution.plans[&(p, c)];
        let a = &problem.transitions()[&(p, c)];
        let mu_p = solution.mu[&p].weights();
        let mut prior = a.clone();
        for (i, m) in mu_p.iter().enumerate() {
            prior.row_mut(i).mapv_inplace(|x| x * *m);
        }
        let plan_flat: Vec<T> = plan.iter().copied().collect();
        let prior_flat: Vec<T> = prior.iter().copied().collect();
        let term = kl_divergence(&plan_flat, &prior_flat)?;
        if term.is_infinite() {
            return Err(BridgeError::SupportViolation);
        }
        markov += term;
        let a_flat: Vec<T> = a.iter().copied().collect();
        let unconditioned = kl_divergence(&plan_flat, &a_flat)?;
        if unconditioned.is_infinite() {
            return Err(BridgeError::SupportViolation);
        }
        bethe += unconditioned;
    }
    for j in tree.nodes() {
        let deg = tree.degree(j);
        if deg >= 2 {
            let w: Vec<T> = solution.mu[&j].weights().iter().copied().collect();
            bethe -= T::from_usize(deg - 1).unwrap() * neg_entropy(&w);
        }
    }
    let root_w: Vec<T> = solution.mu[&problem.root()].weights().iter().copied().collect();
    bethe -= neg_entropy(&root_w);
    Ok((markov, bethe))
}

/// The discrete path bridge: marginal constraints at both ends of a Markov
/// chain, plus the per-step stochastic matrices of the solution law.
#[derive(Debug, Clone)]
pub struct PathBridge<T: Scalar> {
    /// Plans per step `t -> t+1`, scaled to the constraint mass.
    pub plans: Vec<Array2<T>>,
    /// Marginals at every time step.
    pub marginals: Vec<Marginal<T>>,
    /// Row-stochastic per-step transitions of the solution; rows at
    /// zero-mass states are left uniform and flagged.
    pub step_transitions: Vec<Array2<T>>,
    /// `(time, state)` pairs (1-based) whose transition row is arbitrary.
    pub flagged_states: Vec<(usize, usize)>,
    pub sweeps: usize,
}

/// Solves the bridge on a path of `transitions.len() + 1` time steps with
/// constraints at the first and last step.
pub fn path_bridge<T: Scalar>(
    transitions: &[Array2<T>],
    mu_first: &Marginal<T>,
    mu_last: &Marginal<T>,
    opts: &BridgeOptions<T>,
) -> Result<PathBridge<T>, BridgeError<T>> {
    let steps = transitions.len();
    let j_count = steps + 1;
    let tree = if j_count == 1 {
        return Err(BridgeError::NoConstraints);
    } else {
        let edges: Vec<(usize, usize)> = (1..j_count).map(|t| (t, t + 1)).collect();
        Tree::new(j_count, &edges)?
    };
    let rooted = tree.root_at(1)?;
    let trans: BTreeMap<(usize, usize), Array2<T>> = transitions
        .iter()
        .enumerate()
        .map(|(t, a)| ((t + 1, t + 2), a.clone()))
        .collect();
    let mut leaf_marginals = BTreeMap::new();
    leaf_marginals.insert(1, mu_first.clone());
    leaf_marginals.insert(j_count, mu_last.clone());
    let problem = MarkovTreeProblem::new(rooted, trans, leaf_marginals)?;
    let run = bridge_sinkhorn(&problem, opts)?;

    let mut plans = Vec::with_capacity(steps);
    let mut marginals = Vec::with_capacity(j_count);
    let mut step_transitions = Vec::with_capacity(steps);
    let mut flagged = Vec::new();
    for t in 1..=j_count {
        marginals.push(run.solution.mu[&t].clone());
    }
    for t in 1..j_count {
        let plan = run.solution.plans[&(t, t + 1)].clone();
        let mu_t = run.solution.mu[&t].weights();
        let (rows, cols) = plan.dim();
        let mut bar = Array2::zeros((rows, cols));
        for i in 0..rows {
            if mu_t[i] > T::zero() {
                for jdx in 0..cols {
                    bar[(i, jdx)] = plan[(i, jdx)] / mu_t[i];
                }
            } else {
                flagged.push((t, i + 1));
                let unif = T::one() / T::from_usize(cols).unwrap();
                for jdx in 0..cols {
                    bar[(i, jdx)] = unif;
                }
            }
        }
        plans.push(plan);
        step_transitions.push(bar);
    }
    Ok(PathBridge {
        plans,
        marginals,
        step_transitions,
        flagged_states: flagged,
        sweeps: run.sweeps,
    })
}

/// Converts a tree transport problem into the equivalent Markov-tree bridge
/// rooted at `root`: the Gibbs kernels become transition matrices after row
/// normalization, which is only possible when every out-edge of a node
/// shares the same row sums. Returns the per-node normalizer vectors needed
/// to correct objective values.
pub fn ot_to_bridge<T: Scalar>(
    problem: &TreeOTProblem<T>,
    root: usize,
) -> Result<(MarkovTreeProblem<T>, BTreeMap<usize, Array1<T>>), BridgeError<T>> {
    let tree = problem.tree();
    let rooted = tree.root_at(root)?;
    let kernels =
        crate::projections::EdgeKernels::from_costs(tree, problem.edge_costs(), problem.epsilon())
            .map_err(|_| BridgeError::SupportViolation)?;
    let mut transitions = BTreeMap::new();
    let mut normalizers: BTreeMap<usize, Array1<T>> = BTreeMap::new();
    for (p, c) in rooted.directed_edges() {
        let k = kernels.lin(p, c).to_owned();
        let row_sums: Array1<T> = k.rows().into_iter().map(|r| r.sum()).collect();
        let b = row_sums.mapv(|s| T::one() / s);
        match normalizers.get(&p) {
            None => {
                normalizers.insert(p, b.clone());
            }
            Some(existing) => {
                let worst = existing
                    .iter()
                    .zip(b.iter())
                    .map(|(&x, &y)| (x - y).abs() / x.abs().max(T::one()))
                    .fold(T::zero(), T::max);
                if worst > T::of(1e-9) {
                    return Err(BridgeError::IncompatibleRowSums(p));
                }
            }
        }
        let mut a = k;
        for (i, bi) in b.iter().enumerate() {
            a.row_mut(i).mapv_inplace(|x| x * *bi);
        }
        transitions.insert((p, c), a);
    }
    let bridge = MarkovTreeProblem::new(rooted, transitions, problem.constraints().clone())?;
    Ok((bridge, normalizers))
}
