//! Marginal and pairwise projections of the scaled kernel tensor by message
//! passing over the tree, in a few matrix-vector products per edge — the
//! tensor itself is never materialized.
//!
//! Each directed edge `(j, k)` caches a message: the aggregated contribution
//! of the subtree behind `k` as seen from `j`. A message is the kernel on the
//! edge applied to the elementwise product of `k`'s scaling vector and the
//! messages arriving at `k` from its other neighbors. An explicit dirty set
//! tracks which messages are stale after a scaling update, so a Sinkhorn step
//! only refreshes the path between consecutively updated leaves.
//!
//! Messages can be kept in linear or log domain. In log domain products
//! become sums and the matrix-vector product becomes a row-wise log-sum-exp,
//! which keeps very small regularization parameters representable.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use thiserror::Error;

use crate::graph::Tree;
use crate::numerics::{CostMatrix, KernelMatrix, Marginal, NumericsError};
use crate::Scalar;

#[derive(Debug, Error)]
pub enum ProjectionError {
    #[error("message on edge ({0}, {1}) depends on stale message ({2}, {3})")]
    StaleDependency(usize, usize, usize, usize),
    #[error("({0}, {1}) is not a tree edge")]
    UnknownEdge(usize, usize),
    #[error("projection endpoints must differ")]
    EqualNodes,
    #[error("vector for node {0} has length {1}, expected {2}")]
    SizeMismatch(usize, usize, usize),
    #[error("non-finite or non-positive message on edge ({0}, {1}); linear-domain under/overflow")]
    NonFiniteMessage(usize, usize),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Message and scaling representation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    Linear,
    Log,
}

/// Immutable per-edge kernels with per-node state sizes. Kernels are stored
/// on the canonical `(min, max)` orientation; the reverse is the transpose.
#[derive(Debug, Clone)]
pub struct EdgeKernels<T: Scalar> {
    kernels: BTreeMap<(usize, usize), KernelMatrix<T>>,
    sizes: Vec<usize>,
}

impl<T: Scalar> EdgeKernels<T> {
    /// Builds Gibbs kernels `exp(-C/eps)` for every tree edge.
    pub fn from_costs(
        tree: &Tree,
        edge_costs: &BTreeMap<(usize, usize), CostMatrix<T>>,
        epsilon: T,
    ) -> Result<Self, ProjectionError> {
        let mut kernels = BTreeMap::new();
        for &(a, b) in tree.edges() {
            let cost = edge_costs
                .get(&(a, b))
                .ok_or(ProjectionError::UnknownEdge(a, b))?;
            kernels.insert((a, b), KernelMatrix::from_cost(cost, epsilon)?);
        }
        Self::from_kernels(tree, kernels)
    }

    /// Wraps pre-built kernels (e.g. transition matrices), keyed by canonical
    /// edge with rows indexed by the lower-labeled endpoint.
    pub fn from_kernels(
        tree: &Tree,
        kernels: BTreeMap<(usize, usize), KernelMatrix<T>>,
    ) -> Result<Self, ProjectionError> {
        let mut sizes = vec![0usize; tree.node_count()];
        for &(a, b) in tree.edges() {
            let k = kernels
                .get(&(a, b))
                .ok_or(ProjectionError::UnknownEdge(a, b))?;
            let (ra, rb) = k.shape();
            for (node, dim) in [(a, ra), (b, rb)] {
                if sizes[node - 1] == 0 {
                    sizes[node - 1] = dim;
                } else if sizes[node - 1] != dim {
                    return Err(ProjectionError::SizeMismatch(node, dim, sizes[node - 1]));
                }
            }
        }
        for s in &mut sizes {
            if *s == 0 {
                *s = 1; // single-node tree
            }
        }
        Ok(EdgeKernels { kernels, sizes })
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn size_of(&self, j: usize) -> usize {
        self.sizes[j - 1]
    }

    /// Linear kernel oriented with rows indexed by `j`, columns by `k`.
    pub fn lin(&self, j: usize, k: usize) -> ArrayView2<'_, T> {
        let key = (j.min(k), j.max(k));
        let m = self.kernels[&key].entries();
        if j < k {
            m.view()
        } else {
            m.t()
        }
    }

    /// Log kernel oriented with rows indexed by `j`, columns by `k`.
    pub fn log(&self, j: usize, k: usize) -> ArrayView2<'_, T> {
        let key = (j.min(k), j.max(k));
        let m = self.kernels[&key].log_entries();
        if j < k {
            m.view()
        } else {
            m.t()
        }
    }

    /// True if any kernel entry is exactly zero in linear form (either a
    /// structural zero or an underflowed Gibbs weight).
    pub fn has_zero_entries(&self) -> bool {
        self.kernels
            .values()
            .any(|k| k.entries().iter().any(|&v| v == T::zero()))
    }
}

/// Row-wise `log sum exp(log_m[i, :] + log_v[:])`.
fn log_matvec<T: Scalar>(log_m: ArrayView2<'_, T>, log_v: ArrayView1<'_, T>) -> Array1<T> {
    let (rows, cols) = log_m.dim();
    let mut out = Array1::from_elem(rows, T::neg_infinity());
    for i in 0..rows {
        let mut hi = T::neg_infinity();
        for j in 0..cols {
            let x = log_m[(i, j)] + log_v[j];
            if x > hi {
                hi = x;
            }
        }
        if hi == T::neg_infinity() {
            continue;
        }
        let mut acc = T::zero();
        for j in 0..cols {
            let x = log_m[(i, j)] + log_v[j];
            if x > T::neg_infinity() {
                acc += (x - hi).exp();
            }
        }
        out[i] = hi + acc.ln();
    }
    out
}

/// `log(exp(log_a) . exp(log_b))` via log-sum-exp over the inner index.
fn log_matmul<T: Scalar>(log_a: &Array2<T>, log_b: ArrayView2<'_, T>) -> Array2<T> {
    let (n, m) = log_a.dim();
    let (m2, p) = log_b.dim();
    debug_assert_eq!(m, m2);
    let mut out = Array2::from_elem((n, p), T::neg_infinity());
    for i in 0..n {
        for k in 0..p {
            let mut hi = T::neg_infinity();
            for j in 0..m {
                let x = log_a[(i, j)] + log_b[(j, k)];
                if x > hi {
                    hi = x;
                }
            }
            if hi == T::neg_infinity() {
                continue;
            }
            let mut acc = T::zero();
            for j in 0..m {
                let x = log_a[(i, j)] + log_b[(j, k)];
                if x > T::neg_infinity() {
                    acc += (x - hi).exp();
                }
            }
            out[(i, k)] = hi + acc.ln();
        }
    }
    out
}

/// The solver's entire mutable state: per-node scaling vectors and cached
/// per-directed-edge messages, plus the dirty set.
///
/// Vectors are stored in the representation named by `domain`: raw values in
/// `Linear`, logarithms in `Log`. Nodes without an entry in `scalings` carry
/// an implicit all-ones scaling.
#[derive(Debug, Clone)]
pub struct ScalingState<T: Scalar> {
    tree: Tree,
    kernels: EdgeKernels<T>,
    domain: Domain,
    scalings: BTreeMap<usize, Array1<T>>,
    messages: BTreeMap<(usize, usize), Array1<T>>,
    dirty: BTreeSet<(usize, usize)>,
}

impl<T: Scalar> ScalingState<T> {
    /// Initializes all messages in dependency order. `scalings` holds
    /// linear-domain vectors regardless of the requested domain.
    pub fn new(
        tree: Tree,
        kernels: EdgeKernels<T>,
        scalings: BTreeMap<usize, Array1<T>>,
        domain: Domain,
    ) -> Result<Self, ProjectionError> {
        for (&j, v) in &scalings {
            if v.len() != kernels.size_of(j) {
                return Err(ProjectionError::SizeMismatch(
                    j,
                    v.len(),
                    kernels.size_of(j),
                ));
            }
        }
        let scalings = match domain {
            Domain::Linear => scalings,
            Domain::Log => scalings
                .into_iter()
                .map(|(j, v)| (j, v.mapv(T::ln)))
                .collect(),
        };
        let mut state = ScalingState {
            tree,
            kernels,
            domain,
            scalings,
            messages: BTreeMap::new(),
            dirty: BTreeSet::new(),
        };
        state.refresh_all()?;
        Ok(state)
    }

    pub fn tree(&self) -> &Tree {
        &self.tree
    }

    pub fn kernels(&self) -> &EdgeKernels<T> {
        &self.kernels
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    /// Scaling vector of node `j` in the state's domain, if stored.
    pub fn scaling(&self, j: usize) -> Option<&Array1<T>> {
        self.scalings.get(&j)
    }

    /// Scaling vector of `j` in linear domain, materializing implicit ones.
    pub fn scaling_linear(&self, j: usize) -> Array1<T> {
        match (self.scalings.get(&j), self.domain) {
            (Some(v), Domain::Linear) => v.clone(),
            (Some(v), Domain::Log) => v.mapv(T::exp),
            (None, _) => Array1::ones(self.kernels.size_of(j)),
        }
    }

    /// Overwrites the scaling of `j` with a domain-encoded vector. The caller
    /// is responsible for marking dependent messages dirty.
    pub fn set_scaling_raw(&mut self, j: usize, v: Array1<T>) {
        self.scalings.insert(j, v);
    }

    pub fn message(&self, j: usize, k: usize) -> Option<&Array1<T>> {
        self.messages.get(&(j, k))
    }

    pub fn is_dirty(&self, j: usize, k: usize) -> bool {
        self.dirty.contains(&(j, k))
    }

    pub fn dirty_edges(&self) -> impl Iterator<Item = &(usize, usize)> {
        self.dirty.iter()
    }

    /// Domain-encoded identity scaling for node `j` (ones or zeros).
    fn neutral(&self, j: usize) -> Array1<T> {
        match self.domain {
            Domain::Linear => Array1::ones(self.kernels.size_of(j)),
            Domain::Log => Array1::zeros(self.kernels.size_of(j)),
        }
    }

    /// The gathered vector at node `k` excluding the branch toward `skip`:
    /// `k`'s scaling combined with the messages from its other neighbors.
    fn gather_excluding(
        &self,
        k: usize,
        skip: Option<usize>,
    ) -> Result<Array1<T>, ProjectionError> {
        let mut acc = match self.scalings.get(&k) {
            Some(v) => v.clone(),
            None => self.neutral(k),
        };
        for &l in self.tree.neighbors(k) {
            if Some(l) == skip {
                continue;
            }
            if self.dirty.contains(&(k, l)) {
                let (a, b) = skip.map_or((k, l), |s| (s, k));
                return Err(ProjectionError::StaleDependency(a, b, k, l));
            }
            let msg = &self.messages[&(k, l)];
            match self.domain {
                Domain::Linear => acc = &acc * msg,
                Domain::Log => acc = &acc + msg,
            }
        }
        Ok(acc)
    }

    /// Recomputes the message on directed edge `(j, k)` from the scaling of
    /// `k` and the messages below `k`, which must all be clean.
    pub fn recompute_message(&mut self, edge: (usize, usize)) -> Result<(), ProjectionError> {
        let (j, k) = edge;
        if !self.tree.contains_edge(j, k) {
            return Err(ProjectionError::UnknownEdge(j, k));
        }
        let gathered = self.gather_excluding(k, Some(j))?;
        let msg = match self.domain {
            Domain::Linear => {
                let m = self.kernels.lin(j, k).dot(&gathered);
                if m.iter().any(|&v| !v.is_finite() || v <= T::zero()) {
                    return Err(ProjectionError::NonFiniteMessage(j, k));
                }
                m
            }
            Domain::Log => {
                let m = log_matvec(self.kernels.log(j, k), gathered.view());
                if m.iter().any(|&v| v.is_nan() || v == T::infinity()) {
                    return Err(ProjectionError::NonFiniteMessage(j, k));
                }
                m
            }
        };
        self.messages.insert((j, k), msg);
        self.dirty.remove(&(j, k));
        Ok(())
    }

    /// Marks exactly the directed edges along the path from `from` to `to`,
    /// oriented toward `to`, as stale. No-op when `from == to`.
    pub fn mark_path_dirty(&mut self, from: usize, to: usize) {
        let path = self
            .tree
            .path_between(from, to)
            .expect("path endpoints are tree nodes");
        for w in path.windows(2) {
            self.dirty.insert((w[1], w[0]));
        }
    }

    /// Recomputes the messages along the path from `from` to `to` (oriented
    /// toward `to`) in dependency order.
    pub fn refresh_path(&mut self, from: usize, to: usize) -> Result<(), ProjectionError> {
        let path = self
            .tree
            .path_between(from, to)
            .expect("path endpoints are tree nodes");
        for w in path.windows(2) {
            self.recompute_message((w[1], w[0]))?;
        }
        Ok(())
    }

    /// Recomputes every message in dependency order (two passes anchored at
    /// node 1) and clears the dirty set.
    pub fn refresh_all(&mut self) -> Result<(), ProjectionError> {
        if self.tree.node_count() == 1 {
            self.dirty.clear();
            return Ok(());
        }
        let (parents, order) = self.orientation_from(1);
        for &j in &order {
            self.dirty.extend(
                parents[j - 1]
                    .map(|p| [(p, j), (j, p)])
                    .into_iter()
                    .flatten(),
            );
        }
        // Upward: messages toward the anchor, children before parents.
        for &j in order.iter().rev() {
            if let Some(p) = parents[j - 1] {
                self.recompute_message((p, j))?;
            }
        }
        // Downward: messages away from the anchor, parents before children.
        for &j in &order {
            if let Some(p) = parents[j - 1] {
                self.recompute_message((j, p))?;
            }
        }
        Ok(())
    }

    /// DFS orientation from `start` (which need not be a leaf): parent
    /// pointers and a parent-before-child ordering.
    fn orientation_from(&self, start: usize) -> (Vec<Option<usize>>, Vec<usize>) {
        let n = self.tree.node_count();
        let mut parent = vec![None; n];
        let mut order = Vec::with_capacity(n);
        let mut visited = vec![false; n];
        visited[start - 1] = true;
        let mut stack = vec![start];
        while let Some(j) = stack.pop() {
            order.push(j);
            for &k in self.tree.neighbors(j).iter().rev() {
                if !visited[k - 1] {
                    visited[k - 1] = true;
                    parent[k - 1] = Some(j);
                    stack.push(k);
                }
            }
        }
        (parent, order)
    }

    /// Marginal projection of the scaled kernel tensor onto node `j`, always
    /// returned in linear domain.
    pub fn project_marginal(&self, j: usize) -> Result<Marginal<T>, ProjectionError> {
        let combined = self.gather_excluding(j, None)?;
        let lin = match self.domain {
            Domain::Linear => combined,
            Domain::Log => combined.mapv(T::exp),
        };
        Ok(Marginal::new(lin)?)
    }

    /// Total mass of the scaled kernel tensor.
    pub fn total_mass(&self) -> Result<T, ProjectionError> {
        Ok(self.project_marginal(1)?.mass())
    }

    /// Pairwise projection onto `(j1, j2)`: alternating diagonal factors
    /// (scalings joined with off-path messages) and kernels along the path.
    pub fn project_pair(&self, j1: usize, j2: usize) -> Result<Array2<T>, ProjectionError> {
        if j1 == j2 {
            return Err(ProjectionError::EqualNodes);
        }
        let path = self
            .tree
            .path_between(j1, j2)
            .expect("projection endpoints are tree nodes");
        // Diagonal factor at each path node: scaling times off-path messages;
        // an endpoint with no off-path neighbors contributes its scaling only
        // (an empty product is all-ones).
        let mut diags = Vec::with_capacity(path.len());
        for (idx, &node) in path.iter().enumerate() {
            let mut acc = match self.scalings.get(&node) {
                Some(v) => v.clone(),
                None => self.neutral(node),
            };
            for &l in self.tree.neighbors(node) {
                let on_path = (idx > 0 && l == path[idx - 1])
                    || (idx + 1 < path.len() && l == path[idx + 1]);
                if on_path {
                    continue;
                }
                if self.dirty.contains(&(node, l)) {
                    return Err(ProjectionError::StaleDependency(j1, j2, node, l));
                }
                let msg = &self.messages[&(node, l)];
                match self.domain {
                    Domain::Linear => acc = &acc * msg,
                    Domain::Log => acc = &acc + msg,
                }
            }
            diags.push(acc);
        }
        match self.domain {
            Domain::Linear => {
                // diag(d_1) K(p_1,p_2) diag(d_2) K(p_2,p_3) ... diag(d_L)
                let mut m = self.kernels.lin(path[0], path[1]).to_owned();
                for (i, di) in diags[0].iter().enumerate() {
                    m.row_mut(i).mapv_inplace(|x| x * *di);
                }
                for step in 1..path.len() - 1 {
                    for (c, dc) in diags[step].iter().enumerate() {
                        m.column_mut(c).mapv_inplace(|x| x * *dc);
                    }
                    m = m.dot(&self.kernels.lin(path[step], path[step + 1]));
                }
                let last = diags.last().unwrap();
                for (c, dc) in last.iter().enumerate() {
                    m.column_mut(c).mapv_inplace(|x| x * *dc);
                }
                Ok(m)
            }
            Domain::Log => {
                let mut m = self.kernels.log(path[0], path[1]).to_owned();
                for (i, di) in diags[0].iter().enumerate() {
                    m.row_mut(i).mapv_inplace(|x| x + *di);
                }
                for step in 1..path.len() - 1 {
                    for (c, dc) in diags[step].iter().enumerate() {
                        m.column_mut(c).mapv_inplace(|x| x + *dc);
                    }
                    m = log_matmul(&m, self.kernels.log(path[step], path[step + 1]));
                }
                let last = diags.last().unwrap();
                for (c, dc) in last.iter().enumerate() {
                    m.column_mut(c).mapv_inplace(|x| x + *dc);
                }
                Ok(m.mapv(T::exp))
            }
        }
    }
}
