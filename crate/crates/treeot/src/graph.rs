//! Undirected trees and their rooted-directed counterparts.
//!
//! Nodes are labeled by dense 1-based integers `1..=J`. Trees are immutable
//! after construction and safe to share across threads.

use std::collections::BTreeSet;

use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GraphError {
    #[error("node label {0} out of range 1..={1}")]
    UnknownNode(usize, usize),
    #[error("duplicate edge ({0}, {1})")]
    DuplicateEdge(usize, usize),
    #[error("edge set contains a cycle")]
    CycleDetected,
    #[error("graph is not connected")]
    Disconnected,
    #[error("root {0} is not a leaf")]
    RootNotLeaf(usize),
}

/// An undirected tree on nodes `1..=J`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tree {
    node_count: usize,
    /// Canonical edge list, each stored as `(min, max)`, sorted.
    edges: Vec<(usize, usize)>,
    /// Adjacency lists (ascending), indexed by `node - 1`.
    adj: Vec<Vec<usize>>,
}

impl Tree {
    /// Validates that `edge_list` forms a tree on `node_count` nodes.
    pub fn new(node_count: usize, edge_list: &[(usize, usize)]) -> Result<Self, GraphError> {
        if node_count == 0 {
            return Err(GraphError::UnknownNode(0, 0));
        }
        let mut seen = BTreeSet::new();
        let mut edges = Vec::with_capacity(edge_list.len());
        for &(a, b) in edge_list {
            if a == 0 || a > node_count {
                return Err(GraphError::UnknownNode(a, node_count));
            }
            if b == 0 || b > node_count {
                return Err(GraphError::UnknownNode(b, node_count));
            }
            if a == b {
                // A self-loop is the smallest possible cycle.
                return Err(GraphError::CycleDetected);
            }
            let e = (a.min(b), a.max(b));
            if !seen.insert(e) {
                return Err(GraphError::DuplicateEdge(e.0, e.1));
            }
            edges.push(e);
        }
        if edges.len() > node_count - 1 {
            return Err(GraphError::CycleDetected);
        }
        if edges.len() < node_count - 1 {
            return Err(GraphError::Disconnected);
        }
        let mut adj = vec![Vec::new(); node_count];
        for &(a, b) in &edges {
            adj[a - 1].push(b);
            adj[b - 1].push(a);
        }
        for list in &mut adj {
            list.sort_unstable();
        }
        // |E| = J - 1, so reaching every node from node 1 rules out cycles too;
        // failing to reach them means some component holds a cycle.
        let mut visited = vec![false; node_count];
        let mut stack = vec![1usize];
        visited[0] = true;
        let mut reached = 1;
        while let Some(j) = stack.pop() {
            for &k in &adj[j - 1] {
                if !visited[k - 1] {
                    visited[k - 1] = true;
                    reached += 1;
                    stack.push(k);
                }
            }
        }
        if reached < node_count {
            return Err(GraphError::CycleDetected);
        }
        edges.sort_unstable();
        Ok(Tree {
            node_count,
            edges,
            adj,
        })
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    /// Nodes `1..=J`.
    pub fn nodes(&self) -> impl Iterator<Item = usize> {
        1..=self.node_count
    }

    /// Canonical `(min, max)` edges, ascending.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn contains_edge(&self, a: usize, b: usize) -> bool {
        self.edges.binary_search(&(a.min(b), a.max(b))).is_ok()
    }

    pub fn neighbors(&self, j: usize) -> &[usize] {
        &self.adj[j - 1]
    }

    pub fn degree(&self, j: usize) -> usize {
        self.adj[j - 1].len()
    }

    /// Degree-1 nodes. The single node of a one-node tree counts as a leaf,
    /// so degenerate problems reduce to marginal pass-through.
    pub fn leaves(&self) -> Vec<usize> {
        if self.node_count == 1 {
            return vec![1];
        }
        self.nodes().filter(|&j| self.degree(j) == 1).collect()
    }

    pub fn is_leaf(&self, j: usize) -> bool {
        self.node_count == 1 || self.degree(j) == 1
    }

    /// The unique simple path `j1, ..., j2` (singleton if `j1 == j2`).
    pub fn path_between(&self, j1: usize, j2: usize) -> Result<Vec<usize>, GraphError> {
        for j in [j1, j2] {
            if j == 0 || j > self.node_count {
                return Err(GraphError::UnknownNode(j, self.node_count));
            }
        }
        if j1 == j2 {
            return Ok(vec![j1]);
        }
        // BFS from j1; parent pointers give the path.
        let mut parent = vec![0usize; self.node_count];
        let mut queue = std::collections::VecDeque::from([j1]);
        parent[j1 - 1] = j1;
        while let Some(j) = queue.pop_front() {
            if j == j2 {
                break;
            }
            for &k in self.neighbors(j) {
                if parent[k - 1] == 0 {
                    parent[k - 1] = j;
                    queue.push_back(k);
                }
            }
        }
        let mut path = vec![j2];
        let mut cur = j2;
        while cur != j1 {
            cur = parent[cur - 1];
            path.push(cur);
        }
        path.reverse();
        Ok(path)
    }

    /// Longest path length (in edges) between any two nodes.
    pub fn diameter(&self) -> usize {
        // Two BFS passes: farthest node from 1, then farthest from that.
        let far = |s: usize| -> (usize, usize) {
            let mut dist = vec![usize::MAX; self.node_count];
            dist[s - 1] = 0;
            let mut queue = std::collections::VecDeque::from([s]);
            let mut best = (s, 0);
            while let Some(j) = queue.pop_front() {
                for &k in self.neighbors(j) {
                    if dist[k - 1] == usize::MAX {
                        dist[k - 1] = dist[j - 1] + 1;
                        if dist[k - 1] > best.1 {
                            best = (k, dist[k - 1]);
                        }
                        queue.push_back(k);
                    }
                }
            }
            best
        };
        let (a, _) = far(1);
        far(a).1
    }

    /// Roots the tree at the leaf `r`.
    pub fn root_at(&self, r: usize) -> Result<RootedTree, GraphError> {
        if r == 0 || r > self.node_count {
            return Err(GraphError::UnknownNode(r, self.node_count));
        }
        if !self.is_leaf(r) {
            return Err(GraphError::RootNotLeaf(r));
        }
        let mut parent = vec![None; self.node_count];
        let mut children = vec![Vec::new(); self.node_count];
        let mut order = Vec::with_capacity(self.node_count);
        let mut stack = vec![r];
        let mut visited = vec![false; self.node_count];
        visited[r - 1] = true;
        while let Some(j) = stack.pop() {
            order.push(j);
            // Reverse so that children pop in ascending label order.
            for &k in self.neighbors(j).iter().rev() {
                if !visited[k - 1] {
                    visited[k - 1] = true;
                    parent[k - 1] = Some(j);
                    children[j - 1].push(k);
                    stack.push(k);
                }
            }
        }
        for list in &mut children {
            list.sort_unstable();
        }
        Ok(RootedTree {
            base: self.clone(),
            root: r,
            parent,
            children,
            preorder: order,
        })
    }

    /// All leaves, each once, ordered by first encounter in a depth-first
    /// Euler tour started at the lowest-numbered leaf (neighbors visited in
    /// ascending label order). Deterministic by construction.
    pub fn leaf_schedule(&self) -> Vec<usize> {
        let leaves: BTreeSet<usize> = self.leaves().into_iter().collect();
        let start = *leaves.iter().next().expect("tree has a leaf");
        self.euler_leaf_order(start, &leaves)
    }

    /// Euler-tour leaf order restricted to `targets`, starting at `start`.
    /// The tour walks the minimal subtree spanning `targets ∪ {start}`.
    pub(crate) fn euler_leaf_order(&self, start: usize, targets: &BTreeSet<usize>) -> Vec<usize> {
        let mut order = Vec::with_capacity(targets.len());
        let mut visited = vec![false; self.node_count];
        let mut stack = vec![start];
        visited[start - 1] = true;
        while let Some(j) = stack.pop() {
            if targets.contains(&j) {
                order.push(j);
            }
            for &k in self.neighbors(j).iter().rev() {
                if !visited[k - 1] {
                    visited[k - 1] = true;
                    stack.push(k);
                }
            }
        }
        order
    }
}

/// A tree rooted at a leaf, with edges directed away from the root.
#[derive(Debug, Clone)]
pub struct RootedTree {
    base: Tree,
    root: usize,
    parent: Vec<Option<usize>>,
    children: Vec<Vec<usize>>,
    preorder: Vec<usize>,
}

impl RootedTree {
    pub fn base(&self) -> &Tree {
        &self.base
    }

    pub fn root(&self) -> usize {
        self.root
    }

    /// Parent of `j`; `None` for the root.
    pub fn parent(&self, j: usize) -> Option<usize> {
        self.parent[j - 1]
    }

    pub fn children(&self, j: usize) -> &[usize] {
        &self.children[j - 1]
    }

    /// Nodes in a root-first order (every parent before its children).
    pub fn preorder(&self) -> &[usize] {
        &self.preorder
    }

    /// Directed edges `(parent, child)` in preorder.
    pub fn directed_edges(&self) -> Vec<(usize, usize)> {
        self.preorder
            .iter()
            .flat_map(|&j| self.children(j).iter().map(move |&k| (j, k)))
            .collect()
    }
}
