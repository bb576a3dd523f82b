//! Network data model: directed topology, link weights, routing matrices and
//! exact link-utilization arithmetic.

use std::collections::HashSet;

use thiserror::Error;

/// Smallest admissible link weight.
pub const W_MIN: f64 = 1e-3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("graph is not strongly connected (node {0} cannot reach every other node)")]
    NotStronglyConnected(usize),
    #[error("duplicate directed edge {sender} -> {receiver}")]
    DuplicateEdge { sender: usize, receiver: usize },
    #[error("self-loop on node {0}")]
    SelfLoop(usize),
    #[error("link {link} has non-positive capacity {capacity}")]
    NonPositiveCapacity { link: usize, capacity: f64 },
    #[error("link {link} references node {node} but the graph has {node_count} nodes")]
    NodeOutOfRange {
        link: usize,
        node: usize,
        node_count: usize,
    },
    #[error("graph needs at least two nodes, got {0}")]
    TooFewNodes(usize),
    #[error("dimension mismatch: {what} has length {got}, expected {expected}")]
    DimensionMismatch {
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("invalid weight {value} on edge {edge}")]
    InvalidWeight { edge: usize, value: f64 },
    #[error("invalid demand {value} at pair {pair}")]
    InvalidDemand { pair: usize, value: f64 },
    #[error("empty vector")]
    EmptyVector,
}

/// One directed link `sender -> receiver`. `index` equals its position in
/// [`Graph::edges`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EdgeTriple {
    pub index: usize,
    pub receiver: usize,
    pub sender: usize,
}

/// Input description of a single link for [`Graph::build`].
#[derive(Debug, Clone, PartialEq)]
pub struct LinkSpec {
    pub a: usize,
    pub b: usize,
    pub capacity: f64,
    /// When false the link is expanded into `a -> b` and `b -> a`, each with
    /// the full capacity.
    pub directed: bool,
}

impl LinkSpec {
    pub fn undirected(a: usize, b: usize, capacity: f64) -> Self {
        LinkSpec {
            a,
            b,
            capacity,
            directed: false,
        }
    }

    pub fn directed(sender: usize, receiver: usize, capacity: f64) -> Self {
        LinkSpec {
            a: sender,
            b: receiver,
            capacity,
            directed: true,
        }
    }
}

/// A validated, strongly connected directed network.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    name: String,
    node_count: usize,
    edges: Vec<EdgeTriple>,
    capacities: Vec<f64>,
    out_edges: Vec<Vec<usize>>,
    in_edges: Vec<Vec<usize>>,
}

impl Graph {
    /// Builds a graph from link descriptions. Undirected links become two
    /// directed edges, emitted consecutively (`a -> b` first).
    pub fn build(name: &str, node_count: usize, links: &[LinkSpec]) -> Result<Graph, GraphError> {
        let mut directed = Vec::with_capacity(links.len() * 2);
        for (i, link) in links.iter().enumerate() {
            for node in [link.a, link.b] {
                if node >= node_count {
                    return Err(GraphError::NodeOutOfRange {
                        link: i,
                        node,
                        node_count,
                    });
                }
            }
            if !(link.capacity > 0.0) || !link.capacity.is_finite() {
                return Err(GraphError::NonPositiveCapacity {
                    link: i,
                    capacity: link.capacity,
                });
            }
            directed.push((link.a, link.b, link.capacity));
            if !link.directed {
                directed.push((link.b, link.a, link.capacity));
            }
        }
        Graph::from_directed(name, node_count, &directed)
    }

    /// Builds a graph from `(sender, receiver, capacity)` triples, preserving
    /// their order as edge indices.
    pub fn from_directed(
        name: &str,
        node_count: usize,
        links: &[(usize, usize, f64)],
    ) -> Result<Graph, GraphError> {
        if node_count < 2 {
            return Err(GraphError::TooFewNodes(node_count));
        }
        let mut seen = HashSet::with_capacity(links.len());
        let mut edges = Vec::with_capacity(links.len());
        let mut capacities = Vec::with_capacity(links.len());
        let mut out_edges = vec![Vec::new(); node_count];
        let mut in_edges = vec![Vec::new(); node_count];
        for (index, &(sender, receiver, capacity)) in links.iter().enumerate() {
            for node in [sender, receiver] {
                if node >= node_count {
                    return Err(GraphError::NodeOutOfRange {
                        link: index,
                        node,
                        node_count,
                    });
                }
            }
            if sender == receiver {
                return Err(GraphError::SelfLoop(sender));
            }
            if !(capacity > 0.0) || !capacity.is_finite() {
                return Err(GraphError::NonPositiveCapacity {
                    link: index,
                    capacity,
                });
            }
            if !seen.insert((sender, receiver)) {
                return Err(GraphError::DuplicateEdge { sender, receiver });
            }
            edges.push(EdgeTriple {
                index,
                receiver,
                sender,
            });
            capacities.push(capacity);
            out_edges[sender].push(index);
            in_edges[receiver].push(index);
        }
        let graph = Graph {
            name: name.to_string(),
            node_count,
            edges,
            capacities,
            out_edges,
            in_edges,
        };
        graph.check_strongly_connected()?;
        Ok(graph)
    }

    fn check_strongly_connected(&self) -> Result<(), GraphError> {
        // Node 0 must reach everyone along out-edges and be reached along in-edges.
        for forward in [true, false] {
            let mut seen = vec![false; self.node_count];
            let mut stack = vec![0usize];
            seen[0] = true;
            while let Some(x) = stack.pop() {
                let adj = if forward {
                    &self.out_edges[x]
                } else {
                    &self.in_edges[x]
                };
                for &k in adj {
                    let e = self.edges[k];
                    let y = if forward { e.receiver } else { e.sender };
                    if !seen[y] {
                        seen[y] = true;
                        stack.push(y);
                    }
                }
            }
            if let Some(missing) = seen.iter().position(|s| !s) {
                return Err(GraphError::NotStronglyConnected(if forward {
                    0
                } else {
                    missing
                }));
            }
        }
        Ok(())
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Number of ordered node pairs, `n_v (n_v - 1)`.
    pub fn pair_count(&self) -> usize {
        self.node_count * (self.node_count - 1)
    }

    pub fn edges(&self) -> &[EdgeTriple] {
        &self.edges
    }

    pub fn edge(&self, k: usize) -> EdgeTriple {
        self.edges[k]
    }

    pub fn capacities(&self) -> &[f64] {
        &self.capacities
    }

    /// Edge indices leaving `node`, in edge-index order.
    pub fn out_edges(&self, node: usize) -> &[usize] {
        &self.out_edges[node]
    }

    /// Edge indices entering `node`, in edge-index order.
    pub fn in_edges(&self, node: usize) -> &[usize] {
        &self.in_edges[node]
    }

    pub fn receivers(&self) -> Vec<usize> {
        self.edges.iter().map(|e| e.receiver).collect()
    }

    pub fn senders(&self) -> Vec<usize> {
        self.edges.iter().map(|e| e.sender).collect()
    }

    /// Index of the directed edge `sender -> receiver`, if present.
    pub fn find_edge(&self, sender: usize, receiver: usize) -> Option<usize> {
        self.out_edges[sender]
            .iter()
            .copied()
            .find(|&k| self.edges[k].receiver == receiver)
    }

    /// Same topology with every capacity replaced by `capacity`.
    pub fn with_uniform_capacity(&self, capacity: f64) -> Result<Graph, GraphError> {
        if !(capacity > 0.0) || !capacity.is_finite() {
            return Err(GraphError::NonPositiveCapacity { link: 0, capacity });
        }
        let mut g = self.clone();
        g.capacities.iter_mut().for_each(|c| *c = capacity);
        Ok(g)
    }

    /// Same topology with capacities multiplied by `factor`.
    pub fn with_scaled_capacity(&self, factor: f64) -> Result<Graph, GraphError> {
        if !(factor > 0.0) || !factor.is_finite() {
            return Err(GraphError::NonPositiveCapacity {
                link: 0,
                capacity: factor,
            });
        }
        let mut g = self.clone();
        g.capacities.iter_mut().for_each(|c| *c *= factor);
        Ok(g)
    }

    /// The fixed ordered-pair enumeration shared by routing matrices and
    /// demand vectors.
    pub fn pairs(&self) -> PairOrder {
        PairOrder::new(self.node_count)
    }
}

/// Lexicographic enumeration of ordered pairs `(u, v)`, `u != v`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PairOrder {
    node_count: usize,
}

impl PairOrder {
    pub fn new(node_count: usize) -> Self {
        PairOrder { node_count }
    }

    pub fn len(&self) -> usize {
        self.node_count * self.node_count.saturating_sub(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, u: usize, v: usize) -> Option<usize> {
        if u == v || u >= self.node_count || v >= self.node_count {
            return None;
        }
        Some(u * (self.node_count - 1) + if v > u { v - 1 } else { v })
    }

    pub fn pair(&self, i: usize) -> (usize, usize) {
        let row = self.node_count - 1;
        let u = i / row;
        let r = i % row;
        (u, if r >= u { r + 1 } else { r })
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (0..self.len()).map(move |i| self.pair(i))
    }
}

/// Positive link weights (costs), one per directed edge.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    /// Validates that every entry is finite and at least [`W_MIN`].
    pub fn new(values: Vec<f64>) -> Result<Self, GraphError> {
        if let Some((edge, &value)) = values
            .iter()
            .enumerate()
            .find(|(_, w)| !w.is_finite() || **w < W_MIN)
        {
            return Err(GraphError::InvalidWeight { edge, value });
        }
        Ok(WeightVector(values))
    }

    /// Projects arbitrary values onto `[floor, inf)`; non-finite entries are
    /// rejected.
    pub fn clamped(values: Vec<f64>, floor: f64) -> Result<Self, GraphError> {
        let floor = floor.max(W_MIN);
        Self::new(values.into_iter().map(|w| w.max(floor)).collect())
    }

    pub fn uniform(n_e: usize, value: f64) -> Result<Self, GraphError> {
        Self::new(vec![value; n_e])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn check_for(&self, g: &Graph) -> Result<(), GraphError> {
        expect_len("weight vector", self.0.len(), g.edge_count())
    }
}

/// Membership of each edge in one path.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PathVector {
    membership: Vec<bool>,
}

impl PathVector {
    pub fn from_edges(n_e: usize, edges: &[usize]) -> Self {
        let mut membership = vec![false; n_e];
        for &k in edges {
            membership[k] = true;
        }
        PathVector { membership }
    }

    pub fn from_membership(membership: Vec<bool>) -> Self {
        PathVector { membership }
    }

    pub fn membership(&self) -> &[bool] {
        &self.membership
    }

    pub fn len(&self) -> usize {
        self.membership.len()
    }

    pub fn is_empty(&self) -> bool {
        self.membership.is_empty()
    }

    pub fn hop_count(&self) -> usize {
        self.membership.iter().filter(|&&m| m).count()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.membership
            .iter()
            .map(|&m| if m { 1.0 } else { 0.0 })
            .collect()
    }

    /// `p · w^T`
    pub fn cost(&self, w: &WeightVector) -> f64 {
        self.membership
            .iter()
            .zip(w.values())
            .filter(|(m, _)| **m)
            .map(|(_, w)| *w)
            .sum()
    }

    /// Checks that the marked edges form one simple directed path from `u`
    /// to `v`, returning the edges in path order.
    pub fn validate(&self, g: &Graph, u: usize, v: usize) -> Result<Vec<usize>, String> {
        if self.membership.len() != g.edge_count() {
            return Err(format!(
                "path vector has length {}, graph has {} edges",
                self.membership.len(),
                g.edge_count()
            ));
        }
        if u == v {
            return Err("source equals destination".into());
        }
        let total = self.hop_count();
        let mut order = Vec::with_capacity(total);
        let mut visited = vec![false; g.node_count()];
        let mut at = u;
        visited[u] = true;
        while at != v {
            let mut next = g.out_edges(at).iter().filter(|&&k| self.membership[k]);
            let k = match (next.next(), next.next()) {
                (Some(&k), None) => k,
                (None, _) => return Err(format!("path stops at node {at}")),
                (Some(_), Some(_)) => return Err(format!("path branches at node {at}")),
            };
            order.push(k);
            at = g.edge(k).receiver;
            if visited[at] {
                return Err(format!("path revisits node {at}"));
            }
            visited[at] = true;
        }
        if order.len() != total {
            return Err(format!(
                "{} marked edges are not on the u-v walk",
                total - order.len()
            ));
        }
        Ok(order)
    }
}

/// One path per ordered pair, stacked in [`PairOrder`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoutingMatrix {
    node_count: usize,
    edge_count: usize,
    // Each row stored as its edge list in path order.
    paths: Vec<Vec<usize>>,
}

impl RoutingMatrix {
    pub fn from_paths(
        node_count: usize,
        edge_count: usize,
        paths: Vec<Vec<usize>>,
    ) -> Result<Self, GraphError> {
        let expected = PairOrder::new(node_count).len();
        expect_len("routing matrix", paths.len(), expected)?;
        if let Some(&bad) = paths.iter().flatten().find(|&&k| k >= edge_count) {
            return Err(GraphError::DimensionMismatch {
                what: "routing matrix edge index",
                got: bad,
                expected: edge_count,
            });
        }
        Ok(RoutingMatrix {
            node_count,
            edge_count,
            paths,
        })
    }

    pub fn pair_order(&self) -> PairOrder {
        PairOrder::new(self.node_count)
    }

    pub fn row_count(&self) -> usize {
        self.paths.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edge_count
    }

    /// Edges of row `i` in path order.
    pub fn path_edges(&self, i: usize) -> &[usize] {
        &self.paths[i]
    }

    pub fn row(&self, i: usize) -> PathVector {
        PathVector::from_edges(self.edge_count, &self.paths[i])
    }

    /// Dense `n_p x n_e` 0/1 matrix, row-major.
    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.paths.len() * self.edge_count];
        for (i, path) in self.paths.iter().enumerate() {
            for &k in path {
                out[i * self.edge_count + k] = 1.0;
            }
        }
        out
    }
}

/// Traffic volume per ordered pair, aligned with [`PairOrder`].
#[derive(Debug, Clone, PartialEq)]
pub struct DemandVector(Vec<f64>);

impl DemandVector {
    pub fn new(values: Vec<f64>) -> Result<Self, GraphError> {
        if let Some((pair, &value)) = values
            .iter()
            .enumerate()
            .find(|(_, d)| !d.is_finite() || **d < 0.0)
        {
            return Err(GraphError::InvalidDemand { pair, value });
        }
        Ok(DemandVector(values))
    }

    pub fn zeros(n_p: usize) -> Self {
        DemandVector(vec![0.0; n_p])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn scaled(&self, factor: f64) -> Result<Self, GraphError> {
        Self::new(self.0.iter().map(|d| d * factor).collect())
    }

    pub fn check_for(&self, g: &Graph) -> Result<(), GraphError> {
        expect_len("demand vector", self.0.len(), g.pair_count())
    }
}

/// Per-link load relative to capacity. Entries above 1 denote overload.
#[derive(Debug, Clone, PartialEq)]
pub struct UtilizationVector(Vec<f64>);

impl UtilizationVector {
    pub fn new(values: Vec<f64>) -> Self {
        UtilizationVector(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn max(&self) -> Result<f64, GraphError> {
        max_utilization(self)
    }
}

/// Default operator configuration: `w_k = max(c) / c_k`.
pub fn default_ospf_weights(g: &Graph) -> WeightVector {
    let c_ref = g.capacities().iter().copied().fold(f64::MIN, f64::max);
    WeightVector(g.capacities().iter().map(|c| c_ref / c).collect())
}

/// `rho_k = (sum_i d_i P[i,k]) / c_k`, accumulated in pair order.
pub fn utilization(
    g: &Graph,
    routing: &RoutingMatrix,
    demands: &DemandVector,
) -> Result<UtilizationVector, GraphError> {
    expect_len("routing matrix rows", routing.row_count(), g.pair_count())?;
    expect_len("routing matrix columns", routing.edge_count(), g.edge_count())?;
    demands.check_for(g)?;
    let mut load = vec![0.0; g.edge_count()];
    for (path, &d) in routing.paths.iter().zip(demands.values()) {
        for &k in path {
            load[k] += d;
        }
    }
    for (l, c) in load.iter_mut().zip(g.capacities()) {
        *l /= c;
    }
    Ok(UtilizationVector(load))
}

pub fn max_utilization(rho: &UtilizationVector) -> Result<f64, GraphError> {
    rho.0
        .iter()
        .copied()
        .reduce(f64::max)
        .ok_or(GraphError::EmptyVector)
}

fn expect_len(what: &'static str, got: usize, expected: usize) -> Result<(), GraphError> {
    if got != expected {
        return Err(GraphError::DimensionMismatch {
            what,
            got,
            expected,
        });
    }
    Ok(())
}
