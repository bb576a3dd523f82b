//! Weighted shortest paths (Dijkstra) with a deterministic tie-break.
//!
//! Nodes are settled in `(distance, node index)` order. Among equal-cost
//! predecessors of a node the one with the lowest sender index wins, so the
//! chosen paths form one shortest-path tree per source and depend only on
//! the topology, the node numbering and the relative weights.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use thiserror::Error;

use crate::netgraph::{Graph, GraphError, PathVector, RoutingMatrix, WeightVector};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RoutingError {
    #[error("node {0} is unreachable from node {1}")]
    Unreachable(usize, usize),
    #[error("source and destination are both node {0}")]
    SameEndpoints(usize),
    #[error("node {0} out of range")]
    BadNode(usize),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Distances and tree edges from one source.
#[derive(Debug, Clone, PartialEq)]
pub struct ShortestPathTree {
    pub source: usize,
    pub dist: Vec<f64>,
    /// Edge by which each node is reached; `None` for the source.
    pub pred_edge: Vec<Option<usize>>,
}

impl ShortestPathTree {
    /// Edges from the source to `target` in path order.
    pub fn path_to(&self, g: &Graph, target: usize) -> Vec<usize> {
        let mut edges = Vec::new();
        let mut at = target;
        while let Some(k) = self.pred_edge[at] {
            edges.push(k);
            at = g.edge(k).sender;
        }
        edges.reverse();
        edges
    }
}

#[derive(Debug, PartialEq)]
struct Entry {
    dist: f64,
    node: usize,
}

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        // Min-heap on (dist, node).
        other
            .dist
            .total_cmp(&self.dist)
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

pub fn shortest_path_tree(
    g: &Graph,
    w: &WeightVector,
    source: usize,
) -> Result<ShortestPathTree, RoutingError> {
    if source >= g.node_count() {
        return Err(RoutingError::BadNode(source));
    }
    w.check_for(g)?;
    let weights = w.values();
    let n = g.node_count();
    let mut dist = vec![f64::INFINITY; n];
    let mut pred_edge: Vec<Option<usize>> = vec![None; n];
    let mut settled = vec![false; n];
    let mut heap = BinaryHeap::with_capacity(g.edge_count());
    dist[source] = 0.0;
    heap.push(Entry {
        dist: 0.0,
        node: source,
    });
    while let Some(Entry { dist: d, node: x }) = heap.pop() {
        if settled[x] || d > dist[x] {
            continue;
        }
        settled[x] = true;
        for &k in g.out_edges(x) {
            let y = g.edge(k).receiver;
            if settled[y] {
                continue;
            }
            let candidate = d + weights[k];
            let better = candidate < dist[y]
                || (candidate == dist[y]
                    && pred_edge[y].is_some_and(|p| x < g.edge(p).sender));
            if better {
                let improved = candidate < dist[y];
                dist[y] = candidate;
                pred_edge[y] = Some(k);
                if improved {
                    heap.push(Entry {
                        dist: candidate,
                        node: y,
                    });
                }
            }
        }
    }
    if let Some(missing) = settled.iter().position(|s| !s) {
        return Err(RoutingError::Unreachable(missing, source));
    }
    Ok(ShortestPathTree {
        source,
        dist,
        pred_edge,
    })
}

pub fn path_vector(
    g: &Graph,
    w: &WeightVector,
    u: usize,
    v: usize,
) -> Result<PathVector, RoutingError> {
    if u == v {
        return Err(RoutingError::SameEndpoints(u));
    }
    if v >= g.node_count() {
        return Err(RoutingError::BadNode(v));
    }
    let tree = shortest_path_tree(g, w, u)?;
    Ok(PathVector::from_edges(g.edge_count(), &tree.path_to(g, v)))
}

/// All ordered-pair shortest paths in the graph's pair order.
pub fn routing_matrix(g: &Graph, w: &WeightVector) -> Result<RoutingMatrix, RoutingError> {
    let n = g.node_count();
    let mut paths = Vec::with_capacity(g.pair_count());
    for u in 0..n {
        let tree = shortest_path_tree(g, w, u)?;
        for v in (0..n).filter(|&v| v != u) {
            paths.push(tree.path_to(g, v));
        }
    }
    Ok(RoutingMatrix::from_paths(n, g.edge_count(), paths)?)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::netgraph::LinkSpec;
    use proptest::prelude::*;

    /// Edges 0->1 (1), 1->2 (1), 0->2 (3) plus heavy reverse edges.
    pub(crate) fn triangle() -> (Graph, WeightVector) {
        let g = Graph::from_directed(
            "tri",
            3,
            &[
                (0, 1, 1.0),
                (1, 2, 1.0),
                (0, 2, 1.0),
                (1, 0, 1.0),
                (2, 1, 1.0),
                (2, 0, 1.0),
            ],
        )
        .unwrap();
        let w = WeightVector::new(vec![1.0, 1.0, 3.0, 10.0, 10.0, 10.0]).unwrap();
        (g, w)
    }

    /// Every simple path from u to v as an edge list (brute force).
    pub(crate) fn simple_paths(g: &Graph, u: usize, v: usize) -> Vec<Vec<usize>> {
        fn walk(
            g: &Graph,
            at: usize,
            v: usize,
            seen: &mut Vec<bool>,
            path: &mut Vec<usize>,
            out: &mut Vec<Vec<usize>>,
        ) {
            if at == v {
                out.push(path.clone());
                return;
            }
            for &k in g.out_edges(at) {
                let y = g.edge(k).receiver;
                if !seen[y] {
                    seen[y] = true;
                    path.push(k);
                    walk(g, y, v, seen, path, out);
                    path.pop();
                    seen[y] = false;
                }
            }
        }
        let mut seen = vec![false; g.node_count()];
        seen[u] = true;
        let mut out = Vec::new();
        walk(g, u, v, &mut seen, &mut Vec::new(), &mut out);
        out
    }

    #[test]
    fn triangle_examples() {
        let (g, w) = triangle();
        let tree = shortest_path_tree(&g, &w, 0).unwrap();
        assert_eq!(tree.dist[0], 0.0);
        assert_eq!(tree.dist[2], 2.0);
        assert_eq!(tree.pred_edge[2], Some(1));
        // Oracle: cheapest of all simple paths 0 -> 2.
        let best = simple_paths(&g, 0, 2)
            .into_iter()
            .map(|p| p.iter().map(|&k| w.values()[k]).sum::<f64>())
            .fold(f64::INFINITY, f64::min);
        assert_eq!(best, 2.0);
        let p = path_vector(&g, &w, 0, 2).unwrap();
        assert_eq!(&p.membership()[..3], &[true, true, false]);
        assert_eq!(p.cost(&w), tree.dist[2]);
        assert_eq!(
            path_vector(&g, &w, 1, 1),
            Err(RoutingError::SameEndpoints(1))
        );
    }

    #[test]
    fn two_node_graph() {
        let g = Graph::from_directed("two", 2, &[(0, 1, 1.0), (1, 0, 1.0)]).unwrap();
        let w = WeightVector::new(vec![5.0, 1.0]).unwrap();
        let tree = shortest_path_tree(&g, &w, 0).unwrap();
        assert_eq!(tree.dist[1], 5.0);
        assert_eq!(tree.pred_edge[1], Some(0));
        let p = path_vector(&g, &w, 0, 1).unwrap();
        assert_eq!(p.membership(), &[true, false]);
    }

    #[test]
    fn ring_tie_break_prefers_lower_predecessor() {
        let g = Graph::build(
            "ring",
            4,
            &(0..4)
                .map(|i| LinkSpec::undirected(i, (i + 1) % 4, 1.0))
                .collect::<Vec<_>>(),
        )
        .unwrap();
        let w = WeightVector::uniform(g.edge_count(), 1.0).unwrap();
        let costs: Vec<f64> = simple_paths(&g, 0, 2)
            .iter()
            .map(|p| p.len() as f64)
            .collect();
        assert_eq!(costs, vec![2.0, 2.0]);
        let p = path_vector(&g, &w, 0, 2).unwrap();
        let order = p.validate(&g, 0, 2).unwrap();
        // Predecessors of 2 are 1 and 3; node 1 wins.
        assert_eq!(g.edge(order[1]).sender, 1);
        assert_eq!(p, path_vector(&g, &w, 0, 2).unwrap());
    }

    #[test]
    fn routing_matrix_rows() {
        let (g, w) = triangle();
        let rm = routing_matrix(&g, &w).unwrap();
        assert_eq!(rm.row_count(), 6);
        let order = g.pairs();
        assert_eq!(
            &rm.row(order.index(0, 2).unwrap()).membership()[..3],
            &[true, true, false]
        );
        assert_eq!(
            &rm.row(order.index(0, 1).unwrap()).membership()[..3],
            &[true, false, false]
        );
    }

    #[test]
    fn star_routes_through_hub() {
        let g = Graph::build(
            "star",
            5,
            &(1..5).map(|i| LinkSpec::undirected(0, i, 1.0)).collect::<Vec<_>>(),
        )
        .unwrap();
        let w = WeightVector::uniform(g.edge_count(), 1.0).unwrap();
        let rm = routing_matrix(&g, &w).unwrap();
        for (i, (u, v)) in g.pairs().iter().enumerate() {
            let edges = rm.path_edges(i);
            if u != 0 && v != 0 {
                assert_eq!(edges.len(), 2);
                assert_eq!(g.edge(edges[0]).receiver, 0);
            }
        }
    }

    pub(crate) fn random_graph(n: usize, extra: &[(usize, usize)]) -> Graph {
        let mut links: Vec<LinkSpec> = (1..n).map(|i| LinkSpec::undirected(i - 1, i, 1.0)).collect();
        let mut present: std::collections::HashSet<(usize, usize)> =
            (1..n).map(|i| (i - 1, i)).collect();
        for &(a, b) in extra {
            let (a, b) = (a % n, b % n);
            let key = (a.min(b), a.max(b));
            if a != b && present.insert(key) {
                links.push(LinkSpec::undirected(key.0, key.1, 1.0));
            }
        }
        Graph::build("random", n, &links).unwrap()
    }

    proptest! {
        #[test]
        fn optimal_against_enumeration(
            n in 2usize..7,
            extra in proptest::collection::vec((0usize..6, 0usize..6), 0..8),
            weights in proptest::collection::vec(1u32..10, 40),
        ) {
            let g = random_graph(n, &extra);
            let w = WeightVector::new(
                (0..g.edge_count()).map(|k| f64::from(weights[k])).collect(),
            ).unwrap();
            for (u, v) in g.pairs().iter() {
                let p = path_vector(&g, &w, u, v).unwrap();
                prop_assert!(p.validate(&g, u, v).is_ok());
                let best = simple_paths(&g, u, v)
                    .iter()
                    .map(|path| path.iter().map(|&k| w.values()[k]).sum::<f64>())
                    .fold(f64::INFINITY, f64::min);
                prop_assert_eq!(p.cost(&w), best);
            }
        }

        #[test]
        fn routing_is_scale_invariant(
            n in 2usize..7,
            extra in proptest::collection::vec((0usize..6, 0usize..6), 0..8),
            weights in proptest::collection::vec(1u32..5, 40),
            scale in prop::sample::select(vec![0.5, 2.0, 4.0, 0.25, 8.0]),
        ) {
            // Power-of-two scales keep integer sums exact, so ties survive.
            let g = random_graph(n, &extra);
            let base: Vec<f64> = (0..g.edge_count()).map(|k| f64::from(weights[k])).collect();
            let w = WeightVector::new(base.clone()).unwrap();
            let ws = WeightVector::new(base.iter().map(|x| x * scale).collect()).unwrap();
            prop_assert_eq!(routing_matrix(&g, &w).unwrap(), routing_matrix(&g, &ws).unwrap());
        }

        #[test]
        fn chosen_paths_have_the_subpath_property(
            n in 2usize..7,
            extra in proptest::collection::vec((0usize..6, 0usize..6), 0..8),
            weights in proptest::collection::vec(1u32..4, 40),
        ) {
            let g = random_graph(n, &extra);
            let w = WeightVector::new(
                (0..g.edge_count()).map(|k| f64::from(weights[k])).collect(),
            ).unwrap();
            let rm = routing_matrix(&g, &w).unwrap();
            let order = g.pairs();
            for (i, (u, _)) in order.iter().enumerate() {
                let path = rm.path_edges(i);
                for cut in 1..path.len() {
                    let m = g.edge(path[cut - 1]).receiver;
                    let prefix = rm.path_edges(order.index(u, m).unwrap());
                    prop_assert_eq!(prefix, &path[..cut]);
                }
            }
        }
    }
}
