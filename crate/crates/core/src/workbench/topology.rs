use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::WorkbenchError;
use crate::netgraph::{Graph, LinkSpec, WeightVector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkEntry {
    pub source: String,
    pub target: String,
    pub capacity: f64,
    #[serde(default)]
    pub directed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<f64>,
}

/// A named topology as read from disk, before it becomes a [`Graph`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologySpec {
    pub name: String,
    pub nodes: Vec<NodeSpec>,
    pub links: Vec<LinkEntry>,
}

/// Which capacities the graph gets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CapacityMode {
    /// Every link has capacity 1.
    #[default]
    Unit,
    /// Capacities as written in the file.
    FromFile,
}

impl TopologySpec {
    /// Checks references and capacities.
    pub fn validate(&self) -> Result<(), WorkbenchError> {
        let mut seen = HashMap::new();
        for (i, n) in self.nodes.iter().enumerate() {
            if seen.insert(n.id.as_str(), i).is_some() {
                return Err(WorkbenchError::BadReference(format!("duplicate node id {:?}", n.id)));
            }
        }
        for (i, l) in self.links.iter().enumerate() {
            for end in [&l.source, &l.target] {
                if !seen.contains_key(end.as_str()) {
                    return Err(WorkbenchError::BadReference(format!(
                        "link {i} references unknown node {end:?}"
                    )));
                }
            }
            if !(l.capacity > 0.0) || !l.capacity.is_finite() {
                return Err(WorkbenchError::Invalid(format!(
                    "link {i} has capacity {}",
                    l.capacity
                )));
            }
            if let Some(w) = l.weight {
                if !(w > 0.0) || !w.is_finite() {
                    return Err(WorkbenchError::Invalid(format!("link {i} has weight {w}")));
                }
            }
        }
        Ok(())
    }

    fn index(&self) -> HashMap<&str, usize> {
        self.nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.id.as_str(), i))
            .collect()
    }

    pub fn node_ids(&self) -> Vec<String> {
        self.nodes.iter().map(|n| n.id.clone()).collect()
    }

    /// Directed graph; undirected links become two opposite edges.
    pub fn to_graph(&self, mode: CapacityMode) -> Result<Graph, WorkbenchError> {
        self.validate()?;
        let idx = self.index();
        let links: Vec<LinkSpec> = self
            .links
            .iter()
            .map(|l| LinkSpec {
                a: idx[l.source.as_str()],
                b: idx[l.target.as_str()],
                capacity: match mode {
                    CapacityMode::Unit => 1.0,
                    CapacityMode::FromFile => l.capacity,
                },
                directed: l.directed,
            })
            .collect();
        Ok(Graph::build(&self.name, self.nodes.len(), &links)?)
    }

    /// Weights preset in the file, in graph edge order, when every link has
    /// one.
    pub fn preset_weights(&self) -> Option<WeightVector> {
        let mut out = Vec::new();
        for l in &self.links {
            let w = l.weight?;
            out.push(w);
            if !l.directed {
                out.push(w);
            }
        }
        WeightVector::new(out).ok()
    }

    /// Spec for an existing graph; opposite edge pairs with equal capacity
    /// collapse into one undirected link.
    pub fn from_graph(g: &Graph) -> Self {
        let mut links = Vec::new();
        let mut used = vec![false; g.edge_count()];
        for e in g.edges() {
            if used[e.index] {
                continue;
            }
            used[e.index] = true;
            let cap = g.capacities()[e.index];
            let back = g
                .find_edge(e.receiver, e.sender)
                .filter(|&k| !used[k] && g.capacities()[k] == cap && k == e.index + 1);
            if let Some(k) = back {
                used[k] = true;
            }
            links.push(LinkEntry {
                source: e.sender.to_string(),
                target: e.receiver.to_string(),
                capacity: cap,
                directed: back.is_none(),
                weight: None,
            });
        }
        TopologySpec {
            name: g.name().to_string(),
            nodes: (0..g.node_count())
                .map(|i| NodeSpec {
                    id: i.to_string(),
                    label: None,
                })
                .collect(),
            links,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("plain data serializes");
        s.push('\n');
        s
    }
}

/// Parses and validates a JSON topology document.
pub fn parse_topology_json(text: &str) -> Result<TopologySpec, WorkbenchError> {
    let spec: TopologySpec = serde_json::from_str(text).map_err(classify)?;
    spec.validate()?;
    Ok(spec)
}

fn classify(e: serde_json::Error) -> WorkbenchError {
    let msg = e.to_string();
    let quoted = |m: &str| m.split('`').nth(1).unwrap_or_default().to_string();
    if msg.starts_with("unknown field") {
        WorkbenchError::UnknownField(quoted(&msg))
    } else if msg.starts_with("missing field") {
        WorkbenchError::MissingField(quoted(&msg))
    } else {
        WorkbenchError::Syntax {
            line: e.line(),
            message: msg,
        }
    }
}
