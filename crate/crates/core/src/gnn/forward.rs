use std::cell::Cell;
use std::sync::Arc;

use super::{BoundMlp, GnnError, GnnModel, EDGE_FEATURES, NODE_FEATURES};
use crate::diffcore::{DiffError, Tape, Tensor, Term, Var};
use crate::netgraph::{Graph, WeightVector};

/// Source/destination pair the network is asked about.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PairQuery {
    pub source: usize,
    pub destination: usize,
}

impl PairQuery {
    pub fn new(source: usize, destination: usize) -> Result<Self, GnnError> {
        if source == destination {
            return Err(GnnError::BadQuery(source, destination));
        }
        Ok(PairQuery {
            source,
            destination,
        })
    }

    fn check(&self, g: &Graph) -> Result<(), GnnError> {
        if self.source == self.destination
            || self.source >= g.node_count()
            || self.destination >= g.node_count()
        {
            return Err(GnnError::BadQuery(self.source, self.destination));
        }
        Ok(())
    }
}

/// Node latents `[n_v x H]` and edge latents `[n_e x H]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub nodes: Tensor,
    pub edges: Tensor,
}

/// Per-edge path probabilities for every ordered pair, rows in pair order.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftRoutingMatrix {
    node_count: usize,
    edge_count: usize,
    values: Vec<f64>,
}

impl SoftRoutingMatrix {
    pub fn new(node_count: usize, edge_count: usize, values: Vec<f64>) -> Result<Self, GnnError> {
        let rows = node_count * node_count.saturating_sub(1);
        if values.len() != rows * edge_count {
            return Err(GnnError::ShapeMismatch(format!(
                "soft routing matrix needs {} values, got {}",
                rows * edge_count,
                values.len()
            )));
        }
        Ok(SoftRoutingMatrix {
            node_count,
            edge_count,
            values,
        })
    }

    pub fn row_count(&self) -> usize {
        self.node_count * (self.node_count - 1)
    }

    pub fn edge_count(&self) -> usize {
        self.edge_count
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.edge_count..(i + 1) * self.edge_count]
    }

    /// Row-major `n_p x n_e` values.
    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Several graphs (or copies of one graph) laid side by side as one
/// disconnected graph.
#[derive(Debug, Clone)]
pub struct GraphBatch {
    pub node_count: usize,
    pub edge_count: usize,
    pub receivers: Arc<Vec<usize>>,
    pub senders: Arc<Vec<usize>>,
    /// `[node_count x 2]` query indicators.
    pub node_features: Tensor,
    /// `[edge_count x 1]` link weights.
    pub edge_features: Tensor,
    /// Start of each member's edges; one extra trailing entry.
    pub edge_offsets: Vec<usize>,
}

impl GraphBatch {
    pub fn from_queries(items: &[(&Graph, &WeightVector, PairQuery)]) -> Result<Self, GnnError> {
        let node_count: usize = items.iter().map(|(g, _, _)| g.node_count()).sum();
        let edge_count: usize = items.iter().map(|(g, _, _)| g.edge_count()).sum();
        let mut receivers = Vec::with_capacity(edge_count);
        let mut senders = Vec::with_capacity(edge_count);
        let mut nodes = vec![0.0; node_count * NODE_FEATURES];
        let mut weights = Vec::with_capacity(edge_count);
        let mut edge_offsets = Vec::with_capacity(items.len() + 1);
        let mut node_base = 0;
        for (g, w, q) in items {
            q.check(g)?;
            w.check_for(g)
                .map_err(|e| GnnError::ShapeMismatch(e.to_string()))?;
            edge_offsets.push(receivers.len());
            for e in g.edges() {
                receivers.push(node_base + e.receiver);
                senders.push(node_base + e.sender);
            }
            weights.extend_from_slice(w.values());
            nodes[(node_base + q.source) * NODE_FEATURES] = 1.0;
            nodes[(node_base + q.destination) * NODE_FEATURES + 1] = 1.0;
            node_base += g.node_count();
        }
        edge_offsets.push(edge_count);
        Ok(GraphBatch {
            node_count,
            edge_count,
            receivers: Arc::new(receivers),
            senders: Arc::new(senders),
            node_features: Tensor::new(vec![node_count, NODE_FEATURES], nodes)?,
            edge_features: Tensor::new(vec![edge_count, EDGE_FEATURES], weights)?,
            edge_offsets,
        })
    }
}

/// Batch layout for a chunk of query pairs on one graph. Edge inputs are
/// encoded once per graph and gathered into every copy.
#[derive(Debug, Clone)]
pub struct AllPairsLayout {
    pub pairs: Vec<(usize, usize)>,
    pub node_count: usize,
    pub edge_count: usize,
    pub receivers: Arc<Vec<usize>>,
    pub senders: Arc<Vec<usize>>,
    pub edge_gather: Arc<Vec<usize>>,
    pub node_features: Tensor,
}

impl AllPairsLayout {
    pub fn new(g: &Graph, pairs: &[(usize, usize)]) -> Result<Self, GnnError> {
        let (n_v, n_e) = (g.node_count(), g.edge_count());
        let mut receivers = Vec::with_capacity(pairs.len() * n_e);
        let mut senders = Vec::with_capacity(pairs.len() * n_e);
        let mut gather = Vec::with_capacity(pairs.len() * n_e);
        let mut nodes = vec![0.0; pairs.len() * n_v * NODE_FEATURES];
        for (j, &(u, v)) in pairs.iter().enumerate() {
            PairQuery::new(u, v)?.check(g)?;
            let base = j * n_v;
            for e in g.edges() {
                receivers.push(base + e.receiver);
                senders.push(base + e.sender);
                gather.push(e.index);
            }
            nodes[(base + u) * NODE_FEATURES] = 1.0;
            nodes[(base + v) * NODE_FEATURES + 1] = 1.0;
        }
        Ok(AllPairsLayout {
            pairs: pairs.to_vec(),
            node_count: pairs.len() * n_v,
            edge_count: pairs.len() * n_e,
            receivers: Arc::new(receivers),
            senders: Arc::new(senders),
            edge_gather: Arc::new(gather),
            node_features: Tensor::new(vec![pairs.len() * n_v, NODE_FEATURES], nodes)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct BoundBlock {
    pub edge_net: BoundMlp,
    pub node_net: BoundMlp,
}

/// Model parameters registered on one tape.
#[derive(Debug, Clone)]
pub struct BoundModel {
    pub node_encoder: BoundMlp,
    pub edge_encoder: BoundMlp,
    pub blocks: Vec<BoundBlock>,
    pub decoder: BoundMlp,
    pub readout_weight: Var,
    pub readout_bias: Var,
    rounds: usize,
}

impl BoundModel {
    pub(super) fn bind(model: &GnnModel, tape: &mut Tape, trainable: bool) -> Self {
        BoundModel {
            node_encoder: BoundMlp::bind(&model.node_encoder, tape, trainable),
            edge_encoder: BoundMlp::bind(&model.edge_encoder, tape, trainable),
            blocks: model
                .blocks
                .iter()
                .map(|b| BoundBlock {
                    edge_net: BoundMlp::bind(&b.edge_net, tape, trainable),
                    node_net: BoundMlp::bind(&b.node_net, tape, trainable),
                })
                .collect(),
            decoder: BoundMlp::bind(&model.decoder, tape, trainable),
            readout_weight: tape.input_shared(model.readout_weight.clone(), trainable),
            readout_bias: tape.input_shared(model.readout_bias.clone(), trainable),
            rounds: model.config().rounds,
        }
    }

    pub fn rounds(&self) -> usize {
        self.rounds
    }

    /// Parameter handles in [`GnnModel::named_params`] order.
    pub fn param_vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        self.node_encoder.vars(&mut out);
        self.edge_encoder.vars(&mut out);
        for b in &self.blocks {
            b.edge_net.vars(&mut out);
            b.node_net.vars(&mut out);
        }
        self.decoder.vars(&mut out);
        out.push(self.readout_weight);
        out.push(self.readout_bias);
        out
    }

    pub fn block_for_round(&self, round: usize) -> &BoundBlock {
        &self.blocks[round.min(self.blocks.len() - 1)]
    }

    pub fn encode_nodes(&self, tape: &mut Tape, features: Var) -> Result<Var, DiffError> {
        self.node_encoder.apply(tape, &[features])
    }

    pub fn encode_edges(&self, tape: &mut Tape, features: Var) -> Result<Var, DiffError> {
        self.edge_encoder.apply(tape, &[features])
    }

    /// One graph-network block: edges from `[edge, receiver, sender]`, then
    /// nodes from `[sum of updated incoming edges, node]`.
    #[allow(clippy::too_many_arguments)]
    pub fn process(
        &self,
        tape: &mut Tape,
        block: &BoundBlock,
        node_count: usize,
        receivers: &Arc<Vec<usize>>,
        senders: &Arc<Vec<usize>>,
        nodes: Var,
        edges: Var,
    ) -> Result<(Var, Var), DiffError> {
        let f_e = &block.edge_net;
        // The receiver/sender blocks of the first layer are applied per node
        // and then gathered, which equals applying them per edge.
        let recv_proj = tape.affine(nodes, f_e.first[1], None)?;
        let send_proj = tape.affine(nodes, f_e.first[2], None)?;
        let hidden = tape.linear_sum(
            &[
                Term::Affine(edges, f_e.first[0]),
                Term::Gathered(recv_proj, receivers.clone()),
                Term::Gathered(send_proj, senders.clone()),
            ],
            Some(f_e.first_bias),
            true,
        )?;
        let new_edges = f_e.finish(tape, hidden)?;

        let incoming = tape.scatter_add_rows(new_edges, receivers.clone(), node_count)?;
        let new_nodes = block.node_net.apply(tape, &[incoming, nodes])?;
        Ok((new_nodes, new_edges))
    }

    /// Edge probabilities `[E x 1]`.
    pub fn decode(&self, tape: &mut Tape, edges: Var) -> Result<Var, DiffError> {
        let h = self.decoder.apply(tape, &[edges])?;
        let logits = tape.affine(h, self.readout_weight, Some(self.readout_bias))?;
        tape.sigmoid(logits)
    }

    /// Encoded state through every round; returns the decoded probabilities
    /// of each round, or only of the last one.
    #[allow(clippy::too_many_arguments)]
    pub fn run(
        &self,
        tape: &mut Tape,
        node_count: usize,
        receivers: &Arc<Vec<usize>>,
        senders: &Arc<Vec<usize>>,
        mut nodes: Var,
        mut edges: Var,
        decode_every_round: bool,
    ) -> Result<Vec<Var>, DiffError> {
        let mut outputs = Vec::with_capacity(self.rounds);
        for t in 0..self.rounds {
            let block = self.block_for_round(t);
            (nodes, edges) =
                self.process(tape, block, node_count, receivers, senders, nodes, edges)?;
            if decode_every_round || t + 1 == self.rounds {
                outputs.push(self.decode(tape, edges)?);
            }
        }
        Ok(outputs)
    }

    /// Per-round probabilities for a batch of independent queries.
    pub fn forward_batch(
        &self,
        tape: &mut Tape,
        batch: &GraphBatch,
        decode_every_round: bool,
    ) -> Result<Vec<Var>, DiffError> {
        let nf = tape.constant(batch.node_features.clone());
        let ef = tape.constant(batch.edge_features.clone());
        let nodes = self.encode_nodes(tape, nf)?;
        let edges = self.encode_edges(tape, ef)?;
        self.run(
            tape,
            batch.node_count,
            &batch.receivers,
            &batch.senders,
            nodes,
            edges,
            decode_every_round,
        )
    }

    /// Final-round probabilities `[pairs x n_e]` for every pair in `layout`,
    /// as a function of the weight column `weights: [n_e x 1]`.
    pub fn forward_pairs(
        &self,
        tape: &mut Tape,
        layout: &AllPairsLayout,
        weights: Var,
    ) -> Result<Var, DiffError> {
        let nf = tape.constant(layout.node_features.clone());
        let nodes = self.encode_nodes(tape, nf)?;
        let encoded = self.encode_edges(tape, weights)?;
        let edges = tape.gather_rows(encoded, layout.edge_gather.clone())?;
        let out = self.run(
            tape,
            layout.node_count,
            &layout.receivers,
            &layout.senders,
            nodes,
            edges,
            false,
        )?;
        let last = *out.last().expect("at least one round");
        let n_e = layout.edge_count / layout.pairs.len().max(1);
        tape.reshape(last, vec![layout.pairs.len(), n_e])
    }
}

/// Pairs per batched chunk so that one chunk's tape stays near `budget`
/// bytes.
pub(crate) fn pairs_per_chunk_with(g: &Graph, model: &GnnModel, budget: usize) -> usize {
    let cfg = model.config();
    // About six H-wide f64 rows per node and per edge survive each round,
    // counting the backward sweep.
    let per_pair = 48 * (g.edge_count() + g.node_count()) * cfg.hidden * cfg.rounds.max(1);
    (budget / per_pair.max(1)).clamp(1, g.pair_count().max(1))
}

const DEFAULT_CHUNK_BUDGET: usize = 1 << 30;

thread_local! {
    static CHUNK_BUDGET: Cell<usize> = const { Cell::new(DEFAULT_CHUNK_BUDGET) };
}

/// Pairs per chunk under the current memory budget.
pub fn pairs_per_chunk(g: &Graph, model: &GnnModel) -> usize {
    pairs_per_chunk_with(g, model, CHUNK_BUDGET.with(Cell::get))
}

/// Runs `f` with the all-pairs chunk budget set to `bytes` on this thread.
pub fn with_chunk_budget<R>(bytes: usize, f: impl FnOnce() -> R) -> R {
    let old = CHUNK_BUDGET.with(|c| c.replace(bytes));
    let out = f();
    CHUNK_BUDGET.with(|c| c.set(old));
    out
}

fn weight_column(w: &WeightVector) -> Tensor {
    Tensor::new(vec![w.len(), EDGE_FEATURES], w.values().to_vec()).expect("column")
}

pub(super) fn encode_values(
    model: &GnnModel,
    g: &Graph,
    w: &WeightVector,
    q: PairQuery,
) -> Result<LatentState, GnnError> {
    let batch = GraphBatch::from_queries(&[(g, w, q)])?;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let nf = tape.constant(batch.node_features);
    let ef = tape.constant(batch.edge_features);
    let nodes = bound.encode_nodes(&mut tape, nf)?;
    let edges = bound.encode_edges(&mut tape, ef)?;
    Ok(LatentState {
        nodes: tape.value(nodes).clone(),
        edges: tape.value(edges).clone(),
    })
}

pub(super) fn process_values(
    model: &GnnModel,
    g: &Graph,
    state: &LatentState,
    block: usize,
) -> Result<LatentState, GnnError> {
    let h = model.config().hidden;
    if state.nodes.shape() != [g.node_count(), h] || state.edges.shape() != [g.edge_count(), h] {
        return Err(GnnError::ShapeMismatch(format!(
            "state {:?}/{:?} for a graph with {} nodes, {} edges, H = {}",
            state.nodes.shape(),
            state.edges.shape(),
            g.node_count(),
            g.edge_count(),
            h
        )));
    }
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let nodes = tape.constant(state.nodes.clone());
    let edges = tape.constant(state.edges.clone());
    let receivers = Arc::new(g.receivers());
    let senders = Arc::new(g.senders());
    let blk = bound.block_for_round(block).clone();
    let (n, e) = bound.process(
        &mut tape,
        &blk,
        g.node_count(),
        &receivers,
        &senders,
        nodes,
        edges,
    )?;
    Ok(LatentState {
        nodes: tape.value(n).clone(),
        edges: tape.value(e).clone(),
    })
}

pub(super) fn decode_values(model: &GnnModel, state: &LatentState) -> Result<Vec<f64>, GnnError> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let edges = tape.constant(state.edges.clone());
    let p = bound.decode(&mut tape, edges)?;
    Ok(tape.value(p).data().to_vec())
}

pub(super) fn predict_path(
    model: &GnnModel,
    g: &Graph,
    w: &WeightVector,
    q: PairQuery,
) -> Result<(Vec<f64>, Vec<Vec<f64>>), GnnError> {
    q.check(g)?;
    w.check_for(g)
        .map_err(|e| GnnError::ShapeMismatch(e.to_string()))?;
    let layout = AllPairsLayout::new(g, &[(q.source, q.destination)])?;
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let nf = tape.constant(layout.node_features.clone());
    let wv = tape.constant(weight_column(w));
    let nodes = bound.encode_nodes(&mut tape, nf)?;
    let edges = bound.encode_edges(&mut tape, wv)?;
    let edges = tape.gather_rows(edges, layout.edge_gather.clone())?;
    let outs = bound.run(
        &mut tape,
        layout.node_count,
        &layout.receivers,
        &layout.senders,
        nodes,
        edges,
        true,
    )?;
    let steps: Vec<Vec<f64>> = outs.iter().map(|&v| tape.value(v).data().to_vec()).collect();
    Ok((steps.last().cloned().unwrap_or_default(), steps))
}

pub(super) fn predict_all_pairs(
    model: &GnnModel,
    g: &Graph,
    w: &WeightVector,
) -> Result<SoftRoutingMatrix, GnnError> {
    w.check_for(g)
        .map_err(|e| GnnError::ShapeMismatch(e.to_string()))?;
    let pairs: Vec<(usize, usize)> = g.pairs().iter().collect();
    let chunk = pairs_per_chunk(g, model);
    let mut values = Vec::with_capacity(pairs.len() * g.edge_count());
    for part in pairs.chunks(chunk) {
        let layout = AllPairsLayout::new(g, part)?;
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let wv = tape.constant(weight_column(w));
        let p = bound.forward_pairs(&mut tape, &layout, wv)?;
        values.extend_from_slice(tape.value(p).data());
    }
    SoftRoutingMatrix::new(g.node_count(), g.edge_count(), values)
}
