//! Encode-process-decode graph network that predicts, for a query pair
//! `(u, v)` and link weights `w`, the probability that each edge lies on the
//! weighted shortest path from `u` to `v`.
//!
//! Inputs are the per-edge weight `[w_k]` and per-node indicators
//! `[u == i, v == i]`. Each round updates every edge from its own latent and
//! its receiver and sender node latents, sums updated edges into their
//! receiver, and updates every node from that sum and its own latent. A
//! shared decoder turns edge latents into probabilities after each round.

mod checkpoint;
mod forward;

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::diffcore::{DiffError, Tape, Tensor, Term, Var};

pub use checkpoint::{CheckpointError, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use forward::{pairs_per_chunk, with_chunk_budget};
pub use forward::{
    AllPairsLayout, BoundBlock, BoundModel, GraphBatch, LatentState, PairQuery, SoftRoutingMatrix,
};

/// Width of the per-node input `[I(u = i), I(v = i)]`.
pub const NODE_FEATURES: usize = 2;
/// Width of the per-edge input `[w_k]`.
pub const EDGE_FEATURES: usize = 1;

#[derive(Debug, Error)]
pub enum GnnError {
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("invalid query ({0}, {1})")]
    BadQuery(usize, usize),
    #[error("invalid model configuration: {0}")]
    BadConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GnnConfig {
    /// Latent width `H`.
    pub hidden: usize,
    /// Message-passing rounds `T`.
    pub rounds: usize,
    /// One processor block reused every round instead of `T` distinct ones.
    pub shared_processor: bool,
}

impl Default for GnnConfig {
    fn default() -> Self {
        GnnConfig {
            hidden: 128,
            rounds: 8,
            shared_processor: false,
        }
    }
}

impl GnnConfig {
    pub fn validate(&self) -> Result<(), GnnError> {
        if self.hidden == 0 || self.rounds == 0 {
            return Err(GnnError::BadConfig(format!(
                "hidden = {}, rounds = {}; both must be at least 1",
                self.hidden, self.rounds
            )));
        }
        Ok(())
    }

    pub fn block_count(&self) -> usize {
        if self.shared_processor {
            1
        } else {
            self.rounds
        }
    }
}

/// Two dense layers with a ReLU in between, followed by layer
/// normalization. The first layer may read several input blocks; it is
/// equivalent to one layer over their concatenation.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub first: Vec<Arc<Tensor>>,
    pub first_bias: Arc<Tensor>,
    pub second: Arc<Tensor>,
    pub second_bias: Arc<Tensor>,
    pub norm_gain: Arc<Tensor>,
    pub norm_bias: Arc<Tensor>,
}

impl Mlp {
    fn init(rng: &mut ChaCha8Rng, inputs: &[usize], hidden: usize) -> Self {
        let fan_in: usize = inputs.iter().sum();
        let first = inputs
            .iter()
            .map(|&w| Arc::new(uniform(rng, &[hidden, w], fan_in)))
            .collect();
        Mlp {
            first,
            first_bias: Arc::new(Tensor::zeros(&[hidden])),
            second: Arc::new(uniform(rng, &[hidden, hidden], hidden)),
            second_bias: Arc::new(Tensor::zeros(&[hidden])),
            norm_gain: Arc::new(Tensor::filled(&[hidden], 1.0)),
            norm_bias: Arc::new(Tensor::zeros(&[hidden])),
        }
    }

    fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Arc<Tensor>)>) {
        for (i, w) in self.first.iter().enumerate() {
            out.push((format!("{prefix}.layer1.weight{i}"), w));
        }
        out.push((format!("{prefix}.layer1.bias"), &self.first_bias));
        out.push((format!("{prefix}.layer2.weight"), &self.second));
        out.push((format!("{prefix}.layer2.bias"), &self.second_bias));
        out.push((format!("{prefix}.norm.gain"), &self.norm_gain));
        out.push((format!("{prefix}.norm.bias"), &self.norm_bias));
    }

    fn slots_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Arc<Tensor>>) {
        out.extend(self.first.iter_mut());
        out.push(&mut self.first_bias);
        out.push(&mut self.second);
        out.push(&mut self.second_bias);
        out.push(&mut self.norm_gain);
        out.push(&mut self.norm_bias);
    }
}

/// Edge update `f^e` (inputs: edge, receiver node, sender node) and node
/// update `f^v` (inputs: summed incoming edges, node).
#[derive(Debug, Clone, PartialEq)]
pub struct ProcessorBlock {
    pub edge_net: Mlp,
    pub node_net: Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GnnModel {
    config: GnnConfig,
    pub node_encoder: Mlp,
    pub edge_encoder: Mlp,
    pub blocks: Vec<ProcessorBlock>,
    pub decoder: Mlp,
    pub readout_weight: Arc<Tensor>,
    pub readout_bias: Arc<Tensor>,
}

impl GnnModel {
    /// Fresh model with uniform `±1/sqrt(fan_in)` weights, zero biases and
    /// unit normalization gains.
    pub fn new(config: GnnConfig, seed: u64) -> Result<Self, GnnError> {
        config.validate()?;
        let h = config.hidden;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let node_encoder = Mlp::init(&mut rng, &[NODE_FEATURES], h);
        let edge_encoder = Mlp::init(&mut rng, &[EDGE_FEATURES], h);
        let blocks = (0..config.block_count())
            .map(|_| ProcessorBlock {
                edge_net: Mlp::init(&mut rng, &[h, h, h], h),
                node_net: Mlp::init(&mut rng, &[h, h], h),
            })
            .collect();
        let decoder = Mlp::init(&mut rng, &[h], h);
        Ok(GnnModel {
            config,
            node_encoder,
            edge_encoder,
            blocks,
            decoder,
            readout_weight: Arc::new(uniform(&mut rng, &[1, h], h)),
            readout_bias: Arc::new(Tensor::zeros(&[1])),
        })
    }

    pub fn config(&self) -> GnnConfig {
        self.config
    }

    /// Every parameter with its checkpoint name, in a fixed order.
    pub fn named_params(&self) -> Vec<(String, &Arc<Tensor>)> {
        let mut out = Vec::new();
        self.node_encoder.named("encoder.node", &mut out);
        self.edge_encoder.named("encoder.edge", &mut out);
        for (i, b) in self.blocks.iter().enumerate() {
            b.edge_net.named(&format!("processor.{i}.edge"), &mut out);
            b.node_net.named(&format!("processor.{i}.node"), &mut out);
        }
        self.decoder.named("decoder", &mut out);
        out.push(("readout.weight".into(), &self.readout_weight));
        out.push(("readout.bias".into(), &self.readout_bias));
        out
    }

    /// Mutable parameter slots in the order of [`GnnModel::named_params`].
    pub fn param_slots_mut(&mut self) -> Vec<&mut Arc<Tensor>> {
        let mut out = Vec::new();
        self.node_encoder.slots_mut(&mut out);
        self.edge_encoder.slots_mut(&mut out);
        for b in &mut self.blocks {
            b.edge_net.slots_mut(&mut out);
            b.node_net.slots_mut(&mut out);
        }
        self.decoder.slots_mut(&mut out);
        out.push(&mut self.readout_weight);
        out.push(&mut self.readout_bias);
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named_params().iter().all(|(_, t)| t.is_finite())
    }

    /// Registers every parameter on `tape`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundModel {
        BoundModel::bind(self, tape, trainable)
    }

    /// Node and edge latents after encoding, for one query.
    pub fn encode(
        &self,
        g: &crate::netgraph::Graph,
        w: &crate::netgraph::WeightVector,
        q: PairQuery,
    ) -> Result<LatentState, GnnError> {
        forward::encode_values(self, g, w, q)
    }

    /// One message-passing round with processor block `block`.
    pub fn process_step(
        &self,
        g: &crate::netgraph::Graph,
        state: &LatentState,
        block: usize,
    ) -> Result<LatentState, GnnError> {
        forward::process_values(self, g, state, block)
    }

    /// Per-edge probabilities from edge latents.
    pub fn decode(&self, state: &LatentState) -> Result<Vec<f64>, GnnError> {
        forward::decode_values(self, state)
    }

    /// Final-round edge probabilities plus the output of every round.
    pub fn predict_path(
        &self,
        g: &crate::netgraph::Graph,
        w: &crate::netgraph::WeightVector,
        q: PairQuery,
    ) -> Result<(Vec<f64>, Vec<Vec<f64>>), GnnError> {
        forward::predict_path(self, g, w, q)
    }

    /// Soft routing matrix for every ordered pair, evaluated in batches.
    pub fn predict_all_pairs(
        &self,
        g: &crate::netgraph::Graph,
        w: &crate::netgraph::WeightVector,
    ) -> Result<SoftRoutingMatrix, GnnError> {
        forward::predict_all_pairs(self, g, w)
    }

    pub fn save_json(&self) -> Result<String, CheckpointError> {
        checkpoint::to_json(self)
    }

    pub fn load_json(text: &str) -> Result<Self, CheckpointError> {
        checkpoint::from_json(text)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<(), CheckpointError> {
        checkpoint::save(self, path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self, CheckpointError> {
        checkpoint::load(path)
    }

    pub(crate) fn from_parts(
        config: GnnConfig,
        mut params: impl Iterator<Item = Tensor>,
    ) -> Result<Self, GnnError> {
        let mut model = GnnModel::new(config, 0)?;
        for slot in model.param_slots_mut() {
            let t = params
                .next()
                .ok_or_else(|| GnnError::ShapeMismatch("too few parameters".into()))?;
            if t.shape() != slot.shape() {
                return Err(GnnError::ShapeMismatch(format!(
                    "parameter shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = Arc::new(t);
        }
        if params.next().is_some() {
            return Err(GnnError::ShapeMismatch("too many parameters".into()));
        }
        Ok(model)
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-bound..bound)).collect(),
    )
    .expect("shape product matches")
}

/// Bound parameter handles of one [`Mlp`].
#[derive(Debug, Clone)]
pub struct BoundMlp {
    pub first: Vec<Var>,
    pub first_bias: Var,
    pub second: Var,
    pub second_bias: Var,
    pub norm_gain: Var,
    pub norm_bias: Var,
}

impl BoundMlp {
    fn bind(mlp: &Mlp, tape: &mut Tape, trainable: bool) -> Self {
        BoundMlp {
            first: mlp
                .first
                .iter()
                .map(|w| tape.input_shared(w.clone(), trainable))
                .collect(),
            first_bias: tape.input_shared(mlp.first_bias.clone(), trainable),
            second: tape.input_shared(mlp.second.clone(), trainable),
            second_bias: tape.input_shared(mlp.second_bias.clone(), trainable),
            norm_gain: tape.input_shared(mlp.norm_gain.clone(), trainable),
            norm_bias: tape.input_shared(mlp.norm_bias.clone(), trainable),
        }
    }

    pub(crate) fn vars(&self, out: &mut Vec<Var>) {
        out.extend(&self.first);
        out.extend([
            self.first_bias,
            self.second,
            self.second_bias,
            self.norm_gain,
            self.norm_bias,
        ]);
    }

    /// Second layer and normalization on the first layer's ReLU output.
    pub(crate) fn finish(&self, tape: &mut Tape, hidden: Var) -> Result<Var, DiffError> {
        let y = tape.affine(hidden, self.second, Some(self.second_bias))?;
        tape.layer_norm(y, self.norm_gain, self.norm_bias)
    }

    /// Full forward pass over input blocks matching `first`.
    pub fn apply(&self, tape: &mut Tape, inputs: &[Var]) -> Result<Var, DiffError> {
        if inputs.len() != self.first.len() {
            return Err(DiffError::ShapeMismatch(format!(
                "mlp expects {} input blocks, got {}",
                self.first.len(),
                inputs.len()
            )));
        }
        let terms: Vec<Term> = inputs
            .iter()
            .zip(&self.first)
            .map(|(&x, &w)| Term::Affine(x, w))
            .collect();
        let hidden = tape.linear_sum(&terms, Some(self.first_bias), true)?;
        self.finish(tape, hidden)
    }
}
