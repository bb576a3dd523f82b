//! Training data (Barabási-Albert graphs, beta-distributed weights, Dijkstra
//! labels) and the supervised loop fitting [`GnnModel`] to it.

use std::io::Write;
use std::sync::Arc;

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution};
use thiserror::Error;

use crate::diffcore::{AdamState, DiffError, Tape, Tensor};
use crate::exact_routing::{path_vector, RoutingError};
use crate::gnn::{GnnError, GnnModel, GraphBatch, PairQuery};
use crate::netgraph::{Graph, GraphError, LinkSpec, PathVector, WeightVector, W_MIN};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid parameters: {0}")]
    InvalidParameters(String),
    #[error("loss became non-finite at step {0}")]
    DivergedLoss(usize),
    #[error("validation set is empty")]
    EmptyValidationSet,
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Routing(#[from] RoutingError),
    #[error(transparent)]
    Gnn(#[from] GnnError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// `scale · Beta(a, b)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightPrior {
    pub a: f64,
    pub b: f64,
    pub scale: f64,
}

impl Default for WeightPrior {
    fn default() -> Self {
        WeightPrior {
            a: 2.0,
            b: 2.0,
            scale: 2.0,
        }
    }
}

impl WeightPrior {
    /// The scaled distribution must have its mode at 1: symmetric, shape > 1.
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.a != self.b || !(self.a > 1.0) || !self.a.is_finite() || self.scale != 2.0 {
            return Err(TrainError::InvalidParameters(format!(
                "weight prior {self:?} does not have mode 1"
            )));
        }
        Ok(())
    }

    /// Closed-form variance of the scaled distribution.
    pub fn variance(&self) -> f64 {
        let (a, b) = (self.a, self.b);
        self.scale * self.scale * a * b / ((a + b).powi(2) * (a + b + 1.0))
    }
}

#[derive(Debug, Clone)]
pub struct TrainingSample {
    pub graph: Arc<Graph>,
    pub weights: WeightVector,
    pub query: PairQuery,
    pub label: PathVector,
}

impl TrainingSample {
    /// Labels the query with its Dijkstra path.
    pub fn labelled(graph: Arc<Graph>, weights: WeightVector, query: PairQuery) -> Result<Self, TrainError> {
        let label = path_vector(&graph, &weights, query.source, query.destination)?;
        Ok(TrainingSample {
            graph,
            weights,
            query,
            label,
        })
    }
}

/// Where training graphs come from.
#[derive(Debug, Clone)]
pub enum GraphSource {
    /// A fresh BA graph per sample.
    Online,
    /// Graphs drawn uniformly from a fixed pool.
    Pool(Vec<Arc<Graph>>),
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub min_nodes: usize,
    pub max_nodes: usize,
    pub attach: usize,
    pub prior: WeightPrior,
    pub seed: u64,
    /// Validation accuracy is recorded every this many steps (and at the
    /// last step); 0 disables it.
    pub eval_every: usize,
    pub source: GraphSource,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 8000,
            batch_size: 32,
            learning_rate: 1e-3,
            min_nodes: 10,
            max_nodes: 20,
            attach: 2,
            prior: WeightPrior::default(),
            seed: 0,
            eval_every: 250,
            source: GraphSource::Online,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.steps == 0 || self.batch_size == 0 || !(self.learning_rate > 0.0) {
            return Err(TrainError::InvalidParameters(format!(
                "steps = {}, batch = {}, lr = {}",
                self.steps, self.batch_size, self.learning_rate
            )));
        }
        if self.min_nodes > self.max_nodes || self.attach == 0 || self.attach + 1 > self.min_nodes {
            return Err(TrainError::InvalidParameters(format!(
                "nodes {}..={} with attachment {}",
                self.min_nodes, self.max_nodes, self.attach
            )));
        }
        if let GraphSource::Pool(p) = &self.source {
            if p.is_empty() {
                return Err(TrainError::InvalidParameters("empty graph pool".into()));
            }
        }
        self.prior.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricRow {
    pub step: usize,
    pub loss: f64,
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricHistory {
    pub rows: Vec<MetricRow>,
}

impl MetricHistory {
    pub fn losses(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.loss).collect()
    }

    pub fn accuracies(&self) -> Vec<(usize, f64)> {
        self.rows
            .iter()
            .filter_map(|r| r.accuracy.map(|a| (r.step, a)))
            .collect()
    }

    /// CSV with header `step,loss,accuracy`; accuracy is empty when not
    /// measured at that step.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), TrainError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["step", "loss", "accuracy"]).map_err(csv_io)?;
        for r in &self.rows {
            w.write_record([
                r.step.to_string(),
                crate::fmt_f64(r.loss),
                r.accuracy.map(crate::fmt_f64).unwrap_or_default(),
            ])
            .map_err(csv_io)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(input: R) -> Result<Self, TrainError> {
        let mut rows = Vec::new();
        for rec in csv::Reader::from_reader(input).records() {
            let rec = rec.map_err(csv_io)?;
            let bad = || TrainError::InvalidParameters(format!("bad metric row {rec:?}"));
            let step = rec.get(0).and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            let loss = rec.get(1).and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            let accuracy = match rec.get(2) {
                Some("") | None => None,
                Some(s) => Some(s.parse().map_err(|_| bad())?),
            };
            rows.push(MetricRow {
                step,
                loss,
                accuracy,
            });
        }
        Ok(MetricHistory { rows })
    }
}

fn csv_io(e: csv::Error) -> TrainError {
    TrainError::Io(std::io::Error::other(e))
}

/// Barabási-Albert graph: a complete core on `m + 1` nodes, then each new
/// node links to `m` distinct existing nodes chosen with probability
/// proportional to degree. Links are undirected with unit capacity.
pub fn sample_ba_topology(n: usize, m: usize, seed: u64) -> Result<Graph, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ba_with_rng(n, m, &mut rng)
}

fn ba_with_rng(n: usize, m: usize, rng: &mut ChaCha8Rng) -> Result<Graph, TrainError> {
    if m < 1 || m + 1 > n {
        return Err(TrainError::InvalidParameters(format!(
            "BA graph needs 1 <= m < n, got n = {n}, m = {m}"
        )));
    }
    let mut links = Vec::new();
    // Every link contributes both endpoints, so uniform draws from this list
    // are degree-proportional.
    let mut endpoints = Vec::new();
    for a in 0..=m {
        for b in a + 1..=m {
            links.push(LinkSpec::undirected(a, b, 1.0));
            endpoints.extend([a, b]);
        }
    }
    let mut targets = Vec::with_capacity(m);
    for v in m + 1..n {
        targets.clear();
        while targets.len() < m {
            let t = endpoints[rng.gen_range(0..endpoints.len())];
            if !targets.contains(&t) {
                targets.push(t);
            }
        }
        for &t in &targets {
            links.push(LinkSpec::undirected(t, v, 1.0));
            endpoints.extend([t, v]);
        }
    }
    Ok(Graph::build(&format!("ba-{n}-{m}"), n, &links)?)
}

/// `n_e` i.i.d. draws of `scale · Beta(a, b)`, floored at [`W_MIN`].
pub fn sample_weights_beta(n_e: usize, prior: &WeightPrior, seed: u64) -> Result<WeightVector, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    weights_with_rng(n_e, prior, &mut rng)
}

fn weights_with_rng(
    n_e: usize,
    prior: &WeightPrior,
    rng: &mut ChaCha8Rng,
) -> Result<WeightVector, TrainError> {
    prior.validate()?;
    let beta = Beta::new(prior.a, prior.b)
        .map_err(|e| TrainError::InvalidParameters(e.to_string()))?;
    let values = (0..n_e).map(|_| prior.scale * beta.sample(rng)).collect();
    Ok(WeightVector::clamped(values, W_MIN)?)
}

fn random_query(g: &Graph, rng: &mut ChaCha8Rng) -> PairQuery {
    let n = g.node_count();
    let u = rng.gen_range(0..n);
    let mut v = rng.gen_range(0..n - 1);
    if v >= u {
        v += 1;
    }
    PairQuery {
        source: u,
        destination: v,
    }
}

/// One batch: per sample a graph (fresh BA or from the pool), prior-drawn
/// weights, one uniformly random ordered pair and its Dijkstra label.
pub fn make_training_batch(config: &TrainConfig, seed: u64) -> Result<Vec<TrainingSample>, TrainError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..config.batch_size)
        .map(|_| {
            let graph = match &config.source {
                GraphSource::Online => {
                    let n = rng.gen_range(config.min_nodes..=config.max_nodes);
                    Arc::new(ba_with_rng(n, config.attach, &mut rng)?)
                }
                GraphSource::Pool(pool) => pool.choose(&mut rng).expect("validated").clone(),
            };
            let weights = weights_with_rng(graph.edge_count(), &config.prior, &mut rng)?;
            let query = random_query(&graph, &mut rng);
            TrainingSample::labelled(graph, weights, query)
        })
        .collect()
}

/// Held-out samples spread round-robin over `graphs`.
pub fn validation_samples(
    graphs: &[Arc<Graph>],
    count: usize,
    prior: &WeightPrior,
    seed: u64,
) -> Result<Vec<TrainingSample>, TrainError> {
    if graphs.is_empty() {
        return Err(TrainError::EmptyValidationSet);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let graph = graphs[i % graphs.len()].clone();
            let weights = weights_with_rng(graph.edge_count(), prior, &mut rng)?;
            let query = random_query(&graph, &mut rng);
            TrainingSample::labelled(graph, weights, query)
        })
        .collect()
}

fn batch_of(samples: &[TrainingSample]) -> Result<GraphBatch, TrainError> {
    let items: Vec<_> = samples
        .iter()
        .map(|s| (s.graph.as_ref(), &s.weights, s.query))
        .collect();
    Ok(GraphBatch::from_queries(&items)?)
}

fn labels_and_weights(samples: &[TrainingSample]) -> (Arc<Tensor>, Arc<Vec<f64>>) {
    let mut labels = Vec::new();
    let mut weights = Vec::new();
    let b = samples.len() as f64;
    for s in samples {
        let n_e = s.label.len();
        labels.extend(s.label.to_f64());
        weights.extend(std::iter::repeat(1.0 / (b * n_e as f64)).take(n_e));
    }
    let n = labels.len();
    (
        Arc::new(Tensor::new(vec![n, 1], labels).expect("column")),
        Arc::new(weights),
    )
}

/// Sum over rounds of the batch mean of each sample's mean edge
/// cross-entropy. Returns the loss and, when `trainable`, gradients in
/// [`GnnModel::named_params`] order.
pub fn batch_loss(
    model: &GnnModel,
    samples: &[TrainingSample],
    trainable: bool,
) -> Result<(f64, Option<Vec<Tensor>>), TrainError> {
    let batch = batch_of(samples)?;
    let (labels, weights) = labels_and_weights(samples);
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, trainable);
    let outs = bound.forward_batch(&mut tape, &batch, true)?;
    let mut total = None;
    for p in outs {
        let l = tape.weighted_binary_cross_entropy(p, labels.clone(), weights.clone())?;
        total = Some(match total {
            None => l,
            Some(acc) => tape.add(acc, l)?,
        });
    }
    let total = total.expect("rounds >= 1");
    let loss = tape.value(total).item();
    if !trainable {
        return Ok((loss, None));
    }
    let mut grads = tape.backward(total)?;
    let grads = bound
        .param_vars()
        .into_iter()
        .map(|v| match grads.take(v) {
            Some(g) => g,
            None => Tensor::zeros(tape.value(v).shape()),
        })
        .collect();
    Ok((loss, Some(grads)))
}

/// Fits `model` in place with Adam. Every step draws a fresh batch from a
/// seed derived from `config.seed`, so the history is fully determined by
/// the configuration and the initial model.
pub fn train(
    model: &mut GnnModel,
    config: &TrainConfig,
    validation: &[TrainingSample],
) -> Result<MetricHistory, TrainError> {
    train_with_progress(model, config, validation, |_| {})
}

pub fn train_with_progress(
    model: &mut GnnModel,
    config: &TrainConfig,
    validation: &[TrainingSample],
    mut progress: impl FnMut(&MetricRow),
) -> Result<MetricHistory, TrainError> {
    config.validate()?;
    let mut adam = AdamState::new(model.named_params().into_iter().map(|(_, t)| t.as_ref()));
    let mut seeds = ChaCha8Rng::seed_from_u64(config.seed);
    let mut history = MetricHistory::default();
    for step in 0..config.steps {
        let samples = make_training_batch(config, seeds.gen())?;
        let (loss, grads) = batch_loss(model, &samples, true)?;
        if !loss.is_finite() {
            return Err(TrainError::DivergedLoss(step));
        }
        let grads = grads.expect("trainable");
        {
            let mut slots = model.param_slots_mut();
            let mut params: Vec<&mut Tensor> = slots.iter_mut().map(|a| Arc::make_mut(a)).collect();
            let grad_refs: Vec<&Tensor> = grads.iter().collect();
            adam.step(&mut params, &grad_refs, config.learning_rate)?;
        }
        let last = step + 1 == config.steps;
        let accuracy = if !validation.is_empty()
            && config.eval_every > 0
            && ((step + 1) % config.eval_every == 0 || last)
        {
            Some(edge_accuracy(model, validation)?)
        } else {
            None
        };
        let row = MetricRow {
            step,
            loss,
            accuracy,
        };
        if let Some(a) = accuracy {
            info!("step {step}: loss {loss:.5}, validation accuracy {a:.5}");
        }
        progress(&row);
        history.rows.push(row);
    }
    Ok(history)
}

/// Samples per forward pass when scoring.
const EVAL_CHUNK: usize = 64;

/// Final-round predictions for each sample.
pub fn predict_samples(model: &GnnModel, samples: &[TrainingSample]) -> Result<Vec<Vec<f64>>, TrainError> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_CHUNK) {
        let batch = batch_of(chunk)?;
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let p = bound.forward_batch(&mut tape, &batch, false)?;
        let flat = tape.value(p[0]).data();
        for w in batch.edge_offsets.windows(2) {
            out.push(flat[w[0]..w[1]].to_vec());
        }
    }
    Ok(out)
}

/// Pooled fraction of edges whose final prediction, thresholded at 0.5,
/// equals the Dijkstra label.
pub fn edge_accuracy(model: &GnnModel, samples: &[TrainingSample]) -> Result<f64, TrainError> {
    let preds = predict_samples(model, samples)?;
    accuracy_of(&preds, samples)
}

/// Pooled thresholded accuracy of given predictions.
pub fn accuracy_of(preds: &[Vec<f64>], samples: &[TrainingSample]) -> Result<f64, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptyValidationSet);
    }
    let (mut hit, mut total) = (0usize, 0usize);
    for (p, s) in preds.iter().zip(samples) {
        for (&q, &y) in p.iter().zip(s.label.membership()) {
            hit += usize::from((q > 0.5) == y);
            total += 1;
        }
    }
    Ok(hit as f64 / total as f64)
}
