//! Gradient descent on link weights through the learned routing surrogate,
//! with exact re-evaluation of every iterate.

use std::io::Write;
use std::time::Instant;

use thiserror::Error;

use crate::diffcore::{DiffError, Tape, Tensor, Var};
use crate::exact_routing::{routing_matrix, RoutingError};
use crate::gnn::{AllPairsLayout, GnnError, GnnModel};
use crate::netgraph::{utilization, DemandVector, Graph, GraphError, WeightVector, W_MIN};

#[derive(Debug, Error)]
pub enum OptimizeError {
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Routing(#[from] RoutingError),
    #[error(transparent)]
    Gnn(#[from] GnnError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error("gradient has a non-finite entry at edge {0}")]
    NonFiniteGradient(usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// How weights are kept positive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Positivity {
    /// Plain gradient step, then clamp at the floor.
    #[default]
    Clamp,
    /// Gradient step on `ln w`, then clamp at the floor.
    LogSpace,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RbbConfig {
    pub tau: f64,
    pub alpha: f64,
    pub steps: usize,
    pub w_min: f64,
    /// Step size at iteration `t` is `alpha / (1 + alpha_decay * t)`.
    pub alpha_decay: f64,
    pub positivity: Positivity,
}

impl Default for RbbConfig {
    fn default() -> Self {
        RbbConfig {
            tau: 0.1,
            alpha: 0.02,
            steps: 3,
            w_min: W_MIN,
            alpha_decay: 0.0,
            positivity: Positivity::Clamp,
        }
    }
}

impl RbbConfig {
    pub fn validate(&self) -> Result<(), OptimizeError> {
        let ok = self.tau > 0.0
            && self.tau.is_finite()
            && self.alpha > 0.0
            && self.alpha.is_finite()
            && self.steps >= 1
            && self.w_min >= W_MIN
            && self.alpha_decay >= 0.0;
        if !ok {
            return Err(OptimizeError::InvalidConfig(format!("{self:?}")));
        }
        Ok(())
    }

    pub fn alpha_at(&self, t: usize) -> f64 {
        self.alpha / (1.0 + self.alpha_decay * t as f64)
    }
}

fn check_inputs(g: &Graph, w: &WeightVector, d: &DemandVector) -> Result<(), OptimizeError> {
    w.check_for(g)?;
    d.check_for(g)?;
    Ok(())
}

fn weight_column(w: &WeightVector) -> Tensor {
    Tensor::new(vec![w.len(), 1], w.values().to_vec()).expect("column")
}

/// Chunked evaluation of the surrogate over every pair.
struct Chunks {
    parts: Vec<AllPairsLayout>,
    /// First pair index of each part.
    starts: Vec<usize>,
}

impl Chunks {
    fn new(model: &GnnModel, g: &Graph) -> Result<Self, OptimizeError> {
        let pairs: Vec<(usize, usize)> = g.pairs().iter().collect();
        let size = crate::gnn::pairs_per_chunk(g, model);
        let mut parts = Vec::new();
        let mut starts = Vec::new();
        for (i, part) in pairs.chunks(size).enumerate() {
            starts.push(i * size);
            parts.push(AllPairsLayout::new(g, part)?);
        }
        Ok(Chunks { parts, starts })
    }
}

/// `rho_hat = (d · P_hat) / c` from one chunk's probabilities.
fn accumulate_load(load: &mut [f64], probs: &[f64], demands: &[f64], n_e: usize) {
    for (row, &di) in probs.chunks(n_e).zip(demands) {
        if di != 0.0 {
            for (l, &p) in load.iter_mut().zip(row) {
                *l += di * p;
            }
        }
    }
}

fn forward_chunk(
    model: &GnnModel,
    layout: &AllPairsLayout,
    w: &WeightVector,
    requires_grad: bool,
) -> Result<(Tape, Var, Var), OptimizeError> {
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape, false);
    let wv = tape.input(weight_column(w), requires_grad);
    let p = bound.forward_pairs(&mut tape, layout, wv)?;
    Ok((tape, wv, p))
}

/// Surrogate link utilization `rho_hat(w)`.
pub fn soft_utilization(
    model: &GnnModel,
    g: &Graph,
    w: &WeightVector,
    d: &DemandVector,
) -> Result<Vec<f64>, OptimizeError> {
    check_inputs(g, w, d)?;
    let n_e = g.edge_count();
    let mut load = vec![0.0; n_e];
    if d.values().iter().all(|&x| x == 0.0) {
        return Ok(load);
    }
    let chunks = Chunks::new(model, g)?;
    for (layout, &start) in chunks.parts.iter().zip(&chunks.starts) {
        let (tape, _, p) = forward_chunk(model, layout, w, false)?;
        let dem = &d.values()[start..start + layout.pairs.len()];
        accumulate_load(&mut load, tape.value(p).data(), dem, n_e);
    }
    for (l, c) in load.iter_mut().zip(g.capacities()) {
        *l /= c;
    }
    Ok(load)
}

/// Soft maximum of the surrogate utilization: the optimized scalar.
pub fn soft_objective(
    model: &GnnModel,
    g: &Graph,
    w: &WeightVector,
    d: &DemandVector,
    tau: f64,
) -> Result<f64, OptimizeError> {
    let rho = soft_utilization(model, g, w, d)?;
    Ok(crate::diffcore::soft_maximum(&rho, tau)?)
}

/// Soft objective and its gradient with respect to `w`.
///
/// The surrogate is evaluated in chunks of pairs. The first pass collects
/// `rho_hat` and the derivative of the soft maximum; the second replays each
/// chunk on a tape and pulls `d_i · dJ/drho_k / c_k` back to the weights. A
/// single-chunk graph reuses its first-pass tape.
pub fn objective_and_gradient(
    model: &GnnModel,
    g: &Graph,
    w: &WeightVector,
    d: &DemandVector,
    tau: f64,
) -> Result<(f64, Vec<f64>), OptimizeError> {
    check_inputs(g, w, d)?;
    let n_e = g.edge_count();
    let chunks = Chunks::new(model, g)?;
    let single = chunks.parts.len() == 1;
    let mut kept = None;
    let mut load = vec![0.0; n_e];
    for (layout, &start) in chunks.parts.iter().zip(&chunks.starts) {
        let (tape, wv, p) = forward_chunk(model, layout, w, single)?;
        let dem = &d.values()[start..start + layout.pairs.len()];
        accumulate_load(&mut load, tape.value(p).data(), dem, n_e);
        if single {
            kept = Some((tape, wv, p));
        }
    }
    for (l, c) in load.iter_mut().zip(g.capacities()) {
        *l /= c;
    }

    let mut small = Tape::new();
    let rho = small.input(Tensor::vector(load), true);
    let obj = small.soft_maximum(rho, tau)?;
    let objective = small.value(obj).item();
    let d_rho = small.backward(obj)?.wrt(&small, rho)?.into_data();
    let col: Vec<f64> = d_rho.iter().zip(g.capacities()).map(|(g, c)| g / c).collect();

    let mut grad = vec![0.0; n_e];
    for (ci, (layout, &start)) in chunks.parts.iter().zip(&chunks.starts).enumerate() {
        let dem = &d.values()[start..start + layout.pairs.len()];
        if dem.iter().all(|&x| x == 0.0) {
            continue;
        }
        let (tape, wv, p) = match kept.take() {
            Some(t) if ci == 0 => t,
            _ => forward_chunk(model, layout, w, true)?,
        };
        let mut seed = Vec::with_capacity(dem.len() * n_e);
        for &di in dem {
            seed.extend(col.iter().map(|c| di * c));
        }
        let seed = Tensor::new(vec![dem.len(), n_e], seed)?;
        let gw = tape.backward_with_seed(p, seed)?.wrt(&tape, wv)?;
        for (a, b) in grad.iter_mut().zip(gw.data()) {
            *a += b;
        }
    }
    Ok((objective, grad))
}

/// Result of one descent step from `w_t`.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub weights: WeightVector,
    /// Soft objective at `w_t`.
    pub soft_objective: f64,
    pub gradient: Vec<f64>,
}

/// `w_{t+1} = max(w_t - alpha_t · grad J(w_t), w_min)`, or the same step on
/// `ln w` under [`Positivity::LogSpace`].
pub fn rbb_step(
    model: &GnnModel,
    g: &Graph,
    w: &WeightVector,
    d: &DemandVector,
    config: &RbbConfig,
    t: usize,
) -> Result<StepOutput, OptimizeError> {
    config.validate()?;
    let (soft_objective, gradient) = objective_and_gradient(model, g, w, d, config.tau)?;
    if let Some(k) = gradient.iter().position(|x| !x.is_finite()) {
        return Err(OptimizeError::NonFiniteGradient(k));
    }
    let weights = descend(w, &gradient, config, t)?;
    Ok(StepOutput {
        weights,
        soft_objective,
        gradient,
    })
}

/// Applies one projected update with a known gradient.
pub fn descend(
    w: &WeightVector,
    gradient: &[f64],
    config: &RbbConfig,
    t: usize,
) -> Result<WeightVector, OptimizeError> {
    if gradient.len() != w.len() {
        return Err(GraphError::DimensionMismatch {
            what: "gradient",
            got: gradient.len(),
            expected: w.len(),
        }
        .into());
    }
    let a = config.alpha_at(t);
    let next = w
        .values()
        .iter()
        .zip(gradient)
        .map(|(&wk, &gk)| match config.positivity {
            Positivity::Clamp => wk - a * gk,
            Positivity::LogSpace => (wk.ln() - a * gk * wk).exp(),
        })
        .collect();
    Ok(WeightVector::clamped(next, config.w_min)?)
}

/// Exact maximum utilization under Dijkstra routing.
pub fn exact_max_utilization(g: &Graph, w: &WeightVector, d: &DemandVector) -> Result<f64, OptimizeError> {
    let p = routing_matrix(g, w)?;
    Ok(utilization(g, &p, d)?.max()?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryPoint {
    pub step: usize,
    pub weights: WeightVector,
    pub soft_objective: f64,
    pub exact_max_util: f64,
    /// Time spent producing this iterate (gradient step plus exact
    /// evaluation); for step 0 only the evaluation.
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub points: Vec<TrajectoryPoint>,
}

impl Trajectory {
    /// CSV `step,soft_objective,exact_max_util,wall_ms`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), OptimizeError> {
        let mut w = csv::Writer::from_writer(out);
        let io = |e: csv::Error| OptimizeError::Io(std::io::Error::other(e));
        w.write_record(["step", "soft_objective", "exact_max_util", "wall_ms"])
            .map_err(io)?;
        for p in &self.points {
            w.write_record([
                p.step.to_string(),
                crate::fmt_f64(p.soft_objective),
                crate::fmt_f64(p.exact_max_util),
                crate::fmt_f64(p.wall_ms),
            ])
            .map_err(io)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct RbbOutcome {
    pub trajectory: Trajectory,
    /// Iterate with the lowest exact maximum utilization; the earliest one
    /// on ties, so `w_0` is kept unless something strictly improves on it.
    pub best_step: usize,
    pub recommended: WeightVector,
    pub recommended_max_util: f64,
}

/// Runs `config.steps` descent steps from `w0` and recommends the best
/// iterate by exact evaluation.
pub fn rbb_optimize(
    model: &GnnModel,
    g: &Graph,
    w0: &WeightVector,
    d: &DemandVector,
    config: &RbbConfig,
) -> Result<RbbOutcome, OptimizeError> {
    config.validate()?;
    check_inputs(g, w0, d)?;
    let mut points = Vec::with_capacity(config.steps + 1);
    let started = Instant::now();
    let exact = exact_max_utilization(g, w0, d)?;
    let mut pending = TrajectoryPoint {
        step: 0,
        weights: w0.clone(),
        soft_objective: f64::NAN,
        exact_max_util: exact,
        wall_ms: started.elapsed().as_secs_f64() * 1e3,
    };
    for t in 0..config.steps {
        let started = Instant::now();
        let out = rbb_step(model, g, &pending.weights, d, config, t)?;
        let exact = exact_max_utilization(g, &out.weights, d)?;
        pending.soft_objective = out.soft_objective;
        points.push(pending);
        pending = TrajectoryPoint {
            step: t + 1,
            weights: out.weights,
            soft_objective: f64::NAN,
            exact_max_util: exact,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        };
    }
    pending.soft_objective = soft_objective(model, g, &pending.weights, d, config.tau)?;
    points.push(pending);

    let mut best_step = 0;
    for (i, p) in points.iter().enumerate() {
        if p.exact_max_util < points[best_step].exact_max_util {
            best_step = i;
        }
    }
    Ok(RbbOutcome {
        recommended: points[best_step].weights.clone(),
        recommended_max_util: points[best_step].exact_max_util,
        best_step,
        trajectory: Trajectory { points },
    })
}
