use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::WorkbenchError;
use crate::exact_routing::routing_matrix;
use crate::netgraph::{default_ospf_weights, utilization, DemandVector, Graph};

/// Calibration defaults: the median sample sits slightly above full load.
pub const DEFAULT_QUANTILE: f64 = 0.5;
pub const DEFAULT_TARGET: f64 = 1.1;
pub const DEFAULT_CALIBRATION_SAMPLES: usize = 500;
pub const MAX_BISECTIONS: usize = 60;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Scaling {
    Fixed(f64),
    Calibrate {
        quantile: f64,
        target: f64,
        samples: usize,
    },
}

impl Default for Scaling {
    fn default() -> Self {
        Scaling::Calibrate {
            quantile: DEFAULT_QUANTILE,
            target: DEFAULT_TARGET,
            samples: DEFAULT_CALIBRATION_SAMPLES,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrafficConfig {
    pub seed: u64,
    pub scaling: Scaling,
}

impl TrafficConfig {
    pub fn validate(&self) -> Result<(), WorkbenchError> {
        match self.scaling {
            Scaling::Fixed(s) if !(s > 0.0) || !s.is_finite() => {
                Err(WorkbenchError::Invalid(format!("scale must be positive, got {s}")))
            }
            Scaling::Calibrate {
                quantile, target, ..
            } if !(quantile > 0.0 && quantile < 1.0) || !(target > 0.0) => Err(WorkbenchError::Invalid(
                format!("calibration needs 0 < q < 1 and target > 0, got q = {quantile}, target = {target}"),
            )),
            _ => Ok(()),
        }
    }
}

/// Each ordered pair's demand is uniform on `(0, n_v - 1)`, times `scale`.
pub fn generate_traffic_matrix(g: &Graph, seed: u64, scale: f64) -> DemandVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let hi = (g.node_count() - 1) as f64;
    let values = (0..g.pair_count())
        .map(|_| {
            // Open interval: redraw the (measure-zero) lower endpoint.
            loop {
                let x: f64 = rng.gen_range(0.0..hi);
                if x > 0.0 {
                    break x * scale;
                }
            }
        })
        .collect();
    DemandVector::new(values).expect("non-negative draws")
}

/// Linear-interpolation quantile of unsorted values.
pub fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

/// Per-sample maximum utilization under default OSPF weights at unit scale,
/// for demand seeds `seed, seed + 1, ...`.
pub fn unit_scale_maxima(g: &Graph, samples: usize, seed: u64) -> Result<Vec<f64>, WorkbenchError> {
    let p = routing_matrix(g, &default_ospf_weights(g))?;
    (0..samples as u64)
        .map(|i| {
            let d = generate_traffic_matrix(g, seed.wrapping_add(i), 1.0);
            Ok(utilization(g, &p, &d)?.max()?)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Calibration {
    pub scale: f64,
    pub quantile: f64,
    pub target: f64,
    pub samples: usize,
    /// Quantile statistic reached at `scale`.
    pub achieved: f64,
}

/// Finds by bisection the demand scale at which the `q`-quantile of
/// per-sample maximum utilization (default OSPF routing) equals `target`.
/// Utilization is linear in demand, so samples are routed once at unit
/// scale and the bisection runs over those maxima.
pub fn calibrate_scaling(
    g: &Graph,
    samples: usize,
    q: f64,
    target: f64,
    seed: u64,
) -> Result<Calibration, WorkbenchError> {
    if samples < 100 {
        return Err(WorkbenchError::Invalid(format!(
            "calibration needs at least 100 samples, got {samples}"
        )));
    }
    TrafficConfig {
        seed,
        scaling: Scaling::Calibrate {
            quantile: q,
            target,
            samples,
        },
    }
    .validate()?;
    let maxima = unit_scale_maxima(g, samples, seed)?;
    let stat = |s: f64| quantile(&maxima, q) * s;
    let mut lo = 0.0;
    let mut hi = 1.0;
    while stat(hi) < target {
        hi *= 2.0;
        if !hi.is_finite() {
            return Err(WorkbenchError::NoConvergence(MAX_BISECTIONS));
        }
    }
    let mut mid = hi;
    for _ in 0..MAX_BISECTIONS {
        mid = 0.5 * (lo + hi);
        let s = stat(mid);
        if (s - target).abs() <= 1e-12 * target {
            break;
        }
        if s < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let achieved = stat(mid);
    if (achieved - target).abs() > 0.01 * target {
        return Err(WorkbenchError::NoConvergence(MAX_BISECTIONS));
    }
    Ok(Calibration {
        scale: mid,
        quantile: q,
        target,
        samples,
        achieved,
    })
}

/// Resolves a traffic configuration to a scale factor.
pub fn resolve_scale(g: &Graph, config: &TrafficConfig) -> Result<(f64, Option<Calibration>), WorkbenchError> {
    config.validate()?;
    match config.scaling {
        Scaling::Fixed(s) => Ok((s, None)),
        Scaling::Calibrate {
            quantile,
            target,
            samples,
        } => {
            let c = calibrate_scaling(g, samples, quantile, target, config.seed)?;
            Ok((c.scale, Some(c)))
        }
    }
}
