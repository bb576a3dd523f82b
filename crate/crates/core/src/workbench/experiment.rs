//! Suite runner comparing default OSPF weights with the gradient method,
//! local search, and local search started from the gradient result.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::warn;
use serde::{Deserialize, Serialize};

use super::traffic::{calibrate_scaling, generate_traffic_matrix, Calibration};
use super::{load_topology, CapacityMode, WorkbenchError};
use crate::fmt_f64;
use crate::gnn::GnnModel;
use crate::localsearch::{local_search, Budget, SearchConfig};
use crate::netgraph::{default_ospf_weights, DemandVector, Graph};
use crate::optimizer::{exact_max_utilization, rbb_optimize, RbbConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "default_ospf")]
    DefaultOspf,
    #[serde(rename = "rbb")]
    Rbb,
    #[serde(rename = "ls")]
    Ls,
    #[serde(rename = "rbb+ls")]
    RbbLs,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::DefaultOspf => "default_ospf",
            Method::Rbb => "rbb",
            Method::Ls => "ls",
            Method::RbbLs => "rbb+ls",
        }
    }

    fn needs_model(&self) -> bool {
        matches!(self, Method::Rbb | Method::RbbLs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RbbSettings {
    pub tau: f64,
    pub alpha: f64,
    pub steps: usize,
}

impl Default for RbbSettings {
    fn default() -> Self {
        let d = RbbConfig::default();
        RbbSettings {
            tau: d.tau,
            alpha: d.alpha,
            steps: d.steps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SearchSettings {
    /// Wall-clock budget; ignored when `budget_evaluations` is set.
    pub budget_ms: u64,
    pub budget_evaluations: Option<u64>,
    pub w_max: u32,
}

impl Default for SearchSettings {
    fn default() -> Self {
        SearchSettings {
            budget_ms: 1000,
            budget_evaluations: None,
            w_max: 64,
        }
    }
}

impl SearchSettings {
    fn budget(&self) -> Budget {
        match self.budget_evaluations {
            Some(n) => Budget::Evaluations(n),
            None => Budget::millis(self.budget_ms),
        }
    }

    fn label(&self) -> String {
        match self.budget_evaluations {
            Some(n) => format!("{n}evals"),
            None => format!("{}ms", self.budget_ms),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationSettings {
    pub quantile: f64,
    pub target: f64,
    pub samples: usize,
}

impl Default for CalibrationSettings {
    fn default() -> Self {
        CalibrationSettings {
            quantile: super::traffic::DEFAULT_QUANTILE,
            target: super::traffic::DEFAULT_TARGET,
            samples: super::traffic::DEFAULT_CALIBRATION_SAMPLES,
        }
    }
}

/// Suite description, read from JSON. Relative paths are resolved against
/// the suite file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteConfig {
    pub topologies: Vec<PathBuf>,
    pub samples: usize,
    pub methods: Vec<Method>,
    #[serde(default)]
    pub model: Option<PathBuf>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub rbb: RbbSettings,
    #[serde(default)]
    pub search: SearchSettings,
    #[serde(default)]
    pub calibration: CalibrationSettings,
    /// Keep file capacities instead of setting every link to 1.
    #[serde(default)]
    pub keep_capacities: bool,
}

impl SuiteConfig {
    pub fn from_json(text: &str) -> Result<Self, WorkbenchError> {
        serde_json::from_str(text).map_err(|e| WorkbenchError::Invalid(format!("suite: {e}")))
    }

    pub fn rbb_config(&self) -> RbbConfig {
        RbbConfig {
            tau: self.rbb.tau,
            alpha: self.rbb.alpha,
            steps: self.rbb.steps,
            ..RbbConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentRecord {
    pub topology: String,
    pub sample: usize,
    pub method: Method,
    pub initial_max_util: f64,
    pub final_max_util: f64,
    pub steps_or_budget: String,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleFailure {
    pub topology: String,
    pub sample: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopologyCalibration {
    pub topology: String,
    pub calibration: Calibration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub topology: String,
    pub method: String,
    pub samples: usize,
    pub mean_relative_improvement: f64,
    pub fraction_beats_default: f64,
    pub fraction_below_one: f64,
    pub median_wall_ms: f64,
    pub calibration_quantile: f64,
    pub calibration_target: f64,
    pub scale: f64,
    pub failed_samples: usize,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub records: Vec<ExperimentRecord>,
    pub failures: Vec<SampleFailure>,
    pub calibrations: Vec<TopologyCalibration>,
}

/// SplitMix64 finalizer; keeps per-topology and per-sample streams apart.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn derive_seed(seed: u64, tag: u64, a: u64, b: u64) -> u64 {
    mix(mix(mix(seed ^ tag) ^ a) ^ b)
}

const TAG_CALIBRATE: u64 = 1;
const TAG_DEMAND: u64 = 2;
const TAG_SEARCH: u64 = 3;

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Runs the whole suite. A failing sample is logged and listed in
/// `failures`; the others still run.
pub fn run_experiment(suite: &SuiteConfig, base_dir: &Path) -> Result<ExperimentOutput, WorkbenchError> {
    if suite.samples == 0 || suite.methods.is_empty() || suite.topologies.is_empty() {
        return Err(WorkbenchError::Invalid(
            "suite needs topologies, samples >= 1 and at least one method".into(),
        ));
    }
    let rbb = suite.rbb_config();
    rbb.validate()?;
    let model = if suite.methods.iter().any(Method::needs_model) {
        let path = suite
            .model
            .as_ref()
            .ok_or_else(|| WorkbenchError::Invalid("methods rbb and rbb+ls need a model".into()))?;
        Some(GnnModel::load(&resolve(base_dir, path))?)
    } else {
        None
    };
    let mode = if suite.keep_capacities {
        CapacityMode::FromFile
    } else {
        CapacityMode::Unit
    };

    let mut out = ExperimentOutput {
        records: Vec::new(),
        failures: Vec::new(),
        calibrations: Vec::new(),
    };
    for (ti, path) in suite.topologies.iter().enumerate() {
        let spec = load_topology(&resolve(base_dir, path))?;
        let g = spec.to_graph(mode)?;
        let cal = calibrate_scaling(
            &g,
            suite.calibration.samples,
            suite.calibration.quantile,
            suite.calibration.target,
            derive_seed(suite.seed, TAG_CALIBRATE, ti as u64, 0),
        )?;
        out.calibrations.push(TopologyCalibration {
            topology: spec.name.clone(),
            calibration: cal,
        });
        for s in 0..suite.samples {
            let d = generate_traffic_matrix(&g, derive_seed(suite.seed, TAG_DEMAND, ti as u64, s as u64), cal.scale);
            let search_seed = derive_seed(suite.seed, TAG_SEARCH, ti as u64, s as u64);
            match run_sample(suite, model.as_ref(), &g, &d, &rbb, search_seed) {
                Ok(rows) => out.records.extend(rows.into_iter().map(|(method, initial, fin, label, wall_ms)| {
                    ExperimentRecord {
                        topology: spec.name.clone(),
                        sample: s,
                        method,
                        initial_max_util: initial,
                        final_max_util: fin,
                        steps_or_budget: label,
                        wall_ms,
                    }
                })),
                Err(e) => {
                    warn!("{} sample {s} failed: {e}", spec.name);
                    out.failures.push(SampleFailure {
                        topology: spec.name.clone(),
                        sample: s,
                        error: e.to_string(),
                    });
                }
            }
        }
    }
    Ok(out)
}

type Row = (Method, f64, f64, String, f64);

fn run_sample(
    suite: &SuiteConfig,
    model: Option<&GnnModel>,
    g: &Graph,
    d: &DemandVector,
    rbb: &RbbConfig,
    search_seed: u64,
) -> Result<Vec<Row>, WorkbenchError> {
    let w0 = default_ospf_weights(g);
    let started = Instant::now();
    let initial = exact_max_utilization(g, &w0, d)?;
    let base_ms = started.elapsed().as_secs_f64() * 1e3;
    let search = SearchConfig {
        budget: suite.search.budget(),
        w_max: suite.search.w_max,
        seed: search_seed,
        ..SearchConfig::default()
    };
    let mut rbb_result = None;
    let mut rows = Vec::new();
    for &m in &suite.methods {
        let row = match m {
            Method::DefaultOspf => (m, initial, initial, "0".to_string(), base_ms),
            Method::Rbb | Method::RbbLs => {
                let (rec, rec_util, rbb_ms) = match &rbb_result {
                    Some(r) => Clone::clone(r),
                    None => {
                        let t = Instant::now();
                        let o = rbb_optimize(model.expect("loaded"), g, &w0, d, rbb)?;
                        let r = (o.recommended, o.recommended_max_util, t.elapsed().as_secs_f64() * 1e3);
                        rbb_result = Some(r.clone());
                        r
                    }
                };
                if m == Method::Rbb {
                    (m, initial, rec_util, rbb.steps.to_string(), rbb_ms)
                } else {
                    let t = Instant::now();
                    let r = local_search(g, d, &rec, &search)?;
                    let ms = rbb_ms + t.elapsed().as_secs_f64() * 1e3;
                    let label = format!("{}+{}", rbb.steps, suite.search.label());
                    (m, initial, r.max_util, label, ms)
                }
            }
            Method::Ls => {
                let t = Instant::now();
                let r = local_search(g, d, &w0, &search)?;
                (m, initial, r.max_util, suite.search.label(), t.elapsed().as_secs_f64() * 1e3)
            }
        };
        rows.push(row);
    }
    Ok(rows)
}

pub const RECORD_HEADER: [&str; 7] = [
    "topology",
    "sample",
    "method",
    "initial_max_util",
    "final_max_util",
    "steps_or_budget",
    "wall_ms",
];

pub fn write_records<W: Write>(out: W, records: &[ExperimentRecord]) -> Result<(), WorkbenchError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(RECORD_HEADER)?;
    for r in records {
        w.write_record([
            r.topology.clone(),
            r.sample.to_string(),
            r.method.name().to_string(),
            fmt_f64(r.initial_max_util),
            fmt_f64(r.final_max_util),
            r.steps_or_budget.clone(),
            fmt_f64(r.wall_ms),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records<R: std::io::Read>(input: R) -> Result<Vec<ExperimentRecord>, WorkbenchError> {
    let mut out = Vec::new();
    for (row, rec) in csv::Reader::from_reader(input).records().enumerate() {
        let rec = rec?;
        let bad = || WorkbenchError::Invalid(format!("records row {}: {rec:?}", row + 1));
        let num = |i: usize| rec.get(i).and_then(|s| s.parse::<f64>().ok()).ok_or_else(bad);
        let method = match rec.get(2) {
            Some("default_ospf") => Method::DefaultOspf,
            Some("rbb") => Method::Rbb,
            Some("ls") => Method::Ls,
            Some("rbb+ls") => Method::RbbLs,
            _ => return Err(bad()),
        };
        out.push(ExperimentRecord {
            topology: rec.get(0).ok_or_else(bad)?.to_string(),
            sample: rec.get(1).and_then(|s| s.parse().ok()).ok_or_else(bad)?,
            method,
            initial_max_util: num(3)?,
            final_max_util: num(4)?,
            steps_or_budget: rec.get(5).ok_or_else(bad)?.to_string(),
            wall_ms: num(6)?,
        });
    }
    Ok(out)
}

fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Per topology and method, in first-seen order.
pub fn summarize(output: &ExperimentOutput) -> Vec<SummaryRow> {
    let mut keys: Vec<(String, Method)> = Vec::new();
    for r in &output.records {
        let k = (r.topology.clone(), r.method);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(topology, method)| {
            let rows: Vec<&ExperimentRecord> = output
                .records
                .iter()
                .filter(|r| r.topology == topology && r.method == method)
                .collect();
            let n = rows.len() as f64;
            let improvement =
                rows.iter().map(|r| (r.initial_max_util - r.final_max_util) / r.initial_max_util).sum::<f64>() / n;
            let beats = rows.iter().filter(|r| r.final_max_util < r.initial_max_util).count() as f64 / n;
            let below = rows.iter().filter(|r| r.final_max_util < 1.0).count() as f64 / n;
            let mut walls: Vec<f64> = rows.iter().map(|r| r.wall_ms).collect();
            let cal = output
                .calibrations
                .iter()
                .find(|c| c.topology == topology)
                .map(|c| c.calibration);
            SummaryRow {
                method: method.name().to_string(),
                samples: rows.len(),
                mean_relative_improvement: improvement,
                fraction_beats_default: beats,
                fraction_below_one: below,
                median_wall_ms: median(&mut walls),
                calibration_quantile: cal.map_or(f64::NAN, |c| c.quantile),
                calibration_target: cal.map_or(f64::NAN, |c| c.target),
                scale: cal.map_or(f64::NAN, |c| c.scale),
                failed_samples: output.failures.iter().filter(|f| f.topology == topology).count(),
                topology,
            }
        })
        .collect()
}

pub const SUMMARY_HEADER: [&str; 11] = [
    "topology",
    "method",
    "samples",
    "mean_relative_improvement",
    "fraction_beats_default",
    "fraction_below_one",
    "median_wall_ms",
    "calibration_quantile",
    "calibration_target",
    "scale",
    "failed_samples",
];

pub fn write_summary<W: Write>(out: W, rows: &[SummaryRow]) -> Result<(), WorkbenchError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SUMMARY_HEADER)?;
    for r in rows {
        w.write_record([
            r.topology.clone(),
            r.method.clone(),
            r.samples.to_string(),
            fmt_f64(r.mean_relative_improvement),
            fmt_f64(r.fraction_beats_default),
            fmt_f64(r.fraction_below_one),
            fmt_f64(r.median_wall_ms),
            fmt_f64(r.calibration_quantile),
            fmt_f64(r.calibration_target),
            fmt_f64(r.scale),
            r.failed_samples.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
