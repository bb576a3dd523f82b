//! File formats, traffic generation, experiment suites and the `rbb`
//! command-line front end.

pub mod cli;
pub mod csvio;
pub mod experiment;
pub mod sndlib;
pub mod topology;
pub mod traffic;

use std::path::Path;

use thiserror::Error;

use crate::exact_routing::RoutingError;
use crate::gnn::{CheckpointError, GnnError};
use crate::localsearch::SearchError;
use crate::netgraph::GraphError;
use crate::optimizer::OptimizeError;
use crate::trainer::TrainError;

pub use experiment::{run_experiment, summarize, Method, SuiteConfig};
pub use sndlib::parse_sndlib_native;
pub use topology::{parse_topology_json, CapacityMode, LinkEntry, NodeSpec, TopologySpec};
pub use traffic::{calibrate_scaling, generate_traffic_matrix, Calibration, Scaling, TrafficConfig};

#[derive(Debug, Error)]
pub enum WorkbenchError {
    #[error("syntax error at line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("unknown field {0:?}")]
    UnknownField(String),
    #[error("missing field {0:?}")]
    MissingField(String),
    #[error("bad reference: {0}")]
    BadReference(String),
    #[error("unsupported: {0}")]
    UnsupportedFeature(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("calibration did not converge after {0} bisections")]
    NoConvergence(usize),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Routing(#[from] RoutingError),
    #[error(transparent)]
    Gnn(#[from] GnnError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Optimize(#[from] OptimizeError),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl WorkbenchError {
    /// True when the input data, not the program, is at fault.
    pub fn is_data_error(&self) -> bool {
        match self {
            WorkbenchError::Syntax { .. }
            | WorkbenchError::UnknownField(_)
            | WorkbenchError::MissingField(_)
            | WorkbenchError::BadReference(_)
            | WorkbenchError::UnsupportedFeature(_)
            | WorkbenchError::Invalid(_)
            | WorkbenchError::Graph(_)
            | WorkbenchError::Csv(_)
            | WorkbenchError::Io(_)
            | WorkbenchError::Checkpoint(_)
            | WorkbenchError::Optimize(OptimizeError::InvalidConfig(_))
            | WorkbenchError::Search(SearchError::InvalidConfig(_))
            | WorkbenchError::Train(TrainError::InvalidParameters(_)) => true,
            _ => false,
        }
    }
}

/// Reads a topology file: `.json` documents as JSON, anything else as
/// SNDlib native text named after the file stem.
pub fn load_topology(path: &Path) -> Result<TopologySpec, WorkbenchError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| WorkbenchError::Invalid(format!("{}: {e}", path.display())))?;
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
        parse_topology_json(&text)
    } else {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("topology");
        parse_sndlib_native(&text, stem)
    }
}
