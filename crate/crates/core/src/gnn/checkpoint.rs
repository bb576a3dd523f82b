use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{GnnConfig, GnnError, GnnModel, EDGE_FEATURES, NODE_FEATURES};
use crate::diffcore::Tensor;

pub const CHECKPOINT_FORMAT: &str = "rbb-gnn";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("unsupported checkpoint: {0}")]
    Unsupported(String),
    #[error("checkpoint does not match the architecture: {0}")]
    Mismatch(String),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Document {
    format: String,
    version: u32,
    hidden: usize,
    rounds: usize,
    shared_processor: bool,
    node_features: usize,
    edge_features: usize,
    params: Vec<Param>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Param {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

pub(super) fn to_json(model: &GnnModel) -> Result<String, CheckpointError> {
    let cfg = model.config();
    let doc = Document {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        hidden: cfg.hidden,
        rounds: cfg.rounds,
        shared_processor: cfg.shared_processor,
        node_features: NODE_FEATURES,
        edge_features: EDGE_FEATURES,
        params: model
            .named_params()
            .into_iter()
            .map(|(name, t)| Param {
                name,
                shape: t.shape().to_vec(),
                values: t.data().to_vec(),
            })
            .collect(),
    };
    if !model.is_finite() {
        return Err(CheckpointError::Unsupported("non-finite parameter".into()));
    }
    let mut text = serde_json::to_string_pretty(&doc)?;
    text.push('\n');
    Ok(text)
}

pub(super) fn from_json(text: &str) -> Result<GnnModel, CheckpointError> {
    let doc: Document = serde_json::from_str(text)?;
    if doc.format != CHECKPOINT_FORMAT {
        return Err(CheckpointError::Unsupported(format!("format {:?}", doc.format)));
    }
    if doc.version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Unsupported(format!("version {}", doc.version)));
    }
    if doc.node_features != NODE_FEATURES || doc.edge_features != EDGE_FEATURES {
        return Err(CheckpointError::Mismatch(format!(
            "feature widths {}/{}",
            doc.node_features, doc.edge_features
        )));
    }
    let config = GnnConfig {
        hidden: doc.hidden,
        rounds: doc.rounds,
        shared_processor: doc.shared_processor,
    };
    let template = GnnModel::new(config, 0).map_err(|e| CheckpointError::Mismatch(e.to_string()))?;
    let expected: Vec<String> = template.named_params().into_iter().map(|(n, _)| n).collect();
    if expected.len() != doc.params.len() {
        return Err(CheckpointError::Mismatch(format!(
            "{} parameters, expected {}",
            doc.params.len(),
            expected.len()
        )));
    }
    let mut tensors = Vec::with_capacity(doc.params.len());
    for (p, name) in doc.params.into_iter().zip(&expected) {
        if &p.name != name {
            return Err(CheckpointError::Mismatch(format!(
                "parameter {:?} where {:?} was expected",
                p.name, name
            )));
        }
        let t = Tensor::new(p.shape, p.values)
            .map_err(|e| CheckpointError::Mismatch(format!("{name}: {e}")))?;
        tensors.push(t);
    }
    GnnModel::from_parts(config, tensors.into_iter()).map_err(|e| match e {
        GnnError::ShapeMismatch(m) => CheckpointError::Mismatch(m),
        other => CheckpointError::Mismatch(other.to_string()),
    })
}

pub(super) fn save(model: &GnnModel, path: &Path) -> Result<(), CheckpointError> {
    std::fs::write(path, to_json(model)?)?;
    Ok(())
}

pub(super) fn load(path: &Path) -> Result<GnnModel, CheckpointError> {
    from_json(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> GnnModel {
        GnnModel::new(
            GnnConfig {
                hidden: 4,
                rounds: 2,
                shared_processor: false,
            },
            9,
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let m = tiny();
        let a = m.save_json().unwrap();
        let back = GnnModel::load_json(&a).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.save_json().unwrap(), a);
    }

    #[test]
    fn shared_processor_round_trips() {
        let m = GnnModel::new(
            GnnConfig {
                hidden: 3,
                rounds: 5,
                shared_processor: true,
            },
            1,
        )
        .unwrap();
        assert_eq!(m.blocks.len(), 1);
        let back = GnnModel::load_json(&m.save_json().unwrap()).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn rejects_tampered_documents() {
        let text = tiny().save_json().unwrap();
        let bad_version = text.replacen("\"version\": 1", "\"version\": 7", 1);
        assert!(matches!(
            GnnModel::load_json(&bad_version),
            Err(CheckpointError::Unsupported(_))
        ));
        let bad_name = text.replacen("encoder.node.layer1.bias", "encoder.node.bias", 1);
        assert!(matches!(
            GnnModel::load_json(&bad_name),
            Err(CheckpointError::Mismatch(_))
        ));
        let extra = text.replacen("\"rounds\"", "\"colour\": 1,\n  \"rounds\"", 1);
        assert!(matches!(GnnModel::load_json(&extra), Err(CheckpointError::Parse(_))));
        assert!(matches!(GnnModel::load_json("{"), Err(CheckpointError::Parse(_))));
    }
}
