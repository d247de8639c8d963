use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{NetworkError, ParamBlock, RouterConfig, RouterParams};
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlockRecord {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Trained weights together with the config that shapes them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CheckpointRecord", into = "CheckpointRecord")]
pub struct Checkpoint {
    pub config: RouterConfig,
    pub params: RouterParams,
    pub rng_seed: u64,
    pub training_meta: serde_json::Value,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointRecord {
    format_version: u32,
    config: RouterConfig,
    blocks: Vec<BlockRecord>,
    rng_seed: u64,
    #[serde(default)]
    training_meta: serde_json::Value,
}

impl TryFrom<CheckpointRecord> for Checkpoint {
    type Error = String;

    fn try_from(r: CheckpointRecord) -> Result<Self, String> {
        if r.format_version != CHECKPOINT_FORMAT {
            return Err(format!(
                "unsupported checkpoint format {} (expected {CHECKPOINT_FORMAT})",
                r.format_version
            ));
        }
        let blocks = r
            .blocks
            .into_iter()
            .map(|b| {
                Tensor::new(b.shape, b.data)
                    .map(|tensor| ParamBlock { name: b.name, tensor })
                    .map_err(|e| e.to_string())
            })
            .collect::<Result<Vec<_>, _>>()?;
        let params = RouterParams { blocks };
        params.check(&r.config).map_err(|e| e.to_string())?;
        Ok(Self {
            config: r.config,
            params,
            rng_seed: r.rng_seed,
            training_meta: r.training_meta,
        })
    }
}

impl From<Checkpoint> for CheckpointRecord {
    fn from(c: Checkpoint) -> Self {
        Self {
            format_version: CHECKPOINT_FORMAT,
            config: c.config,
            blocks: c
                .params
                .blocks
                .into_iter()
                .map(|b| BlockRecord {
                    name: b.name,
                    shape: b.tensor.shape().to_vec(),
                    data: b.tensor.data().to_vec(),
                })
                .collect(),
            rng_seed: c.rng_seed,
            training_meta: c.training_meta,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("cannot access checkpoint {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("malformed checkpoint {path}: {source}")]
    Parse { path: String, source: serde_json::Error },
    #[error(transparent)]
    Network(#[from] NetworkError),
}

impl Checkpoint {
    pub fn new(config: RouterConfig, params: RouterParams, rng_seed: u64) -> Result<Self, NetworkError> {
        params.check(&config)?;
        Ok(Self {
            config,
            params,
            rng_seed,
            training_meta: serde_json::Value::Null,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let text = serde_json::to_string(self).expect("checkpoint serializes");
        std::fs::write(path, text).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let text = std::fs::read_to_string(path).map_err(|source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        })?;
        serde_json::from_str(&text).map_err(|source| CheckpointError::Parse {
            path: path.display().to_string(),
            source,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = RouterConfig::for_data(4, 3, 7, 5);
        let params = RouterParams::init(&cfg, 11).unwrap();
        let mut ck = Checkpoint::new(cfg, params, 11).unwrap();
        ck.training_meta = serde_json::json!({"best_epoch": 3});
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        for (a, b) in back.params.blocks.iter().zip(&ck.params.blocks) {
            for (x, y) in a.tensor.data().iter().zip(b.tensor.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn rejects_bad_versions_and_shapes() {
        let cfg = RouterConfig::for_data(4, 3, 7, 5);
        let params = RouterParams::init(&cfg, 1).unwrap();
        let ck = Checkpoint::new(cfg, params, 1).unwrap();
        let mut v = serde_json::to_value(&ck).unwrap();
        v["format_version"] = 99.into();
        assert!(serde_json::from_value::<Checkpoint>(v.clone()).is_err());
        v["format_version"] = CHECKPOINT_FORMAT.into();
        v["blocks"][0]["shape"] = serde_json::json!([1, 1]);
        assert!(serde_json::from_value::<Checkpoint>(v).is_err());
    }
}
