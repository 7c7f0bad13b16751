use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, ParamStore};
use crate::autograd::Matrix;
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const FORMAT: &str = "owmd-checkpoint";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StoredTensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// On-disk container: format tag, version, config echo and named tensors.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    format: String,
    version: u32,
    pub model: ModelConfig,
    /// Full run configuration that produced the weights, if any.
    pub run_config: Option<serde_json::Value>,
    params: BTreeMap<String, StoredTensor>,
}

impl Checkpoint {
    pub fn from_model(model: &Model, run_config: Option<serde_json::Value>) -> Self {
        let params = model
            .params()
            .iter()
            .map(|(name, m)| {
                let (rows, cols) = m.dim();
                (
                    name.clone(),
                    StoredTensor {
                        rows,
                        cols,
                        data: m.iter().copied().collect(),
                    },
                )
            })
            .collect();
        Checkpoint {
            format: FORMAT.into(),
            version: CHECKPOINT_VERSION,
            model: model.config().clone(),
            run_config,
            params,
        }
    }

    pub fn into_model(self) -> Result<Model> {
        if self.format != FORMAT {
            return Err(Error::ConfigMismatch(format!("not a checkpoint (format {:?})", self.format)));
        }
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint version {} is not supported (expected {CHECKPOINT_VERSION})",
                self.version
            )));
        }
        let mut tensors = BTreeMap::new();
        for (name, t) in self.params {
            let m = Matrix::from_shape_vec((t.rows, t.cols), t.data).map_err(|e| {
                Error::ConfigMismatch(format!("parameter `{name}`: {e}"))
            })?;
            tensors.insert(name, m);
        }
        Model::from_parts(self.model, ParamStore::from_tensors(tensors))
    }
}

pub fn save_checkpoint(path: &Path, model: &Model, run_config: Option<serde_json::Value>) -> Result<()> {
    let ckpt = Checkpoint::from_model(model, run_config);
    let text = serde_json::to_string(&ckpt)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint. With `expected` set, the stored model configuration
/// must match it exactly.
pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<(Model, Option<serde_json::Value>)> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ckpt: Checkpoint = serde_json::from_str(&text)?;
    if let Some(cfg) = expected {
        if *cfg != ckpt.model {
            return Err(Error::ConfigMismatch(format!(
                "checkpoint model config differs from the runtime config\n  checkpoint: {:?}\n  runtime:    {:?}",
                ckpt.model, cfg
            )));
        }
    }
    let run_config = ckpt.run_config.clone();
    Ok((ckpt.into_model()?, run_config))
}
