use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{LabelScale, ModelParams};
use crate::params::{named, Visit};
use crate::tensor::Tensor;

pub const FORMAT: &str = "agegraph-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

/// Parameters plus everything needed to rerun or evaluate them, stored as
/// JSON with round-trip float formatting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config: TrainConfig,
    /// Epoch (1-based) whose parameters are stored; 0 before training.
    pub epoch: usize,
    /// Seed of the training stream and the number of optimizer steps taken;
    /// all sampling is derived from these two.
    pub seed: u64,
    pub steps: u64,
    pub label_scale: LabelScale,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn new(config: &TrainConfig, epoch: usize, steps: u64, scale: LabelScale, params: &ModelParams) -> Self {
        Checkpoint {
            format: FORMAT.into(),
            version: VERSION,
            config: config.clone(),
            epoch,
            seed: config.seed,
            steps,
            label_scale: scale,
            tensors: named(params)
                .into_iter()
                .map(|(name, t)| NamedTensor {
                    name,
                    tensor: t.clone(),
                })
                .collect(),
        }
    }

    /// Rebuilds the parameter struct, checking every name and shape.
    pub fn params(&self) -> Result<ModelParams> {
        let mut params = ModelParams::init(&self.config.model, 0);
        let expected = named(&params).len();
        if expected != self.tensors.len() {
            return Err(self.mismatch(format!(
                "{} tensors stored, model expects {expected}",
                self.tensors.len()
            )));
        }
        let mut stored = self.tensors.iter();
        let mut problem = None;
        params.visit_mut(&mut |name, slot| {
            let entry = stored.next().expect("counts checked");
            if problem.is_some() {
                return;
            }
            if entry.name != name || entry.tensor.shape() != slot.shape() {
                problem = Some(format!(
                    "tensor `{}` {:?} does not fit `{name}` {:?}",
                    entry.name,
                    entry.tensor.shape(),
                    slot.shape()
                ));
                return;
            }
            *slot = entry.tensor.clone();
        });
        match problem {
            Some(p) => Err(self.mismatch(p)),
            None => Ok(params),
        }
    }

    fn mismatch(&self, detail: String) -> Error {
        Error::Config(format!("checkpoint v{} does not match its model config: {detail}", self.version))
    }

    /// Rejects a checkpoint whose model differs from `model`.
    pub fn check_compatible(&self, config: &TrainConfig) -> Result<()> {
        if self.config.model != config.model {
            return Err(Error::Config(format!(
                "checkpoint v{} was trained with a different model configuration",
                self.version
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            format: String,
            version: u32,
        }
        let header: Header = serde_json::from_str(text)
            .map_err(|e| Error::Data(format!("not a checkpoint: {e}")))?;
        if header.format != FORMAT {
            return Err(Error::Data(format!("unknown checkpoint format `{}`", header.format)));
        }
        if header.version != VERSION {
            return Err(Error::Data(format!(
                "checkpoint version {} is not supported (expected {VERSION})",
                header.version
            )));
        }
        serde_json::from_str(text).map_err(|e| Error::Data(format!("corrupt checkpoint v{VERSION}: {e}")))
    }

    /// Writes via a temporary file so a failed run leaves no partial checkpoint.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.to_json()).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}
