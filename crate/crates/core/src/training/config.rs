use serde::{Deserialize, Serialize};

use crate::contrastive::LossConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Adaptive moments with decoupled weight decay.
    AdamW,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Caps the batch at 32 when the training set has fewer than 1000 samples.
    pub shrink_small_batches: bool,
    pub dropout: f64,
    pub weight_decay: f64,
    pub learning_rate: f64,
    pub mask_rate: f64,
    pub seed: u64,
    /// `λ`, weight of the L1 age term.
    pub age_loss_weight: f64,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Count `|error| < L` instead of `≤ L` in cumulative scores.
    pub cs_strict: bool,
    pub loss: LossConfig,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 196,
            shrink_small_batches: true,
            dropout: 0.5,
            weight_decay: 1e-4,
            learning_rate: 1e-4,
            mask_rate: 0.6,
            seed: 0,
            age_loss_weight: 1.0,
            optimizer: OptimizerKind::AdamW,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            cs_strict: false,
            loss: LossConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

pub const SMALL_DATASET: usize = 1000;
pub const SMALL_BATCH: usize = 32;

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        for (name, v) in [
            ("weight_decay", self.weight_decay),
            ("learning_rate", self.learning_rate),
            ("age_loss_weight", self.age_loss_weight),
            ("epsilon", self.epsilon),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be a finite non-negative number, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0,1), got {}", self.dropout)));
        }
        if !(0.0..=1.0).contains(&self.mask_rate) {
            return Err(Error::Config(format!("mask_rate must lie in [0,1], got {}", self.mask_rate)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0,1), got {b}")));
            }
        }
        self.loss.validate(true)?;
        if self.loss.neighbor_samples > self.model.k {
            return Err(Error::Config(format!(
                "loss.neighbor_samples {} exceeds model.k {}",
                self.loss.neighbor_samples, self.model.k
            )));
        }
        self.model.validate()
    }

    /// Batch size used for a training set of `n` samples.
    pub fn effective_batch(&self, n: usize) -> usize {
        let b = if self.shrink_small_batches && n < SMALL_DATASET {
            self.batch_size.min(SMALL_BATCH)
        } else {
            self.batch_size
        };
        b.max(1)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies a dotted `key.path=value` override. The value is parsed as a
    /// TOML literal, falling back to a bare string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        let key = key.trim();
        let raw = raw.trim();
        let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));

        let mut root = toml::Value::try_from(&*self).expect("config serializes");
        let mut slot = &mut root;
        let parts: Vec<&str> = key.split('.').collect();
        for (depth, part) in parts.iter().enumerate() {
            let table = slot
                .as_table_mut()
                .ok_or_else(|| Error::Config(format!("`{key}` does not name a config section")))?;
            if !table.contains_key(*part) {
                return Err(Error::Config(format!("unknown config key `{key}`")));
            }
            slot = table.get_mut(*part).expect("checked");
            if depth + 1 == parts.len() {
                *slot = coerce(slot, value.clone());
            }
        }
        let updated: TrainConfig = root
            .try_into()
            .map_err(|e| Error::Config(format!("override `{assignment}`: {e}")))?;
        *self = updated;
        Ok(())
    }
}

/// Integer literals assigned to float keys become floats.
fn coerce(existing: &toml::Value, value: toml::Value) -> toml::Value {
    match (existing, &value) {
        (toml::Value::Float(_), toml::Value::Integer(i)) => toml::Value::Float(*i as f64),
        _ => value,
    }
}
