//! Combined run configuration, stored as canonical JSON.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::optim::OptimConfig;
use crate::synthdata::TaskSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// Prob layers trained with the GECO objective.
    Prob,
    /// Same backbone without prob layers, trained on cross-entropy alone.
    Vanilla,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: ModelKind,
    pub batch_size: usize,
    pub kappa_init: f64,
    pub kappa_annealing: bool,
    /// Hold `lambda` at its initial value of 1.
    pub freeze_lambda: bool,
    pub seed: u64,
    /// Realizations per validation sample.
    pub val_realizations: usize,
    /// Validation samples scored per epoch (0 means all).
    pub val_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ModelKind::Prob,
            batch_size: 32,
            kappa_init: 0.1,
            kappa_annealing: true,
            freeze_lambda: false,
            seed: 0,
            val_realizations: 10,
            val_samples: 200,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.kappa_init >= 0.0 && self.kappa_init.is_finite()) {
            return Err(Error::Config(format!("kappa_init {} must be non-negative", self.kappa_init)));
        }
        if self.val_realizations == 0 {
            return Err(Error::Config("val_realizations must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub task: TaskSpec,
    pub model: ModelConfig,
    pub optim: OptimConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            task: TaskSpec::default(),
            model: ModelConfig::default(),
            optim: OptimConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    /// Desk-scale setup: small task, two-block model, 10k steps, `kappa_init` 0.4.
    pub fn desk() -> Self {
        let task = TaskSpec::desk();
        Self {
            model: ModelConfig {
                n_blocks: 2,
                prob_blocks: vec![1, 2],
                d_model: 64,
                d_ff: 256,
                d_z: 64,
                n_heads: 2,
                vocab_in: task.vocab_in,
                vocab_out: task.vocab_out,
                dropout: 0.1,
            },
            optim: OptimConfig { epochs: 20, steps_per_epoch: 500, ..OptimConfig::default() },
            train: TrainConfig { kappa_init: 0.4, ..TrainConfig::default() },
            task,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.model.validate()?;
        self.optim.validate()?;
        self.train.validate()?;
        if self.model.vocab_in != self.task.vocab_in || self.model.vocab_out != self.task.vocab_out {
            return Err(Error::Config(format!(
                "model vocabularies {}/{} differ from task {}/{}",
                self.model.vocab_in, self.model.vocab_out, self.task.vocab_in, self.task.vocab_out
            )));
        }
        Ok(())
    }

    /// Model actually trained: vanilla runs drop every prob layer.
    pub fn effective_model(&self) -> ModelConfig {
        match self.train.model {
            ModelKind::Prob => self.model.clone(),
            ModelKind::Vanilla => self.model.vanilla(),
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    /// Dotted paths of every field that differs from `other`.
    pub fn diff(&self, other: &Self) -> Vec<String> {
        let a = serde_json::to_value(self).expect("config serializes");
        let b = serde_json::to_value(other).expect("config serializes");
        let mut out = Vec::new();
        diff_values("", &a, &b, &mut out);
        out
    }
}

fn diff_values(path: &str, a: &serde_json::Value, b: &serde_json::Value, out: &mut Vec<String>) {
    match (a, b) {
        (serde_json::Value::Object(x), serde_json::Value::Object(y)) => {
            for (k, va) in x {
                let p = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
                match y.get(k) {
                    Some(vb) => diff_values(&p, va, vb, out),
                    None => out.push(p),
                }
            }
        }
        _ if a != b => out.push(path.to_string()),
        _ => {}
    }
}
