//! The student grounding network.

mod boxes;
mod config;
pub mod layers;
mod params;
mod student;

use std::path::Path;

pub use boxes::BoundingBox;
pub use config::ModelConfig;
pub use layers::Ctx;
pub use params::{Bound, Initializer, ParamEntry, ParamGroup, ParamId, ParamSet};
pub use student::{key_mask, JointSequence, StudentModel, StudentOutput};

use crate::checkpoint::{Container, STUDENT_MAGIC};
use crate::error::{Error, Result};
use crate::kv::KvConfig;
use crate::scalar::Real;

impl<T: Real> StudentModel<T> {
    pub fn to_container(&self) -> Container<T> {
        Container {
            config: self.config().pairs(),
            tensors: self.params().named_tensors(),
        }
    }

    pub fn from_container(c: Container<T>) -> Result<Self> {
        let mut config = ModelConfig::default();
        for (k, v) in &c.config {
            // Trainer checkpoints carry extra keys alongside the model's.
            config.set(k, v)?;
        }
        let model_names: Vec<String> = Self::new(config.clone(), 0)?
            .params()
            .entries()
            .iter()
            .map(|e| e.name.clone())
            .collect();
        let tensors = c
            .tensors
            .into_iter()
            .filter(|(n, _)| model_names.contains(n))
            .collect::<Vec<_>>();
        if tensors.len() != model_names.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {} of the {} model parameters",
                tensors.len(),
                model_names.len()
            )));
        }
        Self::from_named(config, tensors)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path, STUDENT_MAGIC)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(Container::load(path, STUDENT_MAGIC)?)
    }
}
