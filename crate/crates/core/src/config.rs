//! Run configuration files (TOML, fail-closed on unknown keys) and the
//! model registry file (JSON) mapping model ids to checkpoints with
//! content hashes.

use crate::adapters::{Family, ModelAdapter};
use crate::alignment::AlignmentConfig;
use crate::attack::AttackSpec;
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::selfadv::SelfAdvConfig;
use crate::trainer::TrainerConfig;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

/// One run-configuration file; sections mirror the config types exactly
/// and unknown keys are errors.
#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub alignment: Option<AlignmentConfig>,
    pub self_adv: Option<SelfAdvConfig>,
    pub trainer: Option<TrainerConfig>,
    pub attack: Option<AttackSpec>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("bad config {}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, self.to_toml())?;
        Ok(())
    }

    pub fn alignment_or_default(&self) -> AlignmentConfig {
        self.alignment.clone().unwrap_or_default()
    }

    pub fn self_adv_or_default(&self) -> SelfAdvConfig {
        self.self_adv.clone().unwrap_or_default()
    }

    pub fn trainer_or_default(&self) -> TrainerConfig {
        self.trainer.clone().unwrap_or_default()
    }

    pub fn attack_or_default(&self) -> AttackSpec {
        self.attack.clone().unwrap_or_default()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// One registry entry per model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegistryEntry {
    pub model_id: String,
    pub family: Family,
    pub arch: String,
    /// Checkpoint path, relative to the registry file's directory.
    pub checkpoint: PathBuf,
    /// Content hash of the checkpoint file.
    pub sha256: String,
    pub num_classes: usize,
    pub input_size: (usize, usize),
    pub channels: usize,
    pub normalization: Normalization,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ModelRegistry {
    pub models: Vec<RegistryEntry>,
}

impl ModelRegistry {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read registry {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("bad registry {}: {e}", path.display())))
    }

    pub fn load_or_empty(path: &Path) -> Result<Self> {
        if path.is_file() {
            Self::load(path)
        } else {
            Ok(ModelRegistry::default())
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, serde_json::to_vec_pretty(self).expect("registry encodes"))?;
        Ok(())
    }

    pub fn get(&self, model_id: &str) -> Result<&RegistryEntry> {
        self.models.iter().find(|m| m.model_id == model_id).ok_or_else(|| {
            Error::Config(format!(
                "model '{}' not in registry; known: {}",
                model_id,
                self.models.iter().map(|m| m.model_id.as_str()).collect::<Vec<_>>().join(", ")
            ))
        })
    }

    /// Insert or replace an entry by id.
    pub fn upsert(&mut self, entry: RegistryEntry) {
        if let Some(slot) = self.models.iter_mut().find(|m| m.model_id == entry.model_id) {
            *slot = entry;
        } else {
            self.models.push(entry);
        }
    }

    /// Restore a model from its registered checkpoint, verifying the
    /// recorded content hash.
    pub fn load_model(&self, model_id: &str, registry_dir: &Path) -> Result<Box<dyn ModelAdapter>> {
        let entry = self.get(model_id)?;
        let path = registry_dir.join(&entry.checkpoint);
        let hash = checkpoint::file_hash(&path)?;
        if hash != entry.sha256 {
            return Err(Error::Integrity(format!(
                "checkpoint {} hash {} does not match registry entry {}",
                path.display(),
                hash,
                entry.sha256
            )));
        }
        let adapter = checkpoint::restore(&path)?;
        if adapter.model_id() != model_id {
            return Err(Error::Integrity(format!(
                "checkpoint contains model '{}', registry says '{}'",
                adapter.model_id(),
                model_id
            )));
        }
        Ok(adapter)
    }
}

/// Build a registry entry for a freshly saved checkpoint.
pub fn entry_for(adapter: &dyn ModelAdapter, checkpoint: PathBuf, sha256: String) -> RegistryEntry {
    let m = adapter.meta();
    RegistryEntry {
        model_id: m.model_id.clone(),
        family: m.family,
        arch: adapter.arch_name().to_string(),
        checkpoint,
        sha256,
        num_classes: m.num_classes,
        input_size: m.input_size,
        channels: m.channels,
        normalization: Normalization {
            mean: m.mean.clone(),
            std: m.std.clone(),
        },
    }
}
