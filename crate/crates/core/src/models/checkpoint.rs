//! Weights go to a safetensors file; a JSON sidecar with the same stem
//! records what produced them.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Network, TrainConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub architecture: String,
    pub config_hash: String,
    pub epoch: usize,
    pub val_loss: f64,
    pub train_config: TrainConfig,
    pub dataset_fingerprint: String,
}

impl CheckpointMeta {
    pub fn new(architecture: &str, train_config: &TrainConfig, epoch: usize, val_loss: f64, dataset_fingerprint: &str) -> Self {
        let json = serde_json::to_vec(train_config).expect("config serializes");
        let config_hash = Sha256::digest(&json)
            .iter()
            .take(8)
            .map(|b| format!("{b:02x}"))
            .collect();
        Self {
            architecture: architecture.to_string(),
            config_hash,
            epoch,
            val_loss,
            train_config: train_config.clone(),
            dataset_fingerprint: dataset_fingerprint.to_string(),
        }
    }
}

pub fn meta_path(weights: &Path) -> PathBuf {
    weights.with_extension("json")
}

pub fn save_checkpoint(net: &dyn Network, path: &Path, meta: &CheckpointMeta) -> Result<()> {
    if meta.architecture != net.name() {
        return Err(Error::Config(format!(
            "metadata architecture {} does not match network {}",
            meta.architecture,
            net.name()
        )));
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    net.var_store().save(path)?;
    fs::write(meta_path(path), serde_json::to_string_pretty(meta)?)?;
    Ok(())
}

pub fn load_checkpoint(net: &mut dyn Network, path: &Path) -> Result<CheckpointMeta> {
    let meta: CheckpointMeta = serde_json::from_slice(&fs::read(meta_path(path))?)?;
    if meta.architecture != net.name() {
        return Err(Error::Config(format!(
            "checkpoint holds a {} but a {} was requested",
            meta.architecture,
            net.name()
        )));
    }
    net.var_store_mut().load(path)?;
    Ok(meta)
}
