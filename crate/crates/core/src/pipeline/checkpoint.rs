//! Versioned model checkpoints: canonical JSON with a fixed field order, so
//! save -> load -> save is byte-identical. The knowledge snapshot hash is
//! embedded and checked (warning only) at load time.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adaptation::{Ablation, ModelParams, TrainConfig};
use crate::encoder::Vocab;
use crate::error::{Error, Result};
use crate::pipeline::atomic_write;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub seed: u64,
    pub config: TrainConfig,
    pub ablation: Ablation,
    pub kb_hash: String,
    pub vocab: Vocab,
    pub params: ModelParams,
}

impl Checkpoint {
    pub fn new(
        config: TrainConfig,
        ablation: Ablation,
        kb_hash: String,
        vocab: Vocab,
        params: ModelParams,
    ) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            seed: config.seed,
            config,
            ablation,
            kb_hash,
            vocab,
            params,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self)
            .map_err(|e| Error::Data(format!("serialize checkpoint: {e}")))?;
        atomic_write(path, json.as_bytes())
    }

    /// Load and validate. When `kb_hash` is given and differs from the
    /// recorded one, a warning is printed; the checkpoint still loads.
    pub fn load(path: &Path, kb_hash: Option<&str>) -> Result<Checkpoint> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("{}: malformed checkpoint: {e}", path.display())))?;
        if ckpt.format_version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!(
                "{}: unsupported checkpoint version {} (expected {})",
                path.display(),
                ckpt.format_version,
                CHECKPOINT_VERSION
            )));
        }
        if let Some(hash) = kb_hash {
            if hash != ckpt.kb_hash {
                eprintln!(
                    "warning: knowledge snapshot hash mismatch (checkpoint {}..., loaded {}...); predictions may not be reproducible",
                    &ckpt.kb_hash[..12.min(ckpt.kb_hash.len())],
                    &hash[..12.min(hash.len())]
                );
            }
        }
        Ok(ckpt)
    }
}
