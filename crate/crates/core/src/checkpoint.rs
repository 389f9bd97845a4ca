//! Versioned JSON container for everything a run persists.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::decode::DecodedPolicy;
use crate::encoder::{EncoderConfig, Pretrained};
use crate::error::{Error, Result};
use crate::search::SearchState;
use crate::supernet::Supernet;

pub const FORMAT: &str = "adaptsearch-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Payload {
    Pretrained { encoder: EncoderConfig, pretrained: Pretrained },
    Supernet { net: Supernet, state: SearchState },
    Decoded { net: Supernet, policy: DecodedPolicy },
}

impl Payload {
    pub fn kind(&self) -> &'static str {
        match self {
            Payload::Pretrained { .. } => "pretrained",
            Payload::Supernet { .. } => "supernet",
            Payload::Decoded { .. } => "decoded",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub payload: Payload,
}

impl Checkpoint {
    pub fn new(config_hash: &str, payload: Payload) -> Self {
        Self { format: FORMAT.to_string(), version: VERSION, config_hash: config_hash.to_string(), payload }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("checkpoint serializes")
    }

    /// Writes atomically: temp file in the same directory, then rename.
    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes();
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("json.tmp");
        std::fs::write(&tmp, &bytes)?;
        std::fs::rename(&tmp, path)?;
        Ok(hex::encode(Sha256::digest(&bytes)))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let ck: Self = serde_json::from_slice(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        if ck.format != FORMAT {
            return Err(Error::Checkpoint(format!("{}: not a checkpoint (format '{}')", path.display(), ck.format)));
        }
        if ck.version != VERSION {
            return Err(Error::Checkpoint(format!("{}: version {} unsupported (expected {VERSION})", path.display(), ck.version)));
        }
        Ok(ck)
    }

    /// Loads a checkpoint of the given payload kind. A config hash other than
    /// `config_hash` is reported but allowed: command-line overrides such as
    /// `--episodes` change the hash between stages of one run.
    pub fn load_expecting(path: &Path, config_hash: &str, kind: &str) -> Result<Self> {
        let ck = Self::load(path)?;
        if ck.config_hash != config_hash {
            log::warn!("{} was written under config {}, current config is {config_hash}", path.display(), ck.config_hash);
        }
        if ck.payload.kind() != kind {
            return Err(Error::Checkpoint(format!("{} holds a {} checkpoint, expected {kind}", path.display(), ck.payload.kind())));
        }
        Ok(ck)
    }
}

/// SHA-256 of a file's bytes.
pub fn file_hash(path: &Path) -> Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}
