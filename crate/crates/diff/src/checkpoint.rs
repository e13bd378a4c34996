//! JSON checkpoints: `{"format_version": 1, "params": {...}, "adam": ...}`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adam::AdamState;
use crate::params::ParamStore;
use crate::DiffError;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub params: ParamStore,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub adam: Option<AdamState>,
    /// Free-form model description (architecture sizes and the like).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<serde_json::Value>,
}

impl Checkpoint {
    pub fn new(params: ParamStore) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            params,
            adam: None,
            meta: None,
        }
    }

    pub fn to_json(&self) -> Result<String, DiffError> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, DiffError> {
        let ckpt: Checkpoint = serde_json::from_str(text)?;
        if ckpt.format_version != FORMAT_VERSION {
            return Err(DiffError::CheckpointVersion {
                found: ckpt.format_version,
                supported: FORMAT_VERSION,
            });
        }
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<(), DiffError> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DiffError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
