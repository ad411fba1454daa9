use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{MovaError, Result};
use crate::experts::ExpertRegistry;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GatingMode {
    Dynamic,
    Uniform,
}

impl fmt::Display for GatingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GatingMode::Dynamic => "dynamic",
            GatingMode::Uniform => "uniform",
        })
    }
}

impl FromStr for GatingMode {
    type Err = MovaError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dynamic" => Ok(GatingMode::Dynamic),
            "uniform" => Ok(GatingMode::Uniform),
            other => Err(MovaError::Usage(format!("unknown gating mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub num_blocks: usize,
    pub hidden_dim: usize,
    pub text_dim: usize,
    pub gating_hidden: usize,
    pub ffn_expansion: usize,
    pub heads: usize,
    pub llm_dim: usize,
    pub gating_mode: GatingMode,
    pub seed: u64,
}

impl AdapterConfig {
    /// Desk-scale configuration matching the default 8×8×8 base.
    pub fn desk() -> Self {
        Self {
            num_blocks: 3,
            hidden_dim: 8,
            text_dim: 8,
            gating_hidden: 16,
            ffn_expansion: 4,
            heads: 1,
            llm_dim: 32,
            gating_mode: GatingMode::Dynamic,
            seed: 42,
        }
    }

    /// Full-scale widths: 1024-wide adapter, 768-wide text token, 4096-wide
    /// language model embedding.
    pub fn reference() -> Self {
        Self {
            num_blocks: 3,
            hidden_dim: 1024,
            text_dim: 768,
            gating_hidden: 1024,
            ffn_expansion: 4,
            heads: 1,
            llm_dim: 4096,
            gating_mode: GatingMode::Dynamic,
            seed: 42,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("num_blocks", self.num_blocks),
            ("hidden_dim", self.hidden_dim),
            ("text_dim", self.text_dim),
            ("gating_hidden", self.gating_hidden),
            ("ffn_expansion", self.ffn_expansion),
            ("heads", self.heads),
            ("llm_dim", self.llm_dim),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(MovaError::Validation(format!("adapter {name} must be at least 1")));
            }
        }
        if !self.hidden_dim.is_multiple_of(self.heads) {
            return Err(MovaError::Validation(format!(
                "hidden_dim {} is not divisible by {} heads",
                self.hidden_dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn check_registry(&self, registry: &ExpertRegistry) -> Result<()> {
        self.validate()?;
        registry.validate()?;
        if registry.base.channels != self.hidden_dim {
            return Err(MovaError::Validation(format!(
                "adapter hidden_dim {} differs from base channels {}",
                self.hidden_dim, registry.base.channels
            )));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| MovaError::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| MovaError::json(path.display().to_string(), e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text =
            serde_json::to_string_pretty(self).map_err(|e| MovaError::json("adapter config", e))?;
        text.push('\n');
        fs::write(path, text).map_err(|e| MovaError::io(path, e))
    }
}
