//! Run configuration: one TOML document covering world, codebook, model,
//! training and evaluation, identified by a content hash.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::ModelConfig;
use crate::rng;
use crate::storyworld::WorldConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config encode: {0}")]
    Encode(#[from] toml::ser::Error),
    #[error("unknown preset {0:?} (expected desk or paper)")]
    Preset(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodebookConfig {
    pub size: usize,
    pub patch: usize,
    pub max_iters: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Evaluate on at most this many test stories.
    pub max_stories: Option<usize>,
    /// Also caption the test images and report BLEU.
    pub captions: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub world: WorldConfig,
    pub data: DataConfig,
    pub codebook: CodebookConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

/// Sub-seeds derived from the run seed.
pub mod seeds {
    pub const DATA: u64 = 10;
    pub const MODEL: u64 = 11;
    pub const CODEBOOK: u64 = 12;
    pub const TRAIN: u64 = 13;
}

impl RunConfig {
    pub fn desk() -> Self {
        Self {
            seed: 0,
            world: WorldConfig::default(),
            data: DataConfig { n_train: 500, n_val: 50, n_test: 100 },
            codebook: CodebookConfig { size: 64, patch: 8, max_iters: 50 },
            model: ModelConfig::desk(),
            train: TrainConfig::desk(),
            eval: EvalConfig { max_stories: None, captions: true },
        }
    }

    pub fn paper() -> Self {
        Self {
            codebook: CodebookConfig { size: ModelConfig::paper().codebook_size, patch: 8, max_iters: 50 },
            model: ModelConfig::paper(),
            train: TrainConfig::paper(),
            ..Self::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self, ConfigError> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(ConfigError::Preset(other.to_string())),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> Result<String, ConfigError> {
        Ok(toml::to_string(self)?)
    }

    /// Checks every section and their mutual consistency.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |e: String| ConfigError::Invalid(e);
        self.world.validate().map_err(|e| invalid(e.to_string()))?;
        self.model.validate().map_err(|e| invalid(e.to_string()))?;
        self.train.validate().map_err(|e| invalid(e.to_string()))?;
        if self.codebook.size != self.model.codebook_size {
            return Err(invalid(format!("codebook size {} but model expects {}", self.codebook.size, self.model.codebook_size)));
        }
        if self.model.frames != self.world.frames {
            return Err(invalid(format!("model frames {} but world frames {}", self.model.frames, self.world.frames)));
        }
        if self.codebook.patch == 0 || crate::storyworld::SIZE % self.codebook.patch != 0 {
            return Err(invalid(format!("patch {} does not tile the image", self.codebook.patch)));
        }
        let grid = crate::storyworld::SIZE / self.codebook.patch;
        if grid * grid != self.model.t_image {
            return Err(invalid(format!("{} image tokens per frame but model t_image is {}", grid * grid, self.model.t_image)));
        }
        Ok(())
    }

    pub fn seed_for(&self, purpose: u64) -> u64 {
        rng::derive_seed(self.seed, &[purpose])
    }

    /// The training config with its seed derived from the run seed.
    pub fn resolved_train(&self) -> TrainConfig {
        TrainConfig { seed: self.seed_for(seeds::TRAIN), ..self.train.clone() }
    }

    /// SHA-256 of the canonical JSON form (object keys sorted), so the
    /// hash ignores key order and formatting of the source file.
    pub fn hash(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let canonical = serde_json::to_vec(&value).expect("json value serializes");
        hex::encode(Sha256::digest(&canonical))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_roundtrip_and_presets_validate() {
        for cfg in [RunConfig::desk(), RunConfig::paper()] {
            let back = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
            assert_eq!(back, cfg);
            assert_eq!(back.hash(), cfg.hash());
        }
        RunConfig::desk().validate().unwrap();
        assert!(matches!(RunConfig::preset("huge"), Err(ConfigError::Preset(_))));
    }

    #[test]
    fn hash_ignores_key_order() {
        let text = RunConfig::desk().to_toml().unwrap();
        let mut sections: Vec<&str> = text.split("\n[").collect();
        let head = sections.remove(0);
        sections.reverse();
        let mut shuffled = String::new();
        for s in sections {
            let mut lines: Vec<&str> = s.lines().collect();
            let title = lines.remove(0);
            lines.reverse();
            shuffled.push_str(&format!("[{title}\n{}\n\n", lines.join("\n")));
        }
        let mut head_lines: Vec<&str> = head.lines().collect();
        head_lines.reverse();
        let reordered = format!("{}\n\n{}", head_lines.join("\n"), shuffled);
        let cfg = RunConfig::from_toml(&reordered).unwrap();
        assert_eq!(cfg.hash(), RunConfig::desk().hash());
        let other = RunConfig { seed: 1, ..RunConfig::desk() };
        assert_ne!(other.hash(), RunConfig::desk().hash());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = RunConfig::desk().to_toml().unwrap().replace("[model]\n", "[model]\nlayerz = 3\n");
        assert!(matches!(RunConfig::from_toml(&text), Err(ConfigError::Parse(_))));
    }

    #[test]
    fn inconsistent_sections_are_rejected() {
        let mut cfg = RunConfig::desk();
        cfg.codebook.size = 32;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::desk();
        cfg.codebook.patch = 4;
        assert!(cfg.validate().is_err());
    }
}
