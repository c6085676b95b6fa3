//! Application config: one TOML file, with environment overrides for paths
//! and the service port.

use std::path::{Path, PathBuf};

use sbir_core::data::{PhotoInput, PrepConfig, SynthConfig};
use sbir_core::model::{Pairing, Preset, ShareMode, SharingScheme};
use sbir_core::trainer::PhaseConfig;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const ENV_DATA_ROOT: &str = "SBIR_DATA_ROOT";
pub const ENV_CHECKPOINTS: &str = "SBIR_CHECKPOINTS";
pub const ENV_INDEX: &str = "SBIR_INDEX";
pub const ENV_PORT: &str = "SBIR_PORT";

#[derive(Debug, Error)]
#[error("config `{path}`: {msg}")]
pub struct ConfigError {
    pub path: String,
    pub msg: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppConfig {
    /// Network initialisation seed.
    #[serde(default)]
    pub seed: u64,
    pub paths: Paths,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub phases: Vec<PhaseConfig>,
    #[serde(default)]
    pub service: ServiceConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// Directory holding `manifest.tsv`.
    pub data_root: PathBuf,
    pub checkpoints: PathBuf,
    pub index: PathBuf,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Generates a synthetic dataset into `data_root` when it has no manifest.
    pub synth: Option<SynthConfig>,
    pub prep: PrepConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub preset: Preset,
    pub scheme: ShareMode,
    pub pairing: Pairing,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            preset: Preset::Mini,
            scheme: ShareMode::HalfShare,
            pairing: Pairing::SketchEdgemap,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServiceConfig {
    pub host: String,
    pub port: u16,
    pub top_k: usize,
    pub max_concurrent_embeds: usize,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: 8080,
            top_k: 10,
            max_concurrent_embeds: 4,
        }
    }
}

impl AppConfig {
    /// Reads, applies environment overrides and validates.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let err = |msg: String| ConfigError {
            path: path.display().to_string(),
            msg,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let mut cfg = Self::parse(&text).map_err(|e| err(e.msg))?;
        cfg.apply_env(|k| std::env::var(k).ok()).map_err(|e| err(e.msg))?;
        cfg.validate().map_err(|e| err(e.msg))?;
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|e| ConfigError {
            path: String::new(),
            msg: e.to_string().trim_end().to_string(),
        })
    }

    pub fn apply_env(&mut self, var: impl Fn(&str) -> Option<String>) -> Result<(), ConfigError> {
        if let Some(v) = var(ENV_DATA_ROOT) {
            self.paths.data_root = v.into();
        }
        if let Some(v) = var(ENV_CHECKPOINTS) {
            self.paths.checkpoints = v.into();
        }
        if let Some(v) = var(ENV_INDEX) {
            self.paths.index = v.into();
        }
        if let Some(v) = var(ENV_PORT) {
            self.service.port = v.parse().map_err(|_| ConfigError {
                path: String::new(),
                msg: format!("{ENV_PORT}: `{v}` is not a port number"),
            })?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |msg: String| {
            Err(ConfigError {
                path: String::new(),
                msg,
            })
        };
        if let Err(e) = SharingScheme::resolve(self.model.scheme, self.model.pairing, self.model.preset) {
            return bad(format!("model: {e}"));
        }
        for (i, p) in self.phases.iter().enumerate() {
            if let Err(e) = p.validate() {
                return bad(format!("phases[{i}]: {e}"));
            }
        }
        if self.service.top_k == 0 {
            return bad("service.top_k must be at least 1".into());
        }
        if self.service.max_concurrent_embeds == 0 {
            return bad("service.max_concurrent_embeds must be at least 1".into());
        }
        Ok(())
    }

    pub fn photo_input(&self) -> PhotoInput {
        match self.model.pairing {
            Pairing::SketchEdgemap => PhotoInput::Edgemap,
            Pairing::SketchPhoto => PhotoInput::Rgb,
        }
    }

    /// Query scale implied by the last triplet phase, 2 when there is none.
    pub fn query_scale(&self) -> f32 {
        self.phases
            .iter()
            .rev()
            .find(|p| p.uses_triplet())
            .map_or(2.0, |p| p.triplet.query_scale())
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.paths.data_root.join("manifest.tsv")
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.paths.checkpoints.join("final.sbf")
    }
}
