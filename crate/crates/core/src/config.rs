//! JSON run configuration for the command-line pipeline.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::MeshFormat;
use crate::trainer::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("invalid configuration: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MeshKind {
    #[default]
    Ply,
    Obj,
}

impl MeshKind {
    pub fn format(self) -> MeshFormat {
        match self {
            MeshKind::Ply => MeshFormat::Ply,
            MeshKind::Obj => MeshFormat::Obj,
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            MeshKind::Ply => "ply",
            MeshKind::Obj => "obj",
        }
    }
}

/// Everything a reconstruction run needs. All fields are optional in the
/// file; unknown keys are rejected.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    /// Marching-cubes grid nodes per axis.
    pub resolution: usize,
    pub mesh_format: MeshKind,
    /// Input point cloud; the command line takes precedence.
    pub input: Option<PathBuf>,
    /// Run directory; the command line takes precedence.
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self { train: TrainConfig::default(), resolution: 128, mesh_format: MeshKind::Ply, input: None, out_dir: None }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("configuration serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.resolution < 2 {
            return Err(ConfigError::Invalid(format!("resolution must be at least 2, got {}", self.resolution)));
        }
        self.train.validate().map_err(|e| ConfigError::Invalid(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_object_gives_defaults() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected_at_every_level() {
        for text in [
            r#"{"resolutoin": 64}"#,
            r#"{"train": {"iters": 5}}"#,
            r#"{"train": {"weights": {"lambda_align": 1}}}"#,
        ] {
            assert!(matches!(RunConfig::from_json(text), Err(ConfigError::Parse(_))), "{text}");
        }
    }

    #[test]
    fn partial_override_and_round_trip() {
        let c = RunConfig::from_json(r#"{"resolution": 64, "train": {"weights": {"phase": 0.0}, "seed": 7}}"#).unwrap();
        assert_eq!(c.resolution, 64);
        assert_eq!(c.train.weights.phase, 0.0);
        assert_eq!(c.train.weights.align, 0.7);
        assert_eq!(c.train.seed, 7);
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn invalid_values_are_rejected() {
        assert!(matches!(RunConfig::from_json(r#"{"resolution": 1}"#), Err(ConfigError::Invalid(_))));
        assert!(matches!(
            RunConfig::from_json(r#"{"train": {"weights": {"far": -1.0}}}"#),
            Err(ConfigError::Invalid(_))
        ));
        assert!(RunConfig::from_json(r#"{"mesh_format": "stl"}"#).is_err());
    }
}
