use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use evicon_core::distinguishability::{ProjectionMethod, ScoreWeights, DEFAULT_WARNING_THRESHOLD};
use evicon_core::embedding::DEFAULT_DIM;
use serde::{Deserialize, Serialize};

pub const DEFAULT_PORT: u16 = 8080;

/// Everything the feedback service needs to start. Relative model and
/// dataset paths resolve against `data_dir`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EngineConfig {
    pub embedding_path: PathBuf,
    pub predictor_path: PathBuf,
    pub dataset_path: PathBuf,
    pub dim: usize,
    pub weights: ScoreWeights,
    pub warning_threshold: f64,
    pub projection: ProjectionMethod,
    pub projection_seed: u64,
    pub port: u16,
    pub data_dir: PathBuf,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            embedding_path: "embedding.json".into(),
            predictor_path: "predictor.json".into(),
            dataset_path: "icons.jsonl".into(),
            dim: DEFAULT_DIM,
            weights: ScoreWeights::default(),
            warning_threshold: DEFAULT_WARNING_THRESHOLD,
            projection: ProjectionMethod::Pca2d,
            projection_seed: 0,
            port: DEFAULT_PORT,
            data_dir: "data".into(),
        }
    }
}

impl EngineConfig {
    /// Reads a JSON config file; missing fields take their defaults.
    pub fn from_file(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Applies `EVICON_PORT` and `EVICON_DATA_DIR`.
    pub fn apply_env(mut self) -> anyhow::Result<Self> {
        self.apply_overrides(
            std::env::var("EVICON_PORT").ok().as_deref(),
            std::env::var("EVICON_DATA_DIR").ok().as_deref(),
        )?;
        Ok(self)
    }

    pub fn apply_overrides(&mut self, port: Option<&str>, data_dir: Option<&str>) -> anyhow::Result<()> {
        if let Some(p) = port {
            self.port = p.parse().with_context(|| format!("EVICON_PORT={p:?} is not a port"))?;
        }
        if let Some(d) = data_dir {
            self.data_dir = d.into();
        }
        Ok(())
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.data_dir.join(path)
        }
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.dim == 0 {
            bail!("embedding dimension must be positive");
        }
        if !(self.warning_threshold.is_finite() && self.warning_threshold >= 0.0) {
            bail!("warning threshold must be a non-negative number");
        }
        for (name, p) in [
            ("embedding", &self.embedding_path),
            ("predictor", &self.predictor_path),
            ("dataset", &self.dataset_path),
        ] {
            let full = self.resolve(p);
            if !full.is_file() {
                bail!("{name} file {} not found", full.display());
            }
        }
        Ok(())
    }
}
