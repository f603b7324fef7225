use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use dam_core::appearance::AppearanceConfig;
use dam_core::synth::{Dataset, DatasetConfig};
use dam_core::{AppearanceModel, TrainConfig};
use serde::{Deserialize, Serialize};

/// Everything a run needs. Missing sections and fields take their defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub model: AppearanceConfig,
    pub train: TrainConfig,
}

pub const RESOLVED_NAME: &str = "config.resolved.json";

impl RunConfig {
    /// Reads TOML or JSON, chosen by file extension.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let cfg = match path.extension().and_then(|e| e.to_str()) {
            Some("toml") => toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?,
            Some("json") => serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?,
            _ => bail!("config {} must end in .toml or .json", path.display()),
        };
        Ok(cfg)
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    /// Makes the regularizer schedule span the configured run and validates.
    pub fn finalize(mut self) -> Result<Self> {
        if self.train.loss.lambda2.total_iters != self.train.total_iters {
            self.train = self.train.clone().with_iters(self.train.total_iters);
        }
        self.train.validate()?;
        self.model.validate()?;
        self.dataset.validate()?;
        Ok(self)
    }

    /// Fits the grid domain and depth normalization to a dataset.
    pub fn adapt_to(&mut self, ds: &Dataset) {
        self.model.grid.domain_min = ds.domain[0];
        self.model.grid.domain_max = ds.domain[1];
        self.model.encoding.depth_range = ds.depth_range;
    }

    pub fn new_model(&self, ds: &Dataset) -> Result<AppearanceModel> {
        Ok(AppearanceModel::new(self.model.clone(), &ds.train_view_ids(), self.train.seed)?)
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        let path = dir.join(RESOLVED_NAME);
        fs::write(&path, serde_json::to_string_pretty(self)?).with_context(|| format!("writing {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_and_json_agree_and_reject_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let t = dir.path().join("a.toml");
        fs::write(&t, "[train]\ntotal_iters = 50\ncell_size = 4\n[model.grid]\nlevels = 4\n").unwrap();
        let a = RunConfig::load(&t).unwrap().finalize().unwrap();
        assert_eq!(a.train.total_iters, 50);
        assert_eq!(a.train.loss.lambda2.total_iters, 50);
        assert_eq!(a.model.grid.levels, 4);
        let j = dir.path().join("a.json");
        fs::write(&j, r#"{"train": {"total_iters": 50, "cell_size": 4}, "model": {"grid": {"levels": 4}}}"#).unwrap();
        assert_eq!(RunConfig::load(&j).unwrap().finalize().unwrap(), a);
        fs::write(&t, "[train]\ntotal_iter = 50\n").unwrap();
        assert!(RunConfig::load(&t).is_err());
        let y = dir.path().join("a.yaml");
        fs::write(&y, "").unwrap();
        assert!(RunConfig::load(&y).is_err());
    }

    #[test]
    fn resolved_config_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = RunConfig::default().finalize().unwrap();
        cfg.write_resolved(dir.path()).unwrap();
        assert_eq!(RunConfig::load(&dir.path().join(RESOLVED_NAME)).unwrap(), cfg);
    }
}
