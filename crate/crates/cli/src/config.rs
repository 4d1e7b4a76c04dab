//! Experiment configuration file.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use serde::{Deserialize, Serialize};
use warpdetect_core::harness::{AugmentationSpec, DatasetConfig, ExperimentPlan, ModelConfig, TrainConfig, Variant};

/// Complete experiment description. Command-line flags override keys read from a file,
/// which override these defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub out: PathBuf,
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    /// Variants compared by the paired t-tests.
    pub compare: [Variant; 2],
    /// Denominator of the false-positive ratios.
    pub baseline: Variant,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub augmentation: AugmentationSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            out: PathBuf::from("out"),
            variants: Variant::ALL.to_vec(),
            seeds: vec![1, 2, 3],
            compare: [Variant::Stn, Variant::CbamStnTps],
            baseline: Variant::Yolo,
            dataset: DatasetConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            augmentation: AugmentationSpec::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> anyhow::Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn plan(&self) -> anyhow::Result<ExperimentPlan> {
        let plan = ExperimentPlan {
            dataset: self.dataset.clone(),
            model: self.model.clone(),
            train: self.train.clone(),
            augmentation: self.augmentation.clone(),
            variants: self.variants.clone(),
            seeds: self.seeds.clone(),
            compare: (self.compare[0], self.compare[1]),
            baseline: self.baseline,
        };
        plan.validate()?;
        if !plan.variants.contains(&plan.baseline) {
            bail!("baseline variant `{}` is not in the variant list", plan.baseline);
        }
        Ok(plan)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips() {
        let mut c = RunConfig::default();
        c.seeds = vec![7, 8];
        c.train.learning_rate = 0.1 + 0.2;
        c.augmentation.rotation_deg = 1.0 / 3.0;
        let back = RunConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn rejects_unknown_keys() {
        assert!(RunConfig::from_toml("bogus = 1").is_err());
        assert!(RunConfig::from_toml("[train]\nepochz = 3").is_err());
        assert!(RunConfig::from_toml("[dataset.scene]\nseed = 4").is_ok());
    }

    #[test]
    fn partial_file_keeps_defaults() {
        let c = RunConfig::from_toml("seeds = [5]\n[train]\nepochs = 2").unwrap();
        assert_eq!(c.seeds, vec![5]);
        assert_eq!(c.train.epochs, 2);
        assert_eq!(c.train.batch_size, TrainConfig::default().batch_size);
        assert_eq!(c.variants, Variant::ALL.to_vec());
    }
}
