//! Run configuration: TOML sections per module, flag overrides, and the
//! resolved form written into every run directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::DatasetSpec;
use crate::error::{Result, RoadError};
use crate::model::BackboneConfig;
use crate::pretrain::PretrainConfig;
use crate::scene::SceneConfig;
use crate::train::{parse_grid, TrainConfig, Variant};

pub const RESOLVED_CONFIG: &str = "config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSizes {
    pub source_train: usize,
    pub target_train: usize,
    pub target_val: usize,
}

impl Default for DatasetSizes {
    fn default() -> Self {
        Self { source_train: 200, target_train: 200, target_val: 50 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// Output directory; relative paths resolve against `ROAD_RUN_DIR` when set.
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub scene: SceneConfig,
    pub dataset: DatasetSizes,
    pub model: BackboneConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub variant: Option<String>,
    pub grid: Option<String>,
    pub lambda1: Option<f64>,
    pub lambda2: Option<f64>,
    pub seed: Option<u64>,
    pub iterations: Option<usize>,
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| RoadError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| RoadError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| RoadError::Config(format!("{}: {e}", path.display())))
    }

    /// File if given, defaults otherwise.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is representable in TOML")
    }

    /// A seed override applies to both training and teacher pretraining.
    pub fn apply(&mut self, o: &Overrides) -> Result<()> {
        if let Some(v) = &o.variant {
            self.train.variant = v.parse::<Variant>()?;
        }
        if let Some(g) = &o.grid {
            self.train.grid = parse_grid(g)?;
        }
        if let Some(v) = o.lambda1 {
            self.train.lambda1 = v;
        }
        if let Some(v) = o.lambda2 {
            self.train.lambda2 = v;
        }
        if let Some(s) = o.seed {
            self.train.seed = s;
            self.pretrain.seed = s;
        }
        if let Some(n) = o.iterations {
            self.train.iterations = n;
        }
        if let Some(d) = &o.out_dir {
            self.run.out_dir = Some(d.clone());
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.pretrain.validate(&self.model)?;
        self.dataset_spec().validate()
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec::standard(
            self.scene.clone(),
            self.dataset.source_train,
            self.dataset.target_train,
            self.dataset.target_val,
        )
    }

    /// The output directory, anchored at `root` when relative.
    pub fn output_dir(&self, root: Option<&Path>) -> Option<PathBuf> {
        let dir = self.run.out_dir.as_ref()?;
        Some(match root {
            Some(r) if dir.is_relative() => r.join(dir),
            _ => dir.clone(),
        })
    }

    /// Writes the resolved configuration into `dir`, creating it.
    pub fn write_resolved(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| RoadError::io(dir, e))?;
        let path = dir.join(RESOLVED_CONFIG);
        fs::write(&path, self.to_toml()).map_err(|e| RoadError::io(&path, e))?;
        Ok(path)
    }
}
