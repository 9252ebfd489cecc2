use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::detect2d::{TrainConfig2D, UNetSpec};
use crate::fpr3d::{ArchiSpec, TrainConfig3D};
use crate::lungseg::LungSegConfig;
use crate::merge::DEFAULT_THRESHOLD;
use crate::mip::DEFAULT_THICKNESSES;
use crate::{Error, Result};

use super::cache::sha256_bytes;

pub const ENV_DATA_ROOT: &str = "MIPCAD_DATA_ROOT";
pub const ENV_CACHE_ROOT: &str = "MIPCAD_CACHE_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FprConfig {
    pub archi2: ArchiSpec,
    pub archi3: ArchiSpec,
    pub train: TrainConfig3D,
    /// Add a positive patch centred on every reference nodule of the
    /// training scans, next to the labelled candidates.
    pub annotation_positives: bool,
    /// Patches per reference nodule; copies after the first are centred
    /// at random within half the nodule radius.
    pub annotation_positive_copies: usize,
    /// Extra negatives per training scan, drawn from bright voxels away
    /// from every nodule.
    pub sampled_negatives_per_scan: usize,
    /// Sampled negatives only come from voxels whose 7×7×7 neighbourhood
    /// holds at most this fraction of bright voxels; low values favour thin
    /// structures such as vessels over walls.
    pub sampled_negative_max_density: f64,
}

impl Default for FprConfig {
    fn default() -> Self {
        Self {
            archi2: ArchiSpec::archi2(),
            archi3: ArchiSpec::archi3(),
            train: TrainConfig3D::default(),
            annotation_positives: true,
            annotation_positive_copies: 1,
            sampled_negatives_per_scan: 0,
            sampled_negative_max_density: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Directory holding `<series>.mhd` scans.
    pub data_root: PathBuf,
    pub cache_root: PathBuf,
    /// Reference table; relative paths resolve against `data_root`.
    pub annotations: PathBuf,
    /// Explicit cross-validation subsets of series ids. When empty, the
    /// scans found under `data_root` are dealt into `n_subsets`.
    pub subsets: Vec<Vec<String>>,
    pub n_subsets: usize,
    pub fold: usize,
    /// Slab thicknesses in mm, one detector stream each.
    pub thicknesses: Vec<u32>,
    pub seed: u64,
    /// Threads for per-scan work.
    pub workers: usize,
    pub lungseg: LungSegConfig,
    pub detector: UNetSpec,
    pub train2d: TrainConfig2D,
    /// Probability map binarization threshold.
    pub threshold: f32,
    pub fpr: FprConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            data_root: "data".into(),
            cache_root: "cache".into(),
            annotations: "annotations.csv".into(),
            subsets: Vec::new(),
            n_subsets: 10,
            fold: 0,
            thicknesses: DEFAULT_THICKNESSES.to_vec(),
            seed: 0,
            workers: 1,
            lungseg: LungSegConfig::default(),
            detector: UNetSpec::default(),
            train2d: TrainConfig2D::default(),
            threshold: DEFAULT_THRESHOLD,
            fpr: FprConfig::default(),
        }
    }
}

impl PipelineConfig {
    /// Settings sized for the bundled synthetic mini-dataset: three subsets
    /// of two scans, narrow networks and short schedules.
    pub fn synthetic() -> Self {
        let mut cfg = Self {
            n_subsets: 3,
            workers: 1,
            detector: UNetSpec {
                input_size: 64,
                base_width: 8,
                levels: 4,
                kernel: 3,
            },
            ..Self::default()
        };
        cfg.train2d = TrainConfig2D {
            batch_size: 5,
            initial_lr: 3e-3,
            max_epochs: 12,
            plateau_patience: 3,
            early_stop_patience: 5,
            steps_per_epoch: Some(30),
            negatives_per_positive: 0.5,
            max_val_images: Some(48),
            ..TrainConfig2D::default()
        };
        cfg.fpr = FprConfig {
            archi2: ArchiSpec::archi2().narrowed(4),
            archi3: ArchiSpec::archi3().narrowed(4),
            train: TrainConfig3D {
                initial_lr: 3e-3,
                max_epochs: 30,
                plateau_patience: 6,
                early_stop_patience: 8,
                max_negatives_per_epoch: Some(150),
                ..TrainConfig3D::default()
            },
            annotation_positives: true,
            annotation_positive_copies: 4,
            sampled_negatives_per_scan: 100,
            sampled_negative_max_density: 0.3,
        };
        cfg
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        toml::from_str(s).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a TOML file, then applies environment overrides.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        cfg.apply_env();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self) {
        if let Some(v) = std::env::var_os(ENV_DATA_ROOT) {
            self.data_root = v.into();
        }
        if let Some(v) = std::env::var_os(ENV_CACHE_ROOT) {
            self.cache_root = v.into();
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.thicknesses.is_empty() {
            return Err(Error::Parameter("at least one slab thickness is required".into()));
        }
        if self.thicknesses.contains(&0) {
            return Err(Error::Parameter("slab thicknesses must be positive".into()));
        }
        let unique: BTreeSet<u32> = self.thicknesses.iter().copied().collect();
        if unique.len() != self.thicknesses.len() {
            return Err(Error::Parameter("slab thicknesses must be distinct".into()));
        }
        if self.subsets.is_empty() && self.n_subsets < 2 {
            return Err(Error::Parameter("need at least two subsets".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Parameter(format!("threshold {} outside (0, 1)", self.threshold)));
        }
        self.detector.validate()?;
        self.train2d.validate()?;
        self.fpr.archi2.validate()?;
        self.fpr.archi3.validate()?;
        Ok(())
    }

    pub fn annotations_path(&self) -> PathBuf {
        if self.annotations.is_absolute() {
            self.annotations.clone()
        } else {
            self.data_root.join(&self.annotations)
        }
    }

    /// Hash of every setting except the data and cache locations.
    pub fn config_hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.data_root = PathBuf::new();
        c.cache_root = PathBuf::new();
        Ok(sha256_bytes(&serde_json::to_vec(&c)?))
    }
}
