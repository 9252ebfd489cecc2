//! Fold planning, configuration and the cached stage runner.
//!
//! Every stage writes its outputs and a JSON manifest under the cache root.
//! A manifest records the stage key, a SHA-256 over the stage parameters and
//! the keys of everything it consumed, so re-running a stage with unchanged
//! inputs returns immediately.

mod cache;
mod config;
mod plan;
mod stages;

use std::fmt;
use std::str::FromStr;

pub use cache::{derive_seed, sha256_bytes, sha256_file, KeyBuilder, Manifest, SourceStamp};
pub use config::{FprConfig, PipelineConfig, ENV_CACHE_ROOT, ENV_DATA_ROOT};
pub use plan::{assign_subsets, make_fold_plan, FoldPlan, TRAIN_SHARE};
pub use stages::{Metrics, MetricsRow, Pipeline};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    Segment,
    Mip,
    TrainDetect,
    Detect,
    Merge,
    TrainFpr,
    Score,
    Froc,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::Segment,
        Stage::Mip,
        Stage::TrainDetect,
        Stage::Detect,
        Stage::Merge,
        Stage::TrainFpr,
        Stage::Score,
        Stage::Froc,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Segment => "segment",
            Stage::Mip => "mip",
            Stage::TrainDetect => "train-detect",
            Stage::Detect => "detect",
            Stage::Merge => "merge",
            Stage::TrainFpr => "train-fpr",
            Stage::Score => "score",
            Stage::Froc => "froc",
            Stage::Report => "report",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Parameter(format!("unknown stage `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageOutcome {
    pub stage: Stage,
    /// True when the cached outputs were reused.
    pub cached: bool,
    pub message: String,
}

/// Runs one stage against the cache.
pub fn run_pipeline(cfg: &PipelineConfig, stage: Stage) -> Result<StageOutcome> {
    Pipeline::open(cfg.clone())?.run(stage)
}

/// Runs every stage in order.
pub fn run_all(cfg: &PipelineConfig) -> Result<Vec<StageOutcome>> {
    let p = Pipeline::open(cfg.clone())?;
    Stage::ALL.into_iter().map(|s| p.run(s)).collect()
}
