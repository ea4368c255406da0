//! Trajectory schema, file ingestion, preprocessing, splitting and the
//! offline replay buffer.

pub mod buffer;
pub mod preprocess;
pub mod raw;
pub mod schema;
pub mod split;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use buffer::{build_buffer, build_buffer_for, ReplayBuffer, Transition};
pub use preprocess::{preprocess, ZScoreStats};
pub use raw::{ingest, Measurement, RawCohort, RawPatient};
pub use schema::{FeatureSchema, FeatureSpec};
pub use split::{split_assignment, Split};

use crate::error::{Error, Result};

pub const PROCESSED_FORMAT_VERSION: u32 = 1;

/// One patient's preprocessed stay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub patient_id: String,
    /// z-scored static covariates.
    pub statics: Vec<f64>,
    /// z-scored features, one row per time bin.
    pub features: Vec<Vec<f64>>,
    /// `actions[t]` covers bin `t` to `t+1`; the last bin has none.
    pub actions: Vec<u8>,
    /// Acuity score per bin in its original units.
    pub acuity: Vec<f64>,
    pub survived28: bool,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn transitions(&self) -> usize {
        self.len().saturating_sub(1)
    }

    /// Per-feature means over the stay.
    pub fn feature_means(&self) -> Vec<f64> {
        let w = self.features.first().map_or(0, Vec::len);
        let mut m = vec![0.0; w];
        for row in &self.features {
            for (a, v) in m.iter_mut().zip(row) {
                *a += v;
            }
        }
        let n = self.len().max(1) as f64;
        m.iter_mut().for_each(|v| *v /= n);
        m
    }

    /// True if acuity at discharge is higher than at admission.
    pub fn acuity_worsened(&self) -> bool {
        match (self.acuity.first(), self.acuity.last()) {
            (Some(a), Some(b)) => b > a,
            _ => false,
        }
    }

    pub fn received_treatment(&self) -> bool {
        self.actions.iter().any(|&a| a == 1)
    }
}

/// Preprocessed cohort with its split and normalization statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cohort {
    pub schema: FeatureSchema,
    pub trajectories: Vec<Trajectory>,
    pub splits: Vec<Split>,
    pub stats: ZScoreStats,
}

#[derive(Serialize, Deserialize)]
struct ProcessedFile {
    format_version: u32,
    config_hash: Option<String>,
    cohort: Cohort,
}

impl Cohort {
    pub fn validate(&self) -> Result<()> {
        if self.splits.len() != self.trajectories.len() {
            return Err(Error::input("split assignment does not cover the cohort"));
        }
        let (lo, hi) = (self.schema.min_bins(), self.schema.max_bins());
        for t in &self.trajectories {
            let n = t.len();
            if n < lo || n > hi {
                return Err(Error::input(format!("patient {} has {n} bins, outside [{lo}, {hi}]", t.patient_id)));
            }
            if t.actions.len() + 1 != n || t.acuity.len() != n {
                return Err(Error::input(format!("patient {} has inconsistent action/acuity lengths", t.patient_id)));
            }
            if t.actions.iter().any(|&a| a > 1) {
                return Err(Error::input(format!("patient {} has a non-binary action", t.patient_id)));
            }
            let finite = t.features.iter().flatten().chain(&t.statics).chain(&t.acuity).all(|v| v.is_finite());
            if !finite {
                return Err(Error::input(format!("patient {} has non-finite values", t.patient_id)));
            }
        }
        Ok(())
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.splits.iter().enumerate().filter(|(_, s)| **s == split).map(|(i, _)| i).collect()
    }

    pub fn split_trajectories(&self, split: Split) -> Vec<&Trajectory> {
        self.indices(split).into_iter().map(|i| &self.trajectories[i]).collect()
    }

    pub fn feature_width(&self) -> usize {
        self.schema.temporal_width()
    }

    pub fn save(&self, path: &Path, config_hash: Option<&str>) -> Result<()> {
        let file = ProcessedFile {
            format_version: PROCESSED_FORMAT_VERSION,
            config_hash: config_hash.map(str::to_string),
            cohort: self.clone(),
        };
        std::fs::write(path, serde_json::to_string(&file)?).map_err(|e| Error::io(path, e))
    }

    /// Returns the cohort and the config hash it was written under.
    pub fn load(path: &Path) -> Result<(Self, Option<String>)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: ProcessedFile = serde_json::from_str(&text)?;
        if file.format_version != PROCESSED_FORMAT_VERSION {
            return Err(Error::input(format!("unsupported processed-cohort format_version {}", file.format_version)));
        }
        file.cohort.validate()?;
        Ok((file.cohort, file.config_hash))
    }
}
