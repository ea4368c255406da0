use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SCHEMA_FORMAT_VERSION: u32 = 1;
/// Stays shorter than this are dropped.
pub const MIN_STAY_HOURS: f64 = 24.0;
/// Stays longer than this are dropped.
pub const MAX_STAY_HOURS: f64 = 168.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    /// Clinically plausible range; measurements outside it are dropped.
    pub min: f64,
    pub max: f64,
}

impl FeatureSpec {
    pub fn new(name: &str, min: f64, max: f64) -> Self {
        Self { name: name.to_string(), min, max }
    }

    pub fn in_range(&self, v: f64) -> bool {
        v.is_finite() && v >= self.min && v <= self.max
    }
}

fn default_bin_hours() -> f64 {
    4.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub format_version: u32,
    pub static_features: Vec<FeatureSpec>,
    pub temporal_features: Vec<FeatureSpec>,
    /// Temporal feature carrying the per-bin acuity score.
    pub acuity_channel: String,
    #[serde(default = "default_bin_hours")]
    pub bin_hours: f64,
}

impl FeatureSchema {
    pub fn validate(&self) -> Result<()> {
        if self.format_version != SCHEMA_FORMAT_VERSION {
            return Err(Error::config(format!("unsupported schema format_version {}", self.format_version)));
        }
        if !(self.bin_hours > 0.0) {
            return Err(Error::config(format!("schema.bin_hours must be > 0, got {}", self.bin_hours)));
        }
        if self.temporal_features.is_empty() {
            return Err(Error::config("schema has no temporal features"));
        }
        let mut seen = BTreeSet::new();
        for f in self.static_features.iter().chain(&self.temporal_features) {
            if !seen.insert(f.name.as_str()) {
                return Err(Error::config(format!("duplicate feature name {:?}", f.name)));
            }
            if !(f.min < f.max) {
                return Err(Error::config(format!("feature {:?} has invalid range [{}, {}]", f.name, f.min, f.max)));
            }
        }
        if self.acuity_index().is_none() {
            return Err(Error::config(format!(
                "acuity channel {:?} is not a temporal feature",
                self.acuity_channel
            )));
        }
        Ok(())
    }

    pub fn acuity_index(&self) -> Option<usize> {
        self.temporal_features.iter().position(|f| f.name == self.acuity_channel)
    }

    pub fn temporal_index(&self, name: &str) -> Option<usize> {
        self.temporal_features.iter().position(|f| f.name == name)
    }

    pub fn static_index(&self, name: &str) -> Option<usize> {
        self.static_features.iter().position(|f| f.name == name)
    }

    pub fn temporal_width(&self) -> usize {
        self.temporal_features.len()
    }

    pub fn static_width(&self) -> usize {
        self.static_features.len()
    }

    /// Fewest bins a retained stay can have.
    pub fn min_bins(&self) -> usize {
        (MIN_STAY_HOURS / self.bin_hours).floor() as usize
    }

    /// Most bins a retained stay can have.
    pub fn max_bins(&self) -> usize {
        (MAX_STAY_HOURS / self.bin_hours).ceil() as usize
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let schema: FeatureSchema = serde_json::from_str(&text)?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn schema() -> FeatureSchema {
        FeatureSchema {
            format_version: 1,
            static_features: vec![FeatureSpec::new("age", 0.0, 120.0)],
            temporal_features: vec![FeatureSpec::new("hr", 0.0, 300.0), FeatureSpec::new("sofa", 0.0, 24.0)],
            acuity_channel: "sofa".into(),
            bin_hours: 4.0,
        }
    }

    #[test]
    fn valid_schema_and_bin_bounds() {
        let s = schema();
        s.validate().unwrap();
        assert_eq!(s.min_bins(), 6);
        assert_eq!(s.max_bins(), 42);
    }

    #[test]
    fn acuity_must_be_temporal() {
        let mut s = schema();
        s.acuity_channel = "age".into();
        assert!(s.validate().is_err());
    }

    #[test]
    fn ranges_and_names_checked() {
        let mut s = schema();
        s.temporal_features[0].min = 400.0;
        assert!(s.validate().is_err());
        let mut s = schema();
        s.static_features.push(FeatureSpec::new("hr", 0.0, 1.0));
        assert!(s.validate().is_err());
    }
}
