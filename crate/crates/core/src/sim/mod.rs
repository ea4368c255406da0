//! Synthetic critical-care cohort with known dynamics.
//!
//! Each patient carries a latent severity `x ∈ [0, 24]` and a hemoglobin
//! proxy `hb`. Per bin:
//!
//! ```text
//! x' = clip(x + drift(z) + effect(a, hb) + N(0, σ²), 0, 24)
//! hb' = hb + bleed + 1.2·a + N(0, 0.15²)
//! effect = −benefit if a = 1 and hb < θ_hb
//!          +harm    if a = 1 and hb ≥ θ_hb
//!          0        otherwise
//! ```
//!
//! The oracle treats iff `hb < θ_hb`. Transfusion candidates (drawn with the
//! prevalence target) start anaemic and bleed; the behavior policy follows
//! the oracle with probability `1 − behavior_noise` for them. Everyone else
//! starts well above the threshold and follows the oracle exactly, so they
//! are essentially never transfused.
//!
//! Death by day 28 has probability
//! `sigmoid(intercept + α·mean(x) + β·x_T)`.

pub mod kmeans;
pub mod policy_sim;
pub mod stats;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use kmeans::{kmeans, ClusterModel};
pub use policy_sim::{policy_simulation, OutcomeVariant, PolicySimConfig, PolicySimReport};
pub use stats::{pearson, transfusion_outcome_correlations, OutcomeCorrelations};

use crate::cohort::raw::{Measurement, RawCohort, RawPatient};
use crate::cohort::schema::{FeatureSchema, FeatureSpec, MAX_STAY_HOURS, MIN_STAY_HOURS};
use crate::error::{Error, Result};
use crate::nn::{derive_seed, rng_from_seed, sigmoid};

/// Value written in place of a measurement to simulate charting errors.
pub const OUTLIER_VALUE: f64 = 9999.0;
const BIN_HOURS: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub patients: usize,
    pub min_bins: usize,
    pub max_bins: usize,
    pub severity_max: f64,
    /// Admission severity is uniform on this range.
    pub initial_severity: (f64, f64),
    /// Severity reduction from treating below the threshold.
    pub benefit: f64,
    /// Severity increase from treating at or above the threshold.
    pub harm: f64,
    pub hb_threshold: f64,
    pub noise_std: f64,
    pub alpha: f64,
    pub beta: f64,
    pub intercept: f64,
    /// Target fraction of patients with at least one transfusion.
    pub prevalence: f64,
    /// Probability a candidate's logged action disagrees with the oracle.
    pub behavior_noise: f64,
    pub outlier_rate: f64,
    /// Multiplier on every observation-noise scale.
    pub observation_noise: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            patients: 2000,
            min_bins: 6,
            max_bins: 42,
            severity_max: 24.0,
            initial_severity: (4.0, 12.0),
            benefit: 2.0,
            harm: 1.0,
            hb_threshold: 7.0,
            noise_std: 0.5,
            alpha: 0.15,
            beta: 0.1,
            intercept: -4.2,
            prevalence: 0.53,
            behavior_noise: 0.2,
            outlier_rate: 0.01,
            observation_noise: 1.0,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let lo = (MIN_STAY_HOURS / BIN_HOURS).floor() as usize;
        let hi = (MAX_STAY_HOURS / BIN_HOURS).ceil() as usize;
        if self.patients == 0 {
            return Err(Error::config("sim.patients must be > 0"));
        }
        if self.min_bins < lo || self.max_bins > hi || self.min_bins > self.max_bins {
            return Err(Error::config(format!(
                "sim bin range [{}, {}] must lie within [{lo}, {hi}]",
                self.min_bins, self.max_bins
            )));
        }
        if !(self.severity_max > 0.0) {
            return Err(Error::config("sim.severity_max must be > 0"));
        }
        let (a, b) = self.initial_severity;
        if !(0.0 <= a && a <= b && b <= self.severity_max) {
            return Err(Error::config("sim.initial_severity must lie within the severity range"));
        }
        for (name, p) in [
            ("prevalence", self.prevalence),
            ("behavior_noise", self.behavior_noise),
            ("outlier_rate", self.outlier_rate),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("sim.{name} must be a probability, got {p}")));
            }
        }
        for (name, v) in [
            ("benefit", self.benefit),
            ("harm", self.harm),
            ("noise_std", self.noise_std),
            ("observation_noise", self.observation_noise),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(format!("sim.{name} must be finite and >= 0, got {v}")));
            }
        }
        if ![self.alpha, self.beta, self.intercept, self.hb_threshold].iter().all(|v| v.is_finite()) {
            return Err(Error::config("sim mortality and threshold constants must be finite"));
        }
        Ok(())
    }
}

/// Schema of the generated cohorts.
pub fn sim_schema() -> FeatureSchema {
    FeatureSchema {
        format_version: 1,
        static_features: vec![
            FeatureSpec::new("age", 0.0, 120.0),
            FeatureSpec::new("weight", 20.0, 300.0),
            FeatureSpec::new("gender", 0.0, 1.0),
        ],
        temporal_features: vec![
            FeatureSpec::new("sofa", 0.0, 24.0),
            FeatureSpec::new("heart_rate", 20.0, 250.0),
            FeatureSpec::new("map", 20.0, 200.0),
            FeatureSpec::new("lactate", 0.1, 30.0),
            FeatureSpec::new("hemoglobin", 2.0, 20.0),
            FeatureSpec::new("creatinine", 0.1, 15.0),
            FeatureSpec::new("temperature", 30.0, 43.0),
        ],
        acuity_channel: "sofa".into(),
        bin_hours: BIN_HOURS,
    }
}

/// Per-bin optimal actions for one patient (`T − 1` entries).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleLabel {
    pub patient_id: String,
    pub actions: Vec<u8>,
}

/// Fixed per-patient quantities drawn before any dynamics.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientProfile {
    pub index: usize,
    pub age: f64,
    pub weight: f64,
    pub gender: f64,
    pub drift: f64,
    pub bins: usize,
    pub x0: f64,
    pub hb0: f64,
    pub bleed: f64,
    pub candidate: bool,
}

/// Latent trajectory under some policy.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub severity: Vec<f64>,
    pub hemoglobin: Vec<f64>,
    pub actions: Vec<u8>,
    pub mortality: f64,
}

// Stream tags for derive_seed.
const PROFILE_STREAM: u64 = 0;
const DYNAMICS_STREAM: u64 = 1;
const BEHAVIOR_STREAM: u64 = 2;
const OUTCOME_STREAM: u64 = 3;
const OBSERVATION_STREAM: u64 = 4;

fn stream(cfg: &SimConfig, index: usize, tag: u64) -> crate::nn::SeededRng {
    rng_from_seed(derive_seed(derive_seed(cfg.seed, index as u64), tag))
}

pub fn draw_profile(cfg: &SimConfig, index: usize) -> PatientProfile {
    let mut rng = stream(cfg, index, PROFILE_STREAM);
    let age: f64 = rng.random_range(18.0..90.0);
    let weight: f64 = rng.random_range(45.0..120.0);
    let gender = if rng.random_bool(0.5) { 1.0 } else { 0.0 };
    let drift = 0.5 * (0.04 * (age - 54.0) + 0.03 * (weight - 82.5) + 0.3 * (gender - 0.5)).tanh();
    let bins = rng.random_range(cfg.min_bins..=cfg.max_bins);
    let x0 = rng.random_range(cfg.initial_severity.0..=cfg.initial_severity.1);
    let candidate = rng.random_bool(cfg.prevalence);
    let theta = cfg.hb_threshold;
    let (hb0, bleed) =
        if candidate { (rng.random_range(theta - 1.5..theta - 0.2), -0.25) } else { (rng.random_range(theta + 2.0..theta + 4.0), 0.0) };
    PatientProfile { index, age, weight, gender, drift, bins, x0, hb0, bleed, candidate }
}

pub fn oracle_action(cfg: &SimConfig, hb: f64) -> u8 {
    u8::from(hb < cfg.hb_threshold)
}

/// Roll a patient forward; `policy(t, severity, hb)` picks the action for
/// bin `t`. The dynamics noise stream is independent of the policy, so
/// different policies see the same noise draws.
pub fn rollout(cfg: &SimConfig, profile: &PatientProfile, mut policy: impl FnMut(usize, f64, f64) -> u8) -> Rollout {
    let mut rng = stream(cfg, profile.index, DYNAMICS_STREAM);
    let sev_noise = Normal::new(0.0, cfg.noise_std).expect("validated std");
    let hb_noise = Normal::new(0.0, 0.15).expect("positive std");
    let t_bins = profile.bins;
    let mut severity = Vec::with_capacity(t_bins);
    let mut hemoglobin = Vec::with_capacity(t_bins);
    let mut actions = Vec::with_capacity(t_bins - 1);
    let (mut x, mut hb) = (profile.x0, profile.hb0);
    for t in 0..t_bins {
        severity.push(x);
        hemoglobin.push(hb);
        if t + 1 == t_bins {
            break;
        }
        let a = policy(t, x, hb);
        let effect = match (a, hb < cfg.hb_threshold) {
            (1, true) => -cfg.benefit,
            (1, false) => cfg.harm,
            _ => 0.0,
        };
        x = (x + profile.drift + effect + sev_noise.sample(&mut rng)).clamp(0.0, cfg.severity_max);
        hb = (hb + profile.bleed + 1.2 * f64::from(a) + hb_noise.sample(&mut rng)).clamp(3.0, 18.0);
        actions.push(a);
    }
    let mean = severity.iter().sum::<f64>() / t_bins as f64;
    let mortality = sigmoid(cfg.intercept + cfg.alpha * mean + cfg.beta * severity[t_bins - 1]);
    Rollout { severity, hemoglobin, actions, mortality }
}

/// The logged-data behavior policy for one patient.
pub fn behavior_rollout(cfg: &SimConfig, profile: &PatientProfile) -> Rollout {
    let mut rng = stream(cfg, profile.index, BEHAVIOR_STREAM);
    rollout(cfg, profile, |_, _, hb| {
        let oracle = oracle_action(cfg, hb);
        if profile.candidate && rng.random_bool(cfg.behavior_noise) {
            1 - oracle
        } else {
            oracle
        }
    })
}

/// Ground truth kept alongside a generated cohort.
#[derive(Debug, Clone, PartialEq)]
pub struct PatientTruth {
    pub profile: PatientProfile,
    pub rollout: Rollout,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimCohort {
    pub raw: RawCohort,
    pub oracle: Vec<OracleLabel>,
    pub truth: Vec<PatientTruth>,
}

impl SimCohort {
    /// Fraction of patients with at least one logged transfusion.
    pub fn transfusion_prevalence(&self) -> f64 {
        let n = self.truth.iter().filter(|t| t.rollout.actions.contains(&1)).count();
        n as f64 / self.truth.len() as f64
    }

    pub fn observed_mortality(&self) -> f64 {
        self.raw.patients.iter().filter(|p| !p.survived28).count() as f64 / self.raw.patients.len() as f64
    }

    pub fn oracle_by_id(&self) -> BTreeMap<&str, &[u8]> {
        self.oracle.iter().map(|o| (o.patient_id.as_str(), o.actions.as_slice())).collect()
    }
}

fn observe(cfg: &SimConfig, profile: &PatientProfile, roll: &Rollout) -> Vec<Measurement> {
    let mut rng = stream(cfg, profile.index, OBSERVATION_STREAM);
    let k = cfg.observation_noise;
    let gauss = |rng: &mut crate::nn::SeededRng, sd: f64| -> f64 {
        if sd * k == 0.0 {
            0.0
        } else {
            Normal::new(0.0, sd * k).expect("positive std").sample(rng)
        }
    };
    let schema = sim_schema();
    let mut out = Vec::new();
    let t_bins = profile.bins;
    for t in 0..t_bins {
        let x = roll.severity[t];
        let hb = roll.hemoglobin[t];
        let time = t as f64 * BIN_HOURS + rng.random_range(0.5..3.5);
        let sofa = x.round().clamp(0.0, 24.0);
        out.push(Measurement { time_h: time, feature: "sofa".into(), value: sofa });
        let values = [
            ("heart_rate", 70.0 + 2.5 * x + gauss(&mut rng, 5.0)),
            ("map", 90.0 - 1.5 * x + gauss(&mut rng, 5.0)),
            ("lactate", 0.5 + 0.25 * x + gauss(&mut rng, 0.3)),
            ("hemoglobin", hb + gauss(&mut rng, 0.2)),
            ("creatinine", 0.8 + 0.1 * x + gauss(&mut rng, 0.1)),
            ("temperature", 37.0 + gauss(&mut rng, 0.5)),
        ];
        for (name, v) in values {
            let spec = &schema.temporal_features[schema.temporal_index(name).expect("schema feature")];
            let value = if rng.random_bool(cfg.outlier_rate) { OUTLIER_VALUE } else { v.clamp(spec.min, spec.max) };
            out.push(Measurement { time_h: time, feature: name.into(), value });
        }
        if t + 1 == t_bins {
            // Discharge observation pins the stay length to exactly T bins.
            out.push(Measurement { time_h: t_bins as f64 * BIN_HOURS, feature: "sofa".into(), value: sofa });
        }
    }
    out.sort_by(|a, b| a.time_h.total_cmp(&b.time_h));
    out
}

pub fn patient_id(index: usize) -> String {
    format!("sim{index:06}")
}

/// Generate a cohort with its oracle labels and latent ground truth.
pub fn generate_cohort(cfg: &SimConfig) -> Result<SimCohort> {
    cfg.validate()?;
    let mut patients = Vec::with_capacity(cfg.patients);
    let mut oracle = Vec::with_capacity(cfg.patients);
    let mut truth = Vec::with_capacity(cfg.patients);
    for i in 0..cfg.patients {
        let profile = draw_profile(cfg, i);
        let roll = behavior_rollout(cfg, &profile);
        let survived28 = !stream(cfg, i, OUTCOME_STREAM).random_bool(roll.mortality);
        let id = patient_id(i);
        let labels = roll.hemoglobin[..profile.bins - 1].iter().map(|&hb| oracle_action(cfg, hb)).collect();
        patients.push(RawPatient {
            patient_id: id.clone(),
            statics: BTreeMap::from([
                ("age".to_string(), profile.age),
                ("weight".to_string(), profile.weight),
                ("gender".to_string(), profile.gender),
            ]),
            action_bins: roll.actions.clone(),
            survived28,
            measurements: observe(cfg, &profile, &roll),
        });
        oracle.push(OracleLabel { patient_id: id, actions: labels });
        truth.push(PatientTruth { profile, rollout: roll });
    }
    Ok(SimCohort { raw: RawCohort { schema: sim_schema(), patients }, oracle, truth })
}

/// Mean expected survival under a policy, with its standard error.
pub fn expected_survival(cfg: &SimConfig, mut policy: impl FnMut(&PatientProfile, usize, f64, f64) -> u8) -> (f64, f64) {
    let vals: Vec<f64> = (0..cfg.patients)
        .map(|i| {
            let profile = draw_profile(cfg, i);
            1.0 - rollout(cfg, &profile, |t, x, hb| policy(&profile, t, x, hb)).mortality
        })
        .collect();
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, (var / n).sqrt())
}

pub fn write_oracle_labels(labels: &[OracleLabel], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for l in labels {
        writeln!(f, "{}", serde_json::to_string(l)?).map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}

pub fn read_oracle_labels(path: &Path) -> Result<Vec<OracleLabel>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::Parse { line: i + 1, message: e.to_string() }))
        .collect()
}
