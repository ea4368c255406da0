//! Experiment configuration and the end-to-end pipelines behind the CLI.
//!
//! One JSON document configures a run. Its canonical serialization (sorted
//! keys, compact) is hashed, and every artifact records that hash so outputs
//! from different configurations are never mixed.
//!
//! Seeds: the top-level `seed` drives everything. Data seeds (simulator,
//! split) come from the base seed; model seeds (encoder, BCQ, μ, baselines,
//! clustering) come from the per-run seed, which is `seed + k` for the k-th
//! run of a `--seeds N` sweep. Seed fields inside sub-configs are overwritten
//! by this derivation.

pub mod pipeline;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::bcq::BcqConfig;
use crate::encoders::pretrain::PretrainConfig;
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};
use crate::grids::SearchSpace;
use crate::nn::derive_seed;
use crate::ope::baselines::BaselineConfig;
use crate::ope::OpeConfig;
use crate::rewards::RewardConfig;
use crate::sim::policy_sim::PolicySimConfig;
use crate::sim::SimConfig;
use crate::transfer::TransferConfig;

/// Environment variable that replaces the configured seed.
pub const SEED_ENV: &str = "BCQFORGE_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// 50k BCQ iterations.
    Desk,
    /// 500k BCQ iterations.
    Full,
}

/// Optional external inputs. Unset paths fall back to files in the output
/// directory written by earlier commands.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PathsConfig {
    /// Raw cohort (`.jsonl` or `.csv`).
    pub cohort: Option<PathBuf>,
    pub schema: Option<PathBuf>,
    /// Raw cohort for the transfer target; generated from the simulator when
    /// unset.
    pub target_cohort: Option<PathBuf>,
    pub target_schema: Option<PathBuf>,
    /// Policy bundle for `simulate`.
    pub policy_checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub profile: Profile,
    pub seed: u64,
    pub paths: PathsConfig,
    pub sim: SimConfig,
    pub encoder: EncoderConfig,
    pub pretrain: PretrainConfig,
    pub reward: RewardConfig,
    pub bcq: BcqConfig,
    pub transfer: TransferConfig,
    /// BCQ iterations on the transfer target; `None` uses `bcq.total_iterations`.
    pub transfer_iterations: Option<usize>,
    pub ope: OpeConfig,
    pub policy_sim: PolicySimConfig,
    pub baselines: BaselineConfig,
    pub search_space: SearchSpace,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ExperimentConfig {
    pub fn desk() -> Self {
        Self {
            profile: Profile::Desk,
            seed: 0,
            paths: PathsConfig::default(),
            sim: SimConfig::default(),
            encoder: EncoderConfig::default(),
            pretrain: PretrainConfig::default(),
            reward: RewardConfig::default(),
            bcq: BcqConfig { total_iterations: 50_000, ..Default::default() },
            transfer: TransferConfig::default(),
            transfer_iterations: None,
            ope: OpeConfig::default(),
            policy_sim: PolicySimConfig::default(),
            baselines: BaselineConfig::default(),
            search_space: SearchSpace::default(),
        }
    }

    pub fn full() -> Self {
        Self { profile: Profile::Full, bcq: BcqConfig { total_iterations: 500_000, ..Default::default() }, ..Self::desk() }
    }

    pub fn for_profile(profile: Profile) -> Self {
        match profile {
            Profile::Desk => Self::desk(),
            Profile::Full => Self::full(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        self.encoder.validate()?;
        self.reward.validate()?;
        self.bcq.validate()?;
        self.transfer.validate()?;
        self.ope.validate()?;
        if self.pretrain.batch_trajectories == 0 {
            return Err(Error::config("pretrain.batch_trajectories must be > 0"));
        }
        if !(self.pretrain.learning_rate > 0.0) {
            return Err(Error::config("pretrain.learning_rate must be > 0"));
        }
        if self.encoder.hidden == 0 {
            return Err(Error::config("encoder.hidden must be > 0"));
        }
        if self.transfer_iterations == Some(0) {
            return Err(Error::config("transfer_iterations must be > 0"));
        }
        if self.policy_sim.clusters == 0 {
            return Err(Error::config("policy_sim.clusters must be > 0"));
        }
        if self.baselines.iterations == 0 || self.baselines.lr_batch_size == 0 {
            return Err(Error::config("baselines.iterations and baselines.lr_batch_size must be > 0"));
        }
        for (name, p) in [
            ("paths.cohort", &self.paths.cohort),
            ("paths.schema", &self.paths.schema),
            ("paths.target_cohort", &self.paths.target_cohort),
            ("paths.target_schema", &self.paths.target_schema),
            ("paths.policy_checkpoint", &self.paths.policy_checkpoint),
            ("transfer.expert_checkpoint", &self.transfer.expert_checkpoint),
        ] {
            if let Some(p) = p {
                if !p.exists() {
                    return Err(Error::config(format!("{name} {} does not exist", p.display())));
                }
            }
        }
        Ok(())
    }

    /// Sorted-key compact JSON.
    pub fn canonical_json(&self) -> Result<String> {
        // serde_json's default map is ordered by key, so a round trip through
        // Value sorts every object.
        Ok(serde_json::to_string(&serde_json::to_value(self)?)?)
    }

    /// SHA-256 of the canonical JSON, hex encoded.
    pub fn hash(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.canonical_json()?.as_bytes())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Parse a config; a `profile` key selects the defaults that missing
    /// fields fall back to.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| Error::config(format!("config is not valid JSON: {e}")))?;
        let profile = match value.get("profile") {
            Some(p) => serde_json::from_value(p.clone()).map_err(|e| Error::config(format!("profile: {e}")))?,
            None => Profile::Desk,
        };
        let mut base = serde_json::to_value(Self::for_profile(profile))?;
        check_known_keys(&base, &value, "")?;
        merge(&mut base, value);
        serde_json::from_value(base).map_err(|e| Error::config(format!("config: {e}")))
    }

    /// Apply `key=value` overrides where `key` is a dotted path into the
    /// config and `value` is JSON (bare words are taken as strings).
    pub fn with_overrides(self, overrides: &[String]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self);
        }
        let mut value = serde_json::to_value(&self)?;
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::config(format!("override {item:?} is not of the form key=value")))?;
            let parsed: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            set_path(&mut value, key, parsed)?;
        }
        serde_json::from_value(value).map_err(|e| Error::config(format!("override: {e}")))
    }

    pub fn with_seed_from_env(mut self) -> Result<Self> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v.trim().parse().map_err(|_| Error::config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(self)
    }

    pub fn sim_config(&self) -> SimConfig {
        SimConfig { seed: derive_seed(self.seed, 1), ..self.sim.clone() }
    }

    pub fn split_seed(&self) -> u64 {
        derive_seed(self.seed, 2)
    }

    /// Sub-configs with model seeds derived from `run_seed`.
    pub fn run(&self, run_seed: u64) -> RunConfig {
        RunConfig {
            run_seed,
            encoder: EncoderConfig { seed: derive_seed(run_seed, 3), ..self.encoder.clone() },
            bcq: BcqConfig { seed: derive_seed(run_seed, 4), ..self.bcq.clone() },
            baselines: BaselineConfig { seed: derive_seed(run_seed, 5), ..self.baselines.clone() },
            policy_sim: PolicySimConfig { seed: derive_seed(run_seed, 6), ..self.policy_sim.clone() },
            pretrain_seed: derive_seed(run_seed, 7),
            mu_seed: derive_seed(run_seed, 8),
            transfer_seed: derive_seed(run_seed, 9),
        }
    }

    /// γ used for trajectory returns.
    pub fn return_gamma(&self) -> f64 {
        self.ope.gamma.unwrap_or(self.bcq.gamma)
    }
}

/// Seeded sub-configs for one run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub run_seed: u64,
    pub encoder: EncoderConfig,
    pub bcq: BcqConfig,
    pub baselines: BaselineConfig,
    pub policy_sim: PolicySimConfig,
    pub pretrain_seed: u64,
    pub mu_seed: u64,
    pub transfer_seed: u64,
}

fn check_known_keys(base: &Value, given: &Value, prefix: &str) -> Result<()> {
    if let (Value::Object(b), Value::Object(g)) = (base, given) {
        for (k, v) in g {
            let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            match b.get(k) {
                None => return Err(Error::config(format!("unknown config key {path:?}"))),
                Some(bv) => check_known_keys(bv, v, &path)?,
            }
        }
    }
    Ok(())
}

fn merge(base: &mut Value, given: Value) {
    match (base, given) {
        (Value::Object(b), Value::Object(g)) => {
            for (k, v) in g {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::config(format!("override {key:?}: {} is not an object", parts[..i].join("."))))?;
        if !obj.contains_key(*part) {
            return Err(Error::config(format!("override {key:?}: unknown key {:?}", parts[..=i].join("."))));
        }
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.get_mut(*part).expect("checked");
    }
    Err(Error::config("empty override key"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles() {
        assert_eq!(ExperimentConfig::desk().bcq.total_iterations, 50_000);
        assert_eq!(ExperimentConfig::full().bcq.total_iterations, 500_000);
        assert_eq!(ExperimentConfig::desk().sim.patients, 2000);
        assert!(ExperimentConfig::desk().validate().is_ok());
    }

    #[test]
    fn canonical_hash_is_stable_and_sensitive() {
        let a = ExperimentConfig::desk();
        assert_eq!(a.hash().unwrap(), a.clone().hash().unwrap());
        let round = ExperimentConfig::from_json(&a.canonical_json().unwrap()).unwrap();
        assert_eq!(round, a);
        assert_eq!(round.hash().unwrap(), a.hash().unwrap());
        let b = a.clone().with_overrides(&["bcq.tau=0.35".into()]).unwrap();
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
    }

    #[test]
    fn overrides() {
        let c = ExperimentConfig::desk()
            .with_overrides(&[
                "sim.prevalence=0.4".into(),
                "encoder.kind=cde".into(),
                "transfer.mode=\"wtr\"".into(),
                "transfer_iterations=1000".into(),
                "paths.cohort=/tmp/x.jsonl".into(),
            ])
            .unwrap();
        assert_eq!(c.sim.prevalence, 0.4);
        assert_eq!(c.encoder.kind, crate::encoders::EncoderKind::Cde);
        assert_eq!(c.transfer.mode, crate::transfer::TransferMode::Wtr);
        assert_eq!(c.transfer_iterations, Some(1000));
        assert_eq!(c.paths.cohort, Some(PathBuf::from("/tmp/x.jsonl")));
        assert!(ExperimentConfig::desk().with_overrides(&["bcq.nope=1".into()]).is_err());
        assert!(ExperimentConfig::desk().with_overrides(&["bcq.tau".into()]).is_err());
        assert!(ExperimentConfig::desk().with_overrides(&["bcq.tau=\"high\"".into()]).is_err());
    }

    #[test]
    fn invalid_prevalence_names_the_field() {
        let c = ExperimentConfig::desk().with_overrides(&["sim.prevalence=1.5".into()]).unwrap();
        let err = c.validate().unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("prevalence"), "{err}");
    }

    #[test]
    fn partial_files_take_profile_defaults() {
        let c = ExperimentConfig::from_json(r#"{"profile": "full", "bcq": {"tau": 0.2}}"#).unwrap();
        assert_eq!(c.bcq.total_iterations, 500_000);
        assert_eq!(c.bcq.tau, 0.2);
        assert!(ExperimentConfig::from_json(r#"{"bcq": {"taux": 0.2}}"#).is_err());
        assert!(ExperimentConfig::from_json("not json").is_err());
    }

    #[test]
    fn grids_are_in_the_config() {
        let json = ExperimentConfig::desk().canonical_json().unwrap();
        assert!(json.contains("\"Target Q-network update frequency\":[1000,2000,4000,8000]"));
    }

    #[test]
    fn run_seeds_differ_between_runs_but_not_data() {
        let c = ExperimentConfig::desk();
        assert_ne!(c.run(0).bcq.seed, c.run(1).bcq.seed);
        assert_ne!(c.run(0).encoder.seed, c.run(0).bcq.seed);
        let mut d = c.clone();
        d.seed = 5;
        assert_ne!(c.sim_config().seed, d.sim_config().seed);
    }

    #[test]
    fn missing_paths_fail_validation() {
        let c = ExperimentConfig::desk().with_overrides(&["paths.cohort=/definitely/missing.jsonl".into()]).unwrap();
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }
}
