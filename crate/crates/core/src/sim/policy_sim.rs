//! Cluster-and-match outcome simulation under an alternative policy.
//!
//! 1. Select target patients who received at least one transfusion and
//!    either died (mortality variant) or whose acuity worsened from
//!    admission to discharge (acuity variant).
//! 2. Cluster the union of target and source patients with k-means on
//!    `statics ++ per-feature temporal means` over the shared features.
//! 3. Controls for a selected patient are same-cluster source patients with
//!    the good outcome (survived, or acuity not worsened).
//! 4. The control majority action profile is the per-bin majority over the
//!    controls present at that bin (ties count as 0). A selected patient
//!    takes the control outcome when the policy agrees with that profile on
//!    at least `agreement` of the patient's bins while the logged actions do
//!    not; otherwise the original outcome stands. Requiring the logged
//!    sequence to disagree keeps the procedure an exact fixed point when the
//!    policy reproduces the logged actions.
//! 5. Report the rate before and after over the whole target cohort.

use serde::{Deserialize, Serialize};

use super::kmeans::kmeans;
use crate::cohort::{Cohort, Trajectory};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutcomeVariant {
    Mortality,
    Acuity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicySimConfig {
    pub clusters: usize,
    /// Minimum fraction of bins on which the policy must match the control
    /// profile.
    pub agreement: f64,
    pub seed: u64,
}

impl Default for PolicySimConfig {
    fn default() -> Self {
        Self { clusters: 10, agreement: 0.5, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicySimReport {
    pub variant: OutcomeVariant,
    pub patients: usize,
    pub selected: usize,
    pub switched: usize,
    pub empty_control_groups: usize,
    pub observed_rate: f64,
    pub simulated_rate: f64,
    /// e.g. `"16.48% → 13.74%"`.
    pub summary: String,
}

pub fn format_rate_change(before: f64, after: f64) -> String {
    format!("{:.2}% → {:.2}%", 100.0 * before, 100.0 * after)
}

fn bad_outcome(t: &Trajectory, variant: OutcomeVariant) -> bool {
    match variant {
        OutcomeVariant::Mortality => !t.survived28,
        OutcomeVariant::Acuity => t.acuity_worsened(),
    }
}

// Column indices of the features both cohorts share, by name.
fn shared_columns(target: &Cohort, source: &Cohort) -> (Vec<(usize, usize)>, Vec<(usize, usize)>) {
    let pair = |a: &[crate::cohort::FeatureSpec], b: &[crate::cohort::FeatureSpec]| {
        a.iter()
            .enumerate()
            .filter_map(|(i, f)| b.iter().position(|g| g.name == f.name).map(|j| (i, j)))
            .collect::<Vec<_>>()
    };
    (
        pair(&target.schema.static_features, &source.schema.static_features),
        pair(&target.schema.temporal_features, &source.schema.temporal_features),
    )
}

fn cluster_point(t: &Trajectory, statics: &[usize], temporal: &[usize]) -> Vec<f64> {
    let means = t.feature_means();
    statics.iter().map(|&i| t.statics[i]).chain(temporal.iter().map(|&i| means[i])).collect()
}

fn agreement(a: &[u8], profile: &[Option<u8>]) -> f64 {
    let mut n = 0;
    let mut same = 0;
    for (x, p) in a.iter().zip(profile) {
        if let Some(p) = p {
            n += 1;
            same += usize::from(x == p);
        }
    }
    if n == 0 {
        0.0
    } else {
        same as f64 / n as f64
    }
}

/// `policy[i]` is the recommended action sequence for target trajectory `i`.
pub fn policy_simulation(
    target: &Cohort,
    source: &Cohort,
    policy: &[Vec<u8>],
    variant: OutcomeVariant,
    config: &PolicySimConfig,
) -> Result<PolicySimReport> {
    if policy.len() != target.trajectories.len() {
        return Err(Error::input(format!(
            "policy covers {} patients, target cohort has {}",
            policy.len(),
            target.trajectories.len()
        )));
    }
    for (p, t) in policy.iter().zip(&target.trajectories) {
        if p.len() != t.actions.len() {
            return Err(Error::input(format!("policy for patient {} has the wrong length", t.patient_id)));
        }
    }
    if !(0.0..=1.0).contains(&config.agreement) {
        return Err(Error::config("policy_sim.agreement must be in [0, 1]"));
    }
    let (statics, temporal) = shared_columns(target, source);
    if statics.is_empty() && temporal.is_empty() {
        return Err(Error::input("target and source cohorts share no features"));
    }
    let (ts, ss): (Vec<usize>, Vec<usize>) = statics.iter().copied().unzip();
    let (tt, st): (Vec<usize>, Vec<usize>) = temporal.iter().copied().unzip();

    let mut points: Vec<Vec<f64>> = target.trajectories.iter().map(|t| cluster_point(t, &ts, &tt)).collect();
    points.extend(source.trajectories.iter().map(|t| cluster_point(t, &ss, &st)));
    let k = config.clusters.min(points.len());
    let model = kmeans(&points, k, config.seed)?;
    let n_target = target.trajectories.len();
    let (target_cluster, source_cluster) = model.assignment.split_at(n_target);

    let mut selected = 0;
    let mut switched = 0;
    let mut empty = 0;
    for (i, t) in target.trajectories.iter().enumerate() {
        if !(t.received_treatment() && bad_outcome(t, variant)) {
            continue;
        }
        selected += 1;
        let controls: Vec<&Trajectory> = source
            .trajectories
            .iter()
            .zip(source_cluster)
            .filter(|(s, &c)| c == target_cluster[i] && !bad_outcome(s, variant))
            .map(|(s, _)| s)
            .collect();
        if controls.is_empty() {
            empty += 1;
            continue;
        }
        let profile: Vec<Option<u8>> = (0..t.actions.len())
            .map(|b| {
                let votes: Vec<u8> = controls.iter().filter_map(|c| c.actions.get(b).copied()).collect();
                if votes.is_empty() {
                    None
                } else {
                    let ones = votes.iter().filter(|&&a| a == 1).count();
                    Some(u8::from(2 * ones > votes.len()))
                }
            })
            .collect();
        let policy_agrees = agreement(&policy[i], &profile) >= config.agreement;
        let logged_agrees = agreement(&t.actions, &profile) >= config.agreement;
        if policy_agrees && !logged_agrees {
            switched += 1;
        }
    }
    let bad = target.trajectories.iter().filter(|t| bad_outcome(t, variant)).count();
    let n = n_target as f64;
    let observed_rate = bad as f64 / n;
    let simulated_rate = (bad - switched) as f64 / n;
    if empty > 0 {
        log::warn!("{empty} selected patient(s) had no same-cluster controls and kept their outcome");
    }
    Ok(PolicySimReport {
        variant,
        patients: n_target,
        selected,
        switched,
        empty_control_groups: empty,
        observed_rate,
        simulated_rate,
        summary: format_rate_change(observed_rate, simulated_rate),
    })
}
