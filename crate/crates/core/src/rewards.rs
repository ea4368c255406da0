//! Per-transition rewards.
//!
//! * `R1`: zero everywhere except the terminal transition, which is
//!   `+terminal` for 28-day survivors and `−terminal` otherwise.
//! * `R2`: each non-terminal transition `t → t+1` scores the acuity change
//!   (`+step` if it fell, `−step` if it rose, 0 if flat); the terminal
//!   transition is scored like `R1` and replaces the acuity delta.
//!
//! The first transition uses the bin-0 → bin-1 delta.

use serde::{Deserialize, Serialize};

use crate::cohort::Trajectory;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RewardScheme {
    R1,
    R2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    pub scheme: RewardScheme,
    pub terminal_magnitude: f64,
    pub step_magnitude: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self { scheme: RewardScheme::R2, terminal_magnitude: 10.0, step_magnitude: 1.0 }
    }
}

impl RewardConfig {
    pub fn r1() -> Self {
        Self { scheme: RewardScheme::R1, ..Self::default() }
    }

    pub fn r2() -> Self {
        Self { scheme: RewardScheme::R2, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.terminal_magnitude > 0.0) {
            return Err(Error::config(format!(
                "reward.terminal_magnitude must be > 0, got {}",
                self.terminal_magnitude
            )));
        }
        if !(self.step_magnitude > 0.0) {
            return Err(Error::config(format!("reward.step_magnitude must be > 0, got {}", self.step_magnitude)));
        }
        Ok(())
    }

    /// Rewards for each of the trajectory's `T − 1` transitions.
    pub fn assign(&self, trajectory: &Trajectory) -> Result<Vec<f64>> {
        let n = trajectory.transitions();
        match self.scheme {
            RewardScheme::R1 => Ok(assign_r1(trajectory.survived28, n, self.terminal_magnitude)),
            RewardScheme::R2 => {
                if trajectory.acuity.len() != trajectory.len() {
                    return Err(Error::input(format!(
                        "patient {}: {} acuity values for {} bins",
                        trajectory.patient_id,
                        trajectory.acuity.len(),
                        trajectory.len()
                    )));
                }
                assign_r2(&trajectory.acuity, trajectory.survived28, self.terminal_magnitude, self.step_magnitude)
            }
        }
    }
}

pub fn assign_r1(survived28: bool, transitions: usize, terminal: f64) -> Vec<f64> {
    let mut r = vec![0.0; transitions];
    if let Some(last) = r.last_mut() {
        *last = if survived28 { terminal } else { -terminal };
    }
    r
}

/// `acuity` has one entry per bin, so there are `acuity.len() − 1`
/// transitions.
pub fn assign_r2(acuity: &[f64], survived28: bool, terminal: f64, step: f64) -> Result<Vec<f64>> {
    if acuity.iter().any(|a| !a.is_finite()) {
        return Err(Error::input("acuity series has missing or non-finite bins"));
    }
    let n = acuity.len().saturating_sub(1);
    let mut r: Vec<f64> = acuity
        .windows(2)
        .map(|w| {
            if w[1] < w[0] {
                step
            } else if w[1] > w[0] {
                -step
            } else {
                0.0
            }
        })
        .collect();
    if n > 0 {
        r[n - 1] = if survived28 { terminal } else { -terminal };
    }
    Ok(r)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn r1_survivor() {
        assert_eq!(assign_r1(true, 5, 10.0), vec![0.0, 0.0, 0.0, 0.0, 10.0]);
    }

    #[test]
    fn r1_non_survivor() {
        assert_eq!(assign_r1(false, 3, 10.0), vec![0.0, 0.0, -10.0]);
    }

    #[test]
    fn r1_single_transition() {
        assert_eq!(assign_r1(true, 1, 10.0), vec![10.0]);
    }

    #[test]
    fn r2_terminal_overrides_worsening() {
        assert_eq!(assign_r2(&[8.0, 6.0, 6.0, 9.0], true, 10.0, 1.0).unwrap(), vec![1.0, 0.0, 10.0]);
    }

    #[test]
    fn r2_flat_non_survivor() {
        assert_eq!(assign_r2(&[5.0, 5.0, 5.0, 5.0], false, 10.0, 1.0).unwrap(), vec![0.0, 0.0, -10.0]);
    }

    #[test]
    fn r2_single_transition() {
        assert_eq!(assign_r2(&[3.0, 7.0], true, 10.0, 1.0).unwrap(), vec![10.0]);
    }

    #[test]
    fn r2_missing_acuity() {
        assert!(assign_r2(&[3.0, f64::NAN, 4.0], true, 10.0, 1.0).is_err());
    }

    #[test]
    fn magnitudes_validated() {
        let mut c = RewardConfig::r1();
        c.terminal_magnitude = 0.0;
        assert!(c.validate().is_err());
    }

    proptest! {
        #[test]
        fn r1_has_one_terminal_entry(n in 1usize..50, survived: bool) {
            let r = assign_r1(survived, n, 10.0);
            prop_assert_eq!(r.iter().filter(|v| **v != 0.0).count(), 1);
            prop_assert_eq!(r.iter().sum::<f64>(), if survived { 10.0 } else { -10.0 });
        }

        #[test]
        fn r2_ranges_and_locality(acuity in proptest::collection::vec(0u8..24, 2..43), survived: bool) {
            let a: Vec<f64> = acuity.iter().map(|&x| x as f64).collect();
            let r = assign_r2(&a, survived, 10.0, 1.0).unwrap();
            let n = r.len();
            for t in 0..n - 1 {
                prop_assert!([-1.0, 0.0, 1.0].contains(&r[t]));
                let expected = (a[t] - a[t + 1]).signum() * (a[t] != a[t + 1]) as u8 as f64;
                prop_assert_eq!(r[t], expected);
            }
            prop_assert_eq!(r[n - 1].abs(), 10.0);
        }

        #[test]
        fn doubling_terminal_only_changes_terminal(acuity in proptest::collection::vec(0u8..24, 2..20), survived: bool) {
            let a: Vec<f64> = acuity.iter().map(|&x| x as f64).collect();
            let base = assign_r2(&a, survived, 10.0, 1.0).unwrap();
            let doubled = assign_r2(&a, survived, 20.0, 1.0).unwrap();
            let n = base.len();
            prop_assert_eq!(&base[..n - 1], &doubled[..n - 1]);
            prop_assert_eq!(doubled[n - 1], 2.0 * base[n - 1]);
        }
    }
}
