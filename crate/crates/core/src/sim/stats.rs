use serde::{Deserialize, Serialize};

use crate::cohort::Trajectory;
use crate::error::{Error, Result};

/// Sample Pearson correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::input(format!("pearson: series lengths differ ({} vs {})", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(Error::input("pearson: need at least two observations"));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation("one of the series has zero variance".into()));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Correlation of "received any transfusion" with each outcome.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutcomeCorrelations {
    pub mortality: f64,
    pub acuity_worsened: f64,
}

pub fn transfusion_outcome_correlations(trajectories: &[&Trajectory]) -> Result<OutcomeCorrelations> {
    let flag = |b: bool| if b { 1.0 } else { 0.0 };
    let treated: Vec<f64> = trajectories.iter().map(|t| flag(t.received_treatment())).collect();
    let died: Vec<f64> = trajectories.iter().map(|t| flag(!t.survived28)).collect();
    let worse: Vec<f64> = trajectories.iter().map(|t| flag(t.acuity_worsened())).collect();
    Ok(OutcomeCorrelations { mortality: pearson(&treated, &died)?, acuity_worsened: pearson(&treated, &worse)? })
}
