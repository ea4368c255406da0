//! Binning, outlier removal, imputation and z-scoring.
//!
//! Order of operations per patient: drop stays outside 24–168 h, average
//! in-range measurements per time bin, carry the last observation forward
//! into empty bins, fill anything still empty (leading gaps) with the
//! train-split feature mean, and finally z-score with train-split
//! statistics. Imputation happens before z-scoring.

use serde::{Deserialize, Serialize};

use super::raw::{bin_count, bin_index, RawCohort, RawPatient};
use super::schema::{FeatureSchema, MAX_STAY_HOURS, MIN_STAY_HOURS};
use super::split::{split_assignment, Split};
use super::{Cohort, Trajectory};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ZScoreStats {
    pub static_mean: Vec<f64>,
    pub static_std: Vec<f64>,
    pub temporal_mean: Vec<f64>,
    pub temporal_std: Vec<f64>,
}

/// Binned values before imputation; `None` marks an empty bin.
#[derive(Debug, Clone, PartialEq)]
pub struct BinnedPatient {
    pub patient_id: String,
    pub statics: Vec<Option<f64>>,
    pub temporal: Vec<Vec<Option<f64>>>,
    pub actions: Vec<u8>,
    pub survived28: bool,
}

/// Whether a stay of this length is kept.
pub fn stay_retained(duration_h: f64) -> bool {
    (MIN_STAY_HOURS..=MAX_STAY_HOURS).contains(&duration_h)
}

/// Mean of in-range measurements per bin. Returns `None` for stays outside
/// the retained length window.
pub fn bin_patient(patient: &RawPatient, schema: &FeatureSchema) -> Result<Option<BinnedPatient>> {
    let Some(duration) = patient.duration_h() else { return Ok(None) };
    if !stay_retained(duration) {
        return Ok(None);
    }
    let bins = bin_count(duration, schema.bin_hours);
    let width = schema.temporal_width();
    let mut sums = vec![vec![0.0; width]; bins];
    let mut counts = vec![vec![0usize; width]; bins];
    for m in &patient.measurements {
        let Some(f) = schema.temporal_index(&m.feature) else { continue };
        if !schema.temporal_features[f].in_range(m.value) {
            continue;
        }
        let b = bin_index(m.time_h, schema.bin_hours, bins);
        sums[b][f] += m.value;
        counts[b][f] += 1;
    }
    let temporal = sums
        .iter()
        .zip(&counts)
        .map(|(s, c)| s.iter().zip(c).map(|(&s, &c)| (c > 0).then(|| s / c as f64)).collect())
        .collect();
    let statics = schema
        .static_features
        .iter()
        .map(|f| patient.statics.get(&f.name).copied().filter(|&v| f.in_range(v)))
        .collect();
    if patient.action_bins.len() + 1 < bins {
        return Err(Error::input(format!(
            "patient {} has {} action bins but {bins} time bins",
            patient.patient_id,
            patient.action_bins.len()
        )));
    }
    let actions = patient.action_bins[..bins - 1].to_vec();
    Ok(Some(BinnedPatient {
        patient_id: patient.patient_id.clone(),
        statics,
        temporal,
        actions,
        survived28: patient.survived28,
    }))
}

fn mean_std(values: impl Iterator<Item = f64>) -> (f64, f64, usize) {
    let v: Vec<f64> = values.collect();
    let n = v.len();
    if n == 0 {
        return (0.0, 0.0, 0);
    }
    let mean = v.iter().sum::<f64>() / n as f64;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
    (mean, var.sqrt(), n)
}

fn safe_std(std: f64, name: &str) -> f64 {
    if std > 0.0 && std.is_finite() {
        std
    } else {
        log::warn!("feature {name:?} has zero train-split variance; z-scoring with std = 1");
        1.0
    }
}

/// Full preprocessing pipeline. The split is drawn after stay filtering so
/// the 70:15:15 ratio holds for the retained cohort.
pub fn preprocess(raw: &RawCohort, split_seed: u64) -> Result<Cohort> {
    raw.schema.validate()?;
    let schema = &raw.schema;
    let mut binned = Vec::new();
    for p in &raw.patients {
        if let Some(b) = bin_patient(p, schema)? {
            binned.push(b);
        }
    }
    let dropped = raw.patients.len() - binned.len();
    if dropped > 0 {
        log::info!("dropped {dropped} stays outside {MIN_STAY_HOURS}-{MAX_STAY_HOURS} h");
    }
    let splits = split_assignment(binned.len(), split_seed)?;
    normalize(schema, binned, splits)
}

/// Impute and z-score already-binned patients under a given split.
pub fn normalize(schema: &FeatureSchema, binned: Vec<BinnedPatient>, splits: Vec<Split>) -> Result<Cohort> {
    if binned.len() != splits.len() {
        return Err(Error::input("split assignment length does not match the cohort"));
    }
    let train: Vec<&BinnedPatient> =
        binned.iter().zip(&splits).filter(|(_, s)| **s == Split::Train).map(|(b, _)| b).collect();
    if train.is_empty() {
        return Err(Error::input("train split is empty"));
    }
    let tw = schema.temporal_width();
    let sw = schema.static_width();

    // Fallback means from observed train values.
    let observed_mean = |f: usize| -> f64 {
        let (m, _, n) = mean_std(train.iter().flat_map(|p| p.temporal.iter().filter_map(move |row| row[f])));
        if n == 0 {
            let spec = &schema.temporal_features[f];
            0.5 * (spec.min + spec.max)
        } else {
            m
        }
    };
    let temporal_fill: Vec<f64> = (0..tw).map(observed_mean).collect();
    let static_fill: Vec<f64> = (0..sw)
        .map(|f| {
            let (m, _, n) = mean_std(train.iter().filter_map(|p| p.statics[f]));
            if n == 0 {
                let spec = &schema.static_features[f];
                0.5 * (spec.min + spec.max)
            } else {
                m
            }
        })
        .collect();

    let imputed: Vec<(Vec<f64>, Vec<Vec<f64>>)> = binned
        .iter()
        .map(|p| {
            let statics = p.statics.iter().enumerate().map(|(f, v)| v.unwrap_or(static_fill[f])).collect();
            let mut rows = Vec::with_capacity(p.temporal.len());
            let mut last: Vec<Option<f64>> = vec![None; tw];
            for row in &p.temporal {
                let filled: Vec<f64> = (0..tw)
                    .map(|f| {
                        if let Some(v) = row[f] {
                            last[f] = Some(v);
                        }
                        last[f].unwrap_or(temporal_fill[f])
                    })
                    .collect();
                rows.push(filled);
            }
            (statics, rows)
        })
        .collect();

    let is_train = |i: usize| splits[i] == Split::Train;
    let mut stats = ZScoreStats {
        static_mean: Vec::with_capacity(sw),
        static_std: Vec::with_capacity(sw),
        temporal_mean: Vec::with_capacity(tw),
        temporal_std: Vec::with_capacity(tw),
    };
    for f in 0..sw {
        let (m, s, _) = mean_std(imputed.iter().enumerate().filter(|(i, _)| is_train(*i)).map(|(_, p)| p.0[f]));
        stats.static_mean.push(m);
        stats.static_std.push(safe_std(s, &schema.static_features[f].name));
    }
    for f in 0..tw {
        let (m, s, _) = mean_std(
            imputed.iter().enumerate().filter(|(i, _)| is_train(*i)).flat_map(|(_, p)| p.1.iter().map(move |r| r[f])),
        );
        stats.temporal_mean.push(m);
        stats.temporal_std.push(safe_std(s, &schema.temporal_features[f].name));
    }

    let acuity = schema.acuity_index().expect("validated schema");
    let trajectories = binned
        .into_iter()
        .zip(imputed)
        .map(|(b, (statics, rows))| {
            let acuity_series = rows.iter().map(|r| r[acuity]).collect();
            let statics = statics
                .iter()
                .enumerate()
                .map(|(f, v)| (v - stats.static_mean[f]) / stats.static_std[f])
                .collect();
            let features = rows
                .iter()
                .map(|r| r.iter().enumerate().map(|(f, v)| (v - stats.temporal_mean[f]) / stats.temporal_std[f]).collect())
                .collect();
            Trajectory {
                patient_id: b.patient_id,
                statics,
                features,
                actions: b.actions,
                acuity: acuity_series,
                survived28: b.survived28,
            }
        })
        .collect();

    let cohort = Cohort { schema: schema.clone(), trajectories, splits, stats };
    cohort.validate()?;
    Ok(cohort)
}
