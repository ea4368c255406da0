//! Per-step classification baselines: logistic regression and a
//! one-hidden-layer MLP, each tuned on the validation split over its grid and
//! scored on the test split by the same action-matching accuracy as the
//! learned policy.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::bcq::{accuracy, predict, train_classifier, ClassifierConfig, ACTIONS};
use crate::cohort::ReplayBuffer;
use crate::error::{Error, Result};
use crate::grids::{LrGrid, MlpCandidate, MlpGrid};
use crate::nn::{derive_seed, rng_from_seed, Activation, Mlp, OptimizerKind, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Lr,
    Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineConfig {
    /// Optimizer steps per fitted candidate.
    pub iterations: usize,
    /// MLP candidates drawn from the full grid; 0 searches all of it.
    pub mlp_budget: usize,
    /// Minibatch size and step size for logistic regression.
    pub lr_batch_size: usize,
    pub lr_learning_rate: f64,
    pub seed: u64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self { iterations: 2000, mlp_budget: 12, lr_batch_size: 64, lr_learning_rate: 1e-2, seed: 0 }
    }
}

/// States with their logged actions, one row per decision step.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSteps {
    pub states: Tensor,
    pub labels: Vec<usize>,
}

impl LabeledSteps {
    pub fn from_buffer(buffer: &ReplayBuffer) -> Result<Self> {
        let (states, labels) = crate::bcq::buffer_states_actions(buffer)?;
        Ok(Self { states, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Share of the most frequent label.
pub fn majority_rate(labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let mut counts = [0usize; ACTIONS];
    for &l in labels {
        counts[l.min(ACTIONS - 1)] += 1;
    }
    *counts.iter().max().unwrap() as f64 / labels.len() as f64
}

/// Logistic regression with inverse regularization strength `c`. The
/// penalized objective `½‖w‖² + c·Σ CE` is divided by `c·n`, giving a mean
/// cross-entropy plus `‖w‖²/(2cn)` on the weights.
pub fn train_lr(data: &LabeledSteps, c: f64, config: &BaselineConfig, seed: u64) -> Result<Mlp> {
    if !(c > 0.0) {
        return Err(Error::config(format!("inverse regularization strength must be > 0, got {c}")));
    }
    let mut net = Mlp::new(&mut rng_from_seed(seed), &[data.states.cols(), ACTIONS], Activation::Identity, Activation::Identity);
    let cfg = ClassifierConfig {
        iterations: config.iterations,
        batch_size: config.lr_batch_size,
        learning_rate: config.lr_learning_rate,
        optimizer: OptimizerKind::Adam,
        l2: 1.0 / (2.0 * c * data.len() as f64),
    };
    train_classifier(&mut net, &data.states, &data.labels, &cfg, derive_seed(seed, 1))?;
    Ok(net)
}

pub fn train_mlp(data: &LabeledSteps, candidate: &MlpCandidate, config: &BaselineConfig, seed: u64) -> Result<Mlp> {
    let mut net = Mlp::new(
        &mut rng_from_seed(seed),
        &[data.states.cols(), candidate.hidden, ACTIONS],
        candidate.activation,
        Activation::Identity,
    );
    let cfg = ClassifierConfig {
        iterations: config.iterations,
        batch_size: candidate.batch_size,
        learning_rate: candidate.learning_rate,
        optimizer: candidate.optimizer,
        l2: 0.0,
    };
    train_classifier(&mut net, &data.states, &data.labels, &cfg, derive_seed(seed, 1))?;
    Ok(net)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineResult {
    pub kind: BaselineKind,
    /// The selected grid point.
    pub params: serde_json::Value,
    pub candidates_tried: usize,
    pub validation_accuracy: f64,
    pub test_accuracy: f64,
}

fn score(net: &Mlp, data: &LabeledSteps) -> Result<f64> {
    Ok(accuracy(&predict(net, &data.states)?, &data.labels))
}

/// Fit every grid value on `train`, keep the best on `validation` (first
/// wins ties) and report its `test` accuracy.
pub fn search_lr(
    train: &LabeledSteps,
    validation: &LabeledSteps,
    test: &LabeledSteps,
    grid: &LrGrid,
    config: &BaselineConfig,
) -> Result<BaselineResult> {
    let mut best: Option<(f64, f64, Mlp)> = None;
    for (k, &c) in grid.inverse_regularization.iter().enumerate() {
        let net = train_lr(train, c, config, derive_seed(config.seed, k as u64))?;
        let v = score(&net, validation)?;
        log::debug!("lr C={c}: validation accuracy {v:.4}");
        if best.as_ref().is_none_or(|b| v > b.0) {
            best = Some((v, c, net));
        }
    }
    let (v, c, net) = best.ok_or_else(|| Error::config("empty logistic-regression grid"))?;
    Ok(BaselineResult {
        kind: BaselineKind::Lr,
        params: serde_json::json!({ "inverse_regularization": c }),
        candidates_tried: grid.inverse_regularization.len(),
        validation_accuracy: v,
        test_accuracy: score(&net, test)?,
    })
}

/// Candidates searched for a given budget: the whole grid when the budget is
/// 0 or covers it, otherwise a seeded sample in grid order.
pub fn mlp_candidates(grid: &MlpGrid, budget: usize, seed: u64) -> Vec<MlpCandidate> {
    let all = grid.combinations();
    if budget == 0 || budget >= all.len() {
        return all;
    }
    let mut idx: Vec<usize> = (0..all.len()).collect();
    idx.shuffle(&mut rng_from_seed(seed));
    let mut chosen: Vec<usize> = idx.into_iter().take(budget).collect();
    chosen.sort_unstable();
    chosen.into_iter().map(|i| all[i]).collect()
}

pub fn search_mlp(
    train: &LabeledSteps,
    validation: &LabeledSteps,
    test: &LabeledSteps,
    grid: &MlpGrid,
    config: &BaselineConfig,
) -> Result<BaselineResult> {
    let candidates = mlp_candidates(grid, config.mlp_budget, derive_seed(config.seed, 99));
    let mut best: Option<(f64, MlpCandidate, Mlp)> = None;
    for (k, cand) in candidates.iter().enumerate() {
        let net = match train_mlp(train, cand, config, derive_seed(config.seed, k as u64)) {
            Ok(net) => net,
            // A diverging grid point (large SGD steps) is a bad candidate,
            // not a failed search.
            Err(e) if e.is_numerical() => {
                log::warn!("mlp candidate {cand:?} diverged: {e}");
                continue;
            }
            Err(e) => return Err(e),
        };
        let v = score(&net, validation)?;
        if best.as_ref().is_none_or(|b| v > b.0) {
            best = Some((v, *cand, net));
        }
    }
    let (v, cand, net) = best.ok_or_else(|| Error::Numerical("every mlp candidate diverged".into()))?;
    Ok(BaselineResult {
        kind: BaselineKind::Mlp,
        params: serde_json::to_value(cand)?,
        candidates_tried: candidates.len(),
        validation_accuracy: v,
        test_accuracy: score(&net, test)?,
    })
}
