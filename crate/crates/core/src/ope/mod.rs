//! Off-policy evaluation on held-out trajectories.
//!
//! The behavior policy μ is cloned from logged actions. The learned policy is
//! deterministic, so for importance weighting it is softened to put `1 − ε`
//! on its greedy action and `ε` on the other one. Per-trajectory weights
//! are accumulated in log space, which keeps long trajectories from
//! under- or overflowing.

pub mod baselines;

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bcq::{predict_proba, train_classifier, ClassifierConfig, CurvePoint, PolicyBundle, ACTIONS};
use crate::cohort::ReplayBuffer;
use crate::error::{Error, Result};
use crate::nn::{derive_seed, rng_from_seed, Activation, Checkpoint, Mlp, Tensor};

pub const MU_FLOOR: f64 = 1e-6;
pub const RATIO_MIN: f64 = 1e-4;
pub const RATIO_MAX: f64 = 1e4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OpeConfig {
    /// Probability the softened policy puts on the non-greedy action.
    pub epsilon: f64,
    /// Discount for R_n; `None` uses the training γ.
    pub gamma: Option<f64>,
    /// Hidden width of μ.
    pub mu_hidden: usize,
    pub mu_training: ClassifierConfig,
}

impl Default for OpeConfig {
    fn default() -> Self {
        Self { epsilon: 0.01, gamma: None, mu_hidden: 64, mu_training: ClassifierConfig::default() }
    }
}

impl OpeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return Err(Error::config(format!("ope.epsilon must lie in (0, 0.5), got {}", self.epsilon)));
        }
        if let Some(g) = self.gamma {
            if !(0.0..=1.0).contains(&g) {
                return Err(Error::config(format!("ope.gamma must lie in [0, 1], got {g}")));
            }
        }
        if self.mu_hidden == 0 {
            return Err(Error::config("ope.mu_hidden must be > 0"));
        }
        self.mu_training.validate()
    }
}

/// Behavior-cloned μ: `[state_dim, hidden, ACTIONS]`, relu between, softmax
/// head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorPolicy {
    pub net: Mlp,
}

impl BehaviorPolicy {
    pub fn new(state_dim: usize, hidden: usize, seed: u64) -> Self {
        let net = Mlp::new(&mut rng_from_seed(derive_seed(seed, 4)), &[state_dim, hidden, ACTIONS], Activation::Relu, Activation::Identity);
        Self { net }
    }

    pub fn probs(&self, states: &Tensor) -> Result<Vec<Vec<f64>>> {
        predict_proba(&self.net, states)
    }

    pub fn probs_rows(&self, states: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        if states.is_empty() {
            return Ok(Vec::new());
        }
        self.probs(&Tensor::from_rows(states)?)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new().with_metadata("sizes", self.net.sizes())?;
        ck.insert("mu", &self.net);
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let sizes: Vec<usize> = ck.metadata("sizes")?;
        if sizes.len() != 3 {
            return Err(Error::input(format!("behavior policy checkpoint has sizes {sizes:?}")));
        }
        let mut mu = Self::new(sizes[0], sizes[1], 0);
        ck.load_into("mu", &mut mu.net)?;
        Ok(mu)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.checkpoint()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Fit μ on the (state, logged action) pairs of `buffer`.
pub fn train_behavior_policy(buffer: &ReplayBuffer, config: &OpeConfig, seed: u64) -> Result<BehaviorPolicy> {
    let (states, labels) = crate::bcq::buffer_states_actions(buffer)?;
    let mut mu = BehaviorPolicy::new(buffer.state_dim(), config.mu_hidden, seed);
    train_classifier(&mut mu.net, &states, &labels, &config.mu_training, derive_seed(seed, 5))?;
    Ok(mu)
}

/// Decision steps of one held-out trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalTrajectory {
    pub patient: usize,
    pub states: Vec<Vec<f64>>,
    pub actions: Vec<u8>,
    pub rewards: Vec<f64>,
}

/// Regroup a buffer into per-patient trajectories. Transitions of one patient
/// are contiguous in buffers built from a cohort.
pub fn trajectories_from_buffer(buffer: &ReplayBuffer) -> Vec<EvalTrajectory> {
    let mut out: Vec<EvalTrajectory> = Vec::new();
    for t in buffer.transitions() {
        match out.last_mut() {
            Some(traj) if traj.patient == t.patient => {
                traj.states.push(t.state.clone());
                traj.actions.push(t.action);
                traj.rewards.push(t.reward);
            }
            _ => out.push(EvalTrajectory {
                patient: t.patient,
                states: vec![t.state.clone()],
                actions: vec![t.action],
                rewards: vec![t.reward],
            }),
        }
    }
    out
}

/// `Σ_t γ^t r_t`.
pub fn trajectory_return(rewards: &[f64], gamma: f64) -> f64 {
    let mut discount = 1.0;
    let mut total = 0.0;
    for r in rewards {
        total += discount * r;
        discount *= gamma;
    }
    total
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WisReport {
    pub estimate: f64,
    /// Per-trajectory weights scaled so the largest is 1.
    pub weights: Vec<f64>,
    /// Natural log of the unscaled weights.
    pub log_weights: Vec<f64>,
    pub returns: Vec<f64>,
    pub effective_sample_size: f64,
    /// Per-step ratios raised to the lower clip bound.
    pub clipped_low: usize,
    /// Per-step ratios lowered to the upper clip bound.
    pub clipped_high: usize,
    /// Steps where μ fell below its floor.
    pub mu_floored: usize,
}

/// `Σ w R / Σ w`, clamped into `[min R, max R]` against rounding.
pub fn wis_from_weights(weights: &[f64], returns: &[f64]) -> Result<f64> {
    if weights.len() != returns.len() {
        return Err(Error::input(format!("{} weights for {} returns", weights.len(), returns.len())));
    }
    if weights.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
        return Err(Error::input("importance weights must be finite and non-negative"));
    }
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Degenerate("all importance weights are zero".into()));
    }
    let num: f64 = weights.iter().zip(returns).map(|(w, r)| w * r).sum();
    let lo = returns.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = returns.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok((num / total).clamp(lo, hi))
}

/// Weighted importance sampling of the ε-softened greedy policy.
///
/// `greedy[n][t]` is the policy's action and `mu[n][t]` the behavior
/// probabilities at step `t` of trajectory `n`.
pub fn wis(
    trajectories: &[EvalTrajectory],
    greedy: &[Vec<u8>],
    mu: &[Vec<Vec<f64>>],
    gamma: f64,
    epsilon: f64,
) -> Result<WisReport> {
    if trajectories.is_empty() {
        return Err(Error::Degenerate("no trajectories to evaluate".into()));
    }
    if greedy.len() != trajectories.len() || mu.len() != trajectories.len() {
        return Err(Error::input("policy and behavior probabilities must cover every trajectory"));
    }
    if !(epsilon > 0.0 && epsilon < 0.5) {
        return Err(Error::config(format!("epsilon must lie in (0, 0.5), got {epsilon}")));
    }
    let (ln_min, ln_max) = (RATIO_MIN.ln(), RATIO_MAX.ln());
    let mut report = WisReport {
        estimate: 0.0,
        weights: Vec::with_capacity(trajectories.len()),
        log_weights: Vec::with_capacity(trajectories.len()),
        returns: Vec::with_capacity(trajectories.len()),
        effective_sample_size: 0.0,
        clipped_low: 0,
        clipped_high: 0,
        mu_floored: 0,
    };
    for (n, traj) in trajectories.iter().enumerate() {
        let steps = traj.actions.len();
        if greedy[n].len() != steps || mu[n].len() != steps {
            return Err(Error::input(format!("trajectory {n}: step counts disagree")));
        }
        let mut log_w = 0.0;
        for t in 0..steps {
            let a = traj.actions[t] as usize;
            let pi = if a == greedy[n][t] as usize { 1.0 - epsilon } else { epsilon };
            let mut m = mu[n][t][a];
            if m < MU_FLOOR {
                m = MU_FLOOR;
                report.mu_floored += 1;
            }
            let mut ln_ratio = pi.ln() - m.ln();
            if ln_ratio < ln_min {
                ln_ratio = ln_min;
                report.clipped_low += 1;
            } else if ln_ratio > ln_max {
                ln_ratio = ln_max;
                report.clipped_high += 1;
            }
            log_w += ln_ratio;
        }
        report.log_weights.push(log_w);
        report.returns.push(trajectory_return(&traj.rewards, gamma));
    }
    let max_log = report.log_weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    report.weights = report.log_weights.iter().map(|l| (l - max_log).exp()).collect();
    report.estimate = wis_from_weights(&report.weights, &report.returns)?;
    let s: f64 = report.weights.iter().sum();
    let s2: f64 = report.weights.iter().map(|w| w * w).sum();
    report.effective_sample_size = s * s / s2;
    Ok(report)
}

/// Fraction of steps where the policy agrees with the logged action.
pub fn accuracy_match(trajectories: &[EvalTrajectory], greedy: &[Vec<u8>]) -> Result<f64> {
    let mut total = 0usize;
    let mut hits = 0usize;
    if greedy.len() != trajectories.len() {
        return Err(Error::input("policy actions must cover every trajectory"));
    }
    for (traj, pi) in trajectories.iter().zip(greedy) {
        if pi.len() != traj.actions.len() {
            return Err(Error::input(format!("patient {}: step counts disagree", traj.patient)));
        }
        total += pi.len();
        hits += pi.iter().zip(&traj.actions).filter(|(p, a)| p == a).count();
    }
    if total == 0 {
        return Err(Error::input("no decision steps to compare"));
    }
    Ok(hits as f64 / total as f64)
}

/// Evaluates a bundle against fixed held-out trajectories. μ's probabilities
/// are computed once.
pub struct PolicyEvaluator {
    trajectories: Vec<EvalTrajectory>,
    flat_states: Tensor,
    mu: Vec<Vec<Vec<f64>>>,
    gamma: f64,
    epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyEvaluation {
    pub wis: WisReport,
    pub accuracy: f64,
}

impl PolicyEvaluator {
    pub fn new(trajectories: Vec<EvalTrajectory>, mu: &BehaviorPolicy, gamma: f64, epsilon: f64) -> Result<Self> {
        if trajectories.is_empty() {
            return Err(Error::input("evaluation needs at least one trajectory"));
        }
        let rows: Vec<&[f64]> = trajectories.iter().flat_map(|t| t.states.iter().map(|s| &s[..])).collect();
        let flat_states = Tensor::from_rows(&rows)?;
        let probs = mu.probs(&flat_states)?;
        let mu = split_like(&trajectories, probs);
        Ok(Self { trajectories, flat_states, mu, gamma, epsilon })
    }

    pub fn trajectories(&self) -> &[EvalTrajectory] {
        &self.trajectories
    }

    pub fn greedy(&self, bundle: &PolicyBundle) -> Result<Vec<Vec<u8>>> {
        Ok(split_like(&self.trajectories, bundle.act(&self.flat_states)?))
    }

    pub fn evaluate(&self, bundle: &PolicyBundle) -> Result<PolicyEvaluation> {
        let greedy = self.greedy(bundle)?;
        Ok(PolicyEvaluation {
            wis: wis(&self.trajectories, &greedy, &self.mu, self.gamma, self.epsilon)?,
            accuracy: accuracy_match(&self.trajectories, &greedy)?,
        })
    }
}

fn split_like<T>(trajectories: &[EvalTrajectory], flat: Vec<T>) -> Vec<Vec<T>> {
    let mut it = flat.into_iter();
    trajectories.iter().map(|t| it.by_ref().take(t.actions.len()).collect()).collect()
}

/// Mean and sample standard deviation across seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Some(Self { mean, std })
    }
}

impl fmt::Display for MeanStd {
    /// Two decimals by default, e.g. `0.85 ± 0.02`; `{:.3}` changes both.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = f.precision().unwrap_or(2);
        write!(f, "{:.p$} ± {:.p$}", self.mean, self.std)
    }
}

/// One training run's evaluation artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub seed: u64,
    pub config_hash: String,
    pub points: Vec<CurvePoint>,
    pub final_wis: Option<f64>,
    pub final_accuracy: Option<f64>,
    /// WIS diagnostics of the final policy.
    pub final_ess: Option<f64>,
    pub final_clip_events: Option<usize>,
    /// Discount used for R_n.
    pub return_gamma: f64,
    pub epsilon: f64,
}

impl EvaluationReport {
    pub fn validate(&self) -> Result<()> {
        if self.points.windows(2).any(|w| w[1].iteration <= w[0].iteration) {
            return Err(Error::input("curve iterations must be strictly increasing"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::Transition;
    use proptest::prelude::*;
    use rand::Rng;

    fn traj(rewards: Vec<f64>, actions: Vec<u8>) -> EvalTrajectory {
        EvalTrajectory { patient: 0, states: vec![vec![0.0]; actions.len()], actions, rewards }
    }

    #[test]
    fn return_examples() {
        let r1 = [0.0, 0.0, 0.0, 0.0, 10.0];
        assert_eq!(trajectory_return(&r1, 1.0), 10.0);
        assert!((trajectory_return(&r1, 0.99) - 10.0 * 0.99f64.powi(4)).abs() < 1e-12);
        assert!((trajectory_return(&r1, 0.99) - 9.606).abs() < 1e-3);
        assert_eq!(trajectory_return(&[0.0; 7], 0.9), 0.0);
    }

    #[test]
    fn weights_fixture() {
        assert_eq!(wis_from_weights(&[3.0, 1.0], &[10.0, -10.0]).unwrap(), 5.0);
        assert_eq!(wis_from_weights(&[0.37], &[-4.5]).unwrap(), -4.5);
        assert!(matches!(wis_from_weights(&[0.0, 0.0], &[1.0, 2.0]), Err(Error::Degenerate(_))));
    }

    #[test]
    fn on_policy_reduction_is_the_mean() {
        let eps = 0.01;
        let mut rng = rng_from_seed(1);
        let mut trajs = Vec::new();
        let mut greedy = Vec::new();
        let mut mu = Vec::new();
        for _ in 0..50 {
            let len = rng.random_range(1..30);
            let actions: Vec<u8> = (0..len).map(|_| rng.random_range(0..2)).collect();
            let g: Vec<u8> = (0..len).map(|_| rng.random_range(0..2)).collect();
            let m: Vec<Vec<f64>> = g.iter().map(|&a| if a == 0 { vec![1.0 - eps, eps] } else { vec![eps, 1.0 - eps] }).collect();
            trajs.push(traj((0..len).map(|_| rng.random_range(-3.0..3.0)).collect(), actions));
            greedy.push(g);
            mu.push(m);
        }
        let report = wis(&trajs, &greedy, &mu, 0.99, eps).unwrap();
        assert!(report.weights.iter().all(|&w| w == 1.0));
        let mean = report.returns.iter().sum::<f64>() / report.returns.len() as f64;
        assert!((report.estimate - mean).abs() < 1e-9);
        assert_eq!(report.clipped_low + report.clipped_high + report.mu_floored, 0);
        assert!((report.effective_sample_size - 50.0).abs() < 1e-9);
    }

    #[test]
    fn clipping_and_floor_are_counted() {
        let t = traj(vec![1.0, 1.0], vec![1, 0]);
        // Step 0: π = 0.99, μ = 1e-9 → floored to 1e-6, ratio 9.9e5 → clipped high.
        // Step 1: π = 0.01, μ = 0.999 → ratio ≈ 0.01, unclipped.
        let mu = vec![vec![vec![1.0 - 1e-9, 1e-9], vec![0.999, 0.001]]];
        let r = wis(&[t], &[vec![1, 1]], &mu, 1.0, 0.01).unwrap();
        assert_eq!((r.mu_floored, r.clipped_high, r.clipped_low), (1, 1, 0));
        assert_eq!(r.estimate, 2.0);
    }

    #[test]
    fn accuracy_examples() {
        let trajs = vec![traj(vec![0.0; 3], vec![0, 1, 1]), traj(vec![0.0; 2], vec![1, 0])];
        let logged: Vec<Vec<u8>> = trajs.iter().map(|t| t.actions.clone()).collect();
        let flipped: Vec<Vec<u8>> = logged.iter().map(|a| a.iter().map(|x| 1 - x).collect()).collect();
        assert_eq!(accuracy_match(&trajs, &logged).unwrap(), 1.0);
        assert_eq!(accuracy_match(&trajs, &flipped).unwrap(), 0.0);
    }

    #[test]
    fn mean_std_format() {
        let ms = MeanStd::of(&[0.83, 0.85, 0.87]).unwrap();
        assert_eq!(ms.to_string(), "0.85 ± 0.02");
        assert_eq!(format!("{:.3}", MeanStd { mean: 1.0, std: 0.5 }), "1.000 ± 0.500");
        assert_eq!(MeanStd::of(&[2.0]).unwrap().std, 0.0);
        assert!(MeanStd::of(&[]).is_none());
    }

    #[test]
    fn r2_returns_stay_in_envelope() {
        use crate::rewards::assign_r2;
        let mut rng = rng_from_seed(3);
        for _ in 0..500 {
            let len = rng.random_range(2..40);
            let acuity: Vec<f64> = (0..len).map(|_| rng.random_range(0.0..24.0)).collect();
            let r = assign_r2(&acuity, rng.random_bool(0.5), 10.0, 1.0).unwrap();
            let bound = 10.0 + (len - 1) as f64;
            assert!(trajectory_return(&r, 1.0).abs() <= bound);
        }
    }

    #[test]
    fn buffer_regrouping() {
        let ts = (0..7)
            .map(|i| Transition {
                state: vec![i as f64],
                action: (i % 2) as u8,
                reward: i as f64,
                next_state: vec![0.0],
                done: i == 2 || i == 6,
                patient: if i < 3 { 4 } else { 9 },
            })
            .collect();
        let trajs = trajectories_from_buffer(&ReplayBuffer::new(ts).unwrap());
        assert_eq!(trajs.len(), 2);
        assert_eq!(trajs[0].rewards, vec![0.0, 1.0, 2.0]);
        assert_eq!(trajs[1].patient, 9);
        assert_eq!(trajs[1].actions, vec![1, 0, 1, 0]);
    }

    #[test]
    fn behavior_policy_is_strictly_positive_and_learns_constant() {
        let mut rng = rng_from_seed(5);
        let ts = (0..300)
            .map(|i| Transition {
                state: (0..3).map(|_| rng.random_range(-1.0..1.0)).collect(),
                action: 0,
                reward: 0.0,
                next_state: vec![0.0; 3],
                done: true,
                patient: i,
            })
            .collect();
        let buffer = ReplayBuffer::new(ts).unwrap();
        let cfg = OpeConfig {
            mu_hidden: 16,
            mu_training: ClassifierConfig { iterations: 1500, learning_rate: 1e-2, ..Default::default() },
            ..Default::default()
        };
        let mu = train_behavior_policy(&buffer, &cfg, 0).unwrap();
        let states: Vec<Vec<f64>> = buffer.transitions().iter().map(|t| t.state.clone()).collect();
        for p in mu.probs_rows(&states).unwrap() {
            assert!(p[0] > 0.99);
            assert!(p.iter().all(|&x| x >= 1e-12));
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let dir = tempfile::tempdir().unwrap();
        mu.save(&dir.path().join("mu.json")).unwrap();
        assert_eq!(BehaviorPolicy::load(&dir.path().join("mu.json")).unwrap(), mu);
    }

    #[test]
    fn report_rejects_non_increasing_points() {
        let p = |i| CurvePoint { iteration: i, wis: None, accuracy: None, loss: 0.0 };
        let mut r = EvaluationReport {
            seed: 0,
            config_hash: String::new(),
            points: vec![p(0), p(10)],
            final_wis: None,
            final_accuracy: None,
            final_ess: None,
            final_clip_events: None,
            return_gamma: 0.99,
            epsilon: 0.01,
        };
        assert!(r.validate().is_ok());
        r.points.push(p(10));
        assert!(r.validate().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(500))]
        #[test]
        fn estimate_is_a_weighted_average(
            pairs in proptest::collection::vec((0.0f64..1e3, -50.0f64..50.0), 1..30),
            c in -5.0f64..5.0,
        ) {
            let w: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let r: Vec<f64> = pairs.iter().map(|p| p.1).collect();
            prop_assume!(w.iter().sum::<f64>() > 0.0);
            let est = wis_from_weights(&w, &r).unwrap();
            let lo = r.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(est >= lo && est <= hi);
            let scaled: Vec<f64> = r.iter().map(|x| c * x).collect();
            let est_c = wis_from_weights(&w, &scaled).unwrap();
            prop_assert!((est_c - c * est).abs() <= 1e-9 * (1.0 + est.abs() * c.abs()));
        }
    }
}
