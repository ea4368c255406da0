//! Discrete batch-constrained Q-learning.
//!
//! A behavior-cloned classifier G_ω filters the actions considered in the
//! Bellman backup: action `a` is eligible in `s` when
//! `G(a|s) / max_â G(â|s) > τ`. The Q-network is trained against a hard-synced
//! target copy with a Huber loss, and the extracted policy is the greedy
//! action among the eligible ones.

pub mod behavior;
pub mod train;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cohort::{ReplayBuffer, Transition};
use crate::error::{Error, Result};
use crate::nn::{
    derive_seed, huber_loss, parameter_hash, rng_from_seed, Activation, Checkpoint, Mlp, OptimizerKind, Tensor,
};

pub use behavior::{accuracy, predict, predict_proba, train_classifier, ClassifierConfig};
pub use train::{read_curve_csv, train_q, write_curve_csv, CurvePoint, EvalPoint, QTrainer};

/// Number of discrete actions (no transfusion / transfusion).
pub const ACTIONS: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BcqConfig {
    pub gamma: f64,
    pub tau: f64,
    /// Huber transition point.
    pub kappa: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    /// Iterations between hard copies θ → θ′.
    pub target_sync: usize,
    pub total_iterations: usize,
    pub eval_stride: usize,
    /// Width of both hidden layers of Q and G.
    pub hidden: usize,
    pub seed: u64,
    /// Training schedule for G_ω.
    pub behavior: ClassifierConfig,
}

impl Default for BcqConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            tau: 0.3,
            kappa: 1.0,
            batch_size: 64,
            learning_rate: 1e-4,
            optimizer: OptimizerKind::Adam,
            target_sync: 4000,
            total_iterations: 500_000,
            eval_stride: 1000,
            hidden: 64,
            seed: 0,
            behavior: ClassifierConfig::default(),
        }
    }
}

impl BcqConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::config(format!("bcq.gamma must lie in [0, 1], got {}", self.gamma)));
        }
        if !(0.0..1.0).contains(&self.tau) {
            return Err(Error::config(format!("bcq.tau must lie in [0, 1), got {}", self.tau)));
        }
        if !(self.kappa > 0.0) || !self.kappa.is_finite() {
            return Err(Error::config(format!("bcq.kappa must be > 0, got {}", self.kappa)));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::config(format!("bcq.learning_rate must be > 0, got {}", self.learning_rate)));
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("target_sync", self.target_sync),
            ("eval_stride", self.eval_stride),
            ("hidden", self.hidden),
        ] {
            if v == 0 {
                return Err(Error::config(format!("bcq.{name} must be > 0")));
            }
        }
        self.behavior.validate()
    }
}

/// `{a : G(a|s)/max G > τ}` in increasing action order. The argmax always
/// qualifies for τ < 1.
pub fn eligible_actions(probs: &[f64], tau: f64) -> Vec<usize> {
    let max = probs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let set: Vec<usize> = (0..probs.len()).filter(|&a| probs[a] / max > tau).collect();
    assert!(!set.is_empty(), "eligible action set is empty for probabilities {probs:?} at tau {tau}");
    set
}

/// Highest-valued eligible action; ties go to the lower index.
pub fn greedy_action(q: &[f64], eligible: &[usize]) -> usize {
    let mut best = eligible[0];
    for &a in &eligible[1..] {
        if q[a] > q[best] {
            best = a;
        }
    }
    best
}

/// `max_{a ∈ eligible} q[a]`.
pub fn constrained_max(q: &[f64], eligible: &[usize]) -> f64 {
    eligible.iter().map(|&a| q[a]).fold(f64::NEG_INFINITY, f64::max)
}

/// Q-network, its target copy and the action filter, plus the hash of the
/// encoder that produced the states they consume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyBundle {
    pub config: BcqConfig,
    pub q: Mlp,
    pub target: Mlp,
    pub g: Mlp,
    pub encoder_hash: Option<String>,
}

/// `[state_dim, hidden, hidden, ACTIONS]` with relu hidden layers.
pub fn q_topology(state_dim: usize, hidden: usize) -> [usize; 4] {
    [state_dim, hidden, hidden, ACTIONS]
}

impl PolicyBundle {
    pub fn new(config: BcqConfig, state_dim: usize) -> Result<Self> {
        config.validate()?;
        if state_dim == 0 {
            return Err(Error::config("state width must be > 0"));
        }
        let sizes = q_topology(state_dim, config.hidden);
        let q = Mlp::new(&mut rng_from_seed(derive_seed(config.seed, 0)), &sizes, Activation::Relu, Activation::Identity);
        let g = Mlp::new(&mut rng_from_seed(derive_seed(config.seed, 1)), &sizes, Activation::Relu, Activation::Identity);
        Ok(Self { config, target: q.clone(), q, g, encoder_hash: None })
    }

    pub fn state_dim(&self) -> usize {
        self.q.input_dim()
    }

    pub fn sync_target(&mut self) {
        self.target = self.q.clone();
    }

    fn check_width(&self, states: &Tensor) -> Result<()> {
        if states.cols() != self.state_dim() {
            return Err(Error::config(format!(
                "policy expects state width {}, got {}",
                self.state_dim(),
                states.cols()
            )));
        }
        Ok(())
    }

    pub fn q_values(&self, states: &Tensor) -> Result<Tensor> {
        self.check_width(states)?;
        self.q.forward(states)
    }

    /// G_ω(·|s) per row.
    pub fn behavior_probs(&self, states: &Tensor) -> Result<Vec<Vec<f64>>> {
        self.check_width(states)?;
        predict_proba(&self.g, states)
    }

    pub fn eligible(&self, states: &Tensor) -> Result<Vec<Vec<usize>>> {
        Ok(self.behavior_probs(states)?.iter().map(|p| eligible_actions(p, self.config.tau)).collect())
    }

    /// Constrained-greedy action per row.
    pub fn act(&self, states: &Tensor) -> Result<Vec<u8>> {
        let q = self.q_values(states)?;
        let eligible = self.eligible(states)?;
        Ok(eligible.iter().enumerate().map(|(r, e)| greedy_action(q.row_slice(r), e) as u8).collect())
    }

    pub fn act_rows(&self, states: &[Vec<f64>]) -> Result<Vec<u8>> {
        if states.is_empty() {
            return Ok(Vec::new());
        }
        self.act(&Tensor::from_rows(states)?)
    }

    /// Fit G_ω on the buffer's logged (state, action) pairs.
    pub fn fit_behavior(&mut self, buffer: &ReplayBuffer) -> Result<Vec<f64>> {
        let (states, labels) = buffer_states_actions(buffer)?;
        let seed = derive_seed(self.config.seed, 3);
        train_classifier(&mut self.g, &states, &labels, &self.config.behavior, seed)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new()
            .with_metadata("bcq_config", &self.config)?
            .with_metadata("state_dim", self.state_dim())?
            .with_metadata("encoder_hash", &self.encoder_hash)?;
        ck.insert("q", &self.q);
        ck.insert("target", &self.target);
        ck.insert("g", &self.g);
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config: BcqConfig = ck.metadata("bcq_config")?;
        let state_dim: usize = ck.metadata("state_dim")?;
        let mut bundle = Self::new(config, state_dim)?;
        bundle.encoder_hash = ck.metadata("encoder_hash")?;
        ck.load_into("q", &mut bundle.q)?;
        ck.load_into("target", &mut bundle.target)?;
        ck.load_into("g", &mut bundle.g)?;
        Ok(bundle)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.checkpoint()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    pub fn hashes(&self) -> (String, String, String) {
        (parameter_hash(&self.q), parameter_hash(&self.target), parameter_hash(&self.g))
    }
}

/// All buffer states as one matrix with their logged actions.
pub fn buffer_states_actions(buffer: &ReplayBuffer) -> Result<(Tensor, Vec<usize>)> {
    if buffer.is_empty() {
        return Err(Error::input("cannot train on an empty buffer"));
    }
    let width = buffer.state_dim();
    let mut values = Vec::with_capacity(buffer.len() * width);
    let mut labels = Vec::with_capacity(buffer.len());
    for t in buffer.transitions() {
        values.extend_from_slice(&t.state);
        labels.push(t.action as usize);
    }
    Ok((Tensor::matrix(buffer.len(), width, values)?, labels))
}

/// Stand-alone G_ω: `[state_dim, hidden, hidden, ACTIONS]` trained by
/// cross-entropy on the buffer.
pub fn train_behavior_model(buffer: &ReplayBuffer, hidden: usize, config: &ClassifierConfig, seed: u64) -> Result<Mlp> {
    let (states, labels) = buffer_states_actions(buffer)?;
    let mut g = Mlp::new(
        &mut rng_from_seed(derive_seed(seed, 1)),
        &q_topology(buffer.state_dim(), hidden),
        Activation::Relu,
        Activation::Identity,
    );
    train_classifier(&mut g, &states, &labels, config, derive_seed(seed, 3))?;
    Ok(g)
}

fn batch_states(batch: &[&Transition], next: bool) -> Result<Tensor> {
    let rows: Vec<&[f64]> = batch.iter().map(|t| if next { &t.next_state[..] } else { &t.state[..] }).collect();
    Tensor::from_rows(&rows)
}

/// Bootstrapped targets `r + γ·[1−done]·max_{a′∈eligible(s′)} Q_θ′(s′,a′)`.
pub fn constrained_targets(bundle: &PolicyBundle, batch: &[&Transition]) -> Result<Vec<f64>> {
    let next = batch_states(batch, true)?;
    let q_next = bundle.target.forward(&next)?;
    let eligible = bundle.eligible(&next)?;
    Ok(batch
        .iter()
        .enumerate()
        .map(|(i, t)| {
            if t.done {
                t.reward
            } else {
                t.reward + bundle.config.gamma * constrained_max(q_next.row_slice(i), &eligible[i])
            }
        })
        .collect())
}

/// Mean Huber loss of `y − Q_θ(s,a) + offset` where the optional offsets are
/// added per sample (the expert term for Q-value transfer).
pub fn constrained_loss(bundle: &PolicyBundle, batch: &[&Transition], offsets: Option<&[f64]>) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::input("loss over an empty batch"));
    }
    if let Some(o) = offsets {
        if o.len() != batch.len() {
            return Err(Error::config(format!("{} offsets for {} transitions", o.len(), batch.len())));
        }
    }
    let y = constrained_targets(bundle, batch)?;
    let q = bundle.q_values(&batch_states(batch, false)?)?;
    let mut total = 0.0;
    for (i, t) in batch.iter().enumerate() {
        let mut residual = y[i] - q.get(i, t.action as usize);
        if let Some(o) = offsets {
            residual += o[i];
        }
        total += huber_loss(residual, bundle.config.kappa)?;
    }
    Ok(total / batch.len() as f64)
}

pub fn bcq_loss(bundle: &PolicyBundle, batch: &[&Transition]) -> Result<f64> {
    constrained_loss(bundle, batch, None)
}

/// Unconstrained DQN loss: mean Huber of `r + γ·[1−done]·max_a′ Q′(s′,a′) − Q(s,a)`.
pub fn q_learning_loss(q: &Mlp, target: &Mlp, batch: &[&Transition], gamma: f64, kappa: f64) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::input("loss over an empty batch"));
    }
    let q_now = q.forward(&batch_states(batch, false)?)?;
    let q_next = target.forward(&batch_states(batch, true)?)?;
    let mut total = 0.0;
    for (i, t) in batch.iter().enumerate() {
        let boot = if t.done { 0.0 } else { q_next.row_slice(i).iter().cloned().fold(f64::NEG_INFINITY, f64::max) };
        let y = if t.done { t.reward } else { t.reward + gamma * boot };
        total += huber_loss(y - q_now.get(i, t.action as usize), kappa)?;
    }
    Ok(total / batch.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{DenseLayer, Parameterized};
    use proptest::prelude::*;
    use rand::Rng;

    fn transition(state: Vec<f64>, action: u8, reward: f64, next: Vec<f64>, done: bool) -> Transition {
        Transition { state, action, reward, next_state: next, done, patient: 0 }
    }

    fn random_buffer(n: usize, dim: usize, seed: u64) -> ReplayBuffer {
        let mut rng = rng_from_seed(seed);
        let ts = (0..n)
            .map(|i| {
                let s: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
                let s2: Vec<f64> = (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect();
                transition(s, rng.random_range(0..2u8), rng.random_range(-1.0..1.0), s2, i % 7 == 6)
            })
            .collect();
        ReplayBuffer::new(ts).unwrap()
    }

    #[test]
    fn eligibility_examples() {
        assert_eq!(eligible_actions(&[0.9, 0.1], 0.2), vec![0]);
        assert_eq!(eligible_actions(&[0.9, 0.1], 0.0), vec![0, 1]);
        for tau in [0.0, 0.3, 0.99] {
            assert_eq!(eligible_actions(&[0.5, 0.5], tau), vec![0, 1]);
        }
        // Ratio exactly τ is excluded.
        assert_eq!(eligible_actions(&[0.8, 0.4], 0.5), vec![0]);
        assert_eq!(eligible_actions(&[0.1, 0.9], 0.2), vec![1]);
    }

    #[test]
    fn greedy_examples() {
        assert_eq!(greedy_action(&[-5.0, 100.0], &[0]), 0);
        assert_eq!(greedy_action(&[1.0, 2.0], &[0, 1]), 1);
        assert_eq!(greedy_action(&[2.0, 2.0], &[0, 1]), 0);
        assert_eq!(greedy_action(&[2.0, 2.0], &[1]), 1);
    }

    #[test]
    fn config_validation() {
        assert!(BcqConfig::default().validate().is_ok());
        for bad in [
            BcqConfig { gamma: 1.1, ..Default::default() },
            BcqConfig { tau: 1.0, ..Default::default() },
            BcqConfig { tau: -0.1, ..Default::default() },
            BcqConfig { kappa: 0.0, ..Default::default() },
            BcqConfig { batch_size: 0, ..Default::default() },
            BcqConfig { target_sync: 0, ..Default::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))), "{bad:?}");
        }
    }

    // Q(s) = W·s + b with no hidden nonlinearity effect: a 3-layer network
    // whose first two layers are identity maps on non-negative inputs.
    fn tiny_linear_q(w: [[f64; 2]; 2], b: [f64; 2]) -> Mlp {
        let eye = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let zero = Tensor::vector(vec![0.0, 0.0]);
        Mlp {
            layers: vec![
                DenseLayer::from_parts(eye.clone(), zero.clone(), Activation::Relu).unwrap(),
                DenseLayer::from_parts(eye, zero, Activation::Relu).unwrap(),
                DenseLayer::from_parts(
                    Tensor::matrix(2, 2, vec![w[0][0], w[0][1], w[1][0], w[1][1]]).unwrap(),
                    Tensor::vector(b.to_vec()),
                    Activation::Identity,
                )
                .unwrap(),
            ],
        }
    }

    #[test]
    fn hand_computed_td_loss() {
        let config = BcqConfig { gamma: 0.99, kappa: 1.0, tau: 0.3, hidden: 2, ..Default::default() };
        let mut bundle = PolicyBundle::new(config, 2).unwrap();
        bundle.q = tiny_linear_q([[1.0, 0.0], [0.0, 2.0]], [0.0, 0.0]);
        bundle.target = tiny_linear_q([[0.5, 0.5], [1.0, -1.0]], [0.1, 0.2]);
        // G strongly prefers action 0 in every state: logits (3, 0).
        bundle.g = tiny_linear_q([[0.0, 0.0], [0.0, 0.0]], [3.0, 0.0]);
        let t = transition(vec![1.0, 0.5], 1, 0.2, vec![2.0, 1.0], false);
        // Q(s,1) = 2·0.5 = 1.0. Target on s′: a0 = 0.5·2 + 0.5·1 + 0.1 = 1.6,
        // a1 = 2 − 1 + 0.2 = 1.2. G ratio for a1 = e^0/e^3 ≈ 0.0498 < 0.3, so
        // only a0 is eligible: y = 0.2 + 0.99·1.6 = 1.784. δ = 0.784 < κ, so
        // L = 0.5·0.784² = 0.307328.
        let loss = bcq_loss(&bundle, &[&t]).unwrap();
        assert!((loss - 0.307_328).abs() < 1e-12, "{loss}");

        // With τ = 0 both actions count and the max is still 1.6.
        bundle.config.tau = 0.0;
        assert!((bcq_loss(&bundle, &[&t]).unwrap() - 0.307_328).abs() < 1e-12);

        // Make action 1 best under the target; the constraint now matters.
        bundle.target = tiny_linear_q([[0.0, 0.0], [0.0, 0.0]], [0.0, 5.0]);
        bundle.config.tau = 0.3;
        // y = 0.2 + 0.99·0 = 0.2, δ = −0.8 -> 0.32
        assert!((bcq_loss(&bundle, &[&t]).unwrap() - 0.32).abs() < 1e-12);
        bundle.config.tau = 0.0;
        // y = 0.2 + 0.99·5 = 5.15, δ = 4.15 > κ -> κ(|δ| − κ/2) = 3.65
        assert!((bcq_loss(&bundle, &[&t]).unwrap() - 3.65).abs() < 1e-12);
    }

    #[test]
    fn terminal_transition_ignores_bootstrap() {
        let mut bundle = PolicyBundle::new(BcqConfig { hidden: 2, ..Default::default() }, 2).unwrap();
        bundle.q = tiny_linear_q([[0.0, 0.0], [0.0, 0.0]], [10.0, 10.0]);
        bundle.target = tiny_linear_q([[0.0, 0.0], [0.0, 0.0]], [1e6, 1e6]);
        let t = transition(vec![0.3, 0.3], 0, 10.0, vec![0.3, 0.3], true);
        assert_eq!(bcq_loss(&bundle, &[&t]).unwrap(), 0.0);
    }

    #[test]
    fn tau_zero_reduces_to_q_learning() {
        let buffer = random_buffer(500, 5, 11);
        for seed in 0..20 {
            let mut bundle =
                PolicyBundle::new(BcqConfig { tau: 0.0, seed, hidden: 16, ..Default::default() }, 5).unwrap();
            bundle.target = Mlp::new(&mut rng_from_seed(seed + 100), &[5, 16, 16, 2], Activation::Relu, Activation::Identity);
            let idx = buffer.sample(&mut rng_from_seed(seed), 64);
            let batch: Vec<&Transition> = idx.iter().map(|&i| buffer.get(i)).collect();
            let a = bcq_loss(&bundle, &batch).unwrap();
            let b = q_learning_loss(&bundle.q, &bundle.target, &batch, 0.99, 1.0).unwrap();
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn act_respects_constraint() {
        let bundle = PolicyBundle::new(BcqConfig { tau: 0.3, hidden: 8, ..Default::default() }, 3).unwrap();
        let mut rng = rng_from_seed(4);
        let rows: Vec<Vec<f64>> = (0..500).map(|_| (0..3).map(|_| rng.random_range(-5.0..5.0)).collect()).collect();
        let x = Tensor::from_rows(&rows).unwrap();
        let acts = bundle.act(&x).unwrap();
        for (p, a) in bundle.behavior_probs(&x).unwrap().iter().zip(&acts) {
            let max = p[0].max(p[1]);
            assert!(p[*a as usize] / max > 0.3);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut bundle = PolicyBundle::new(BcqConfig { hidden: 8, seed: 5, ..Default::default() }, 4).unwrap();
        bundle.encoder_hash = Some("abc".into());
        bundle.q.layers[0].bias.values_mut()[0] = 0.25;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bundle.json");
        bundle.save(&path).unwrap();
        assert_eq!(PolicyBundle::load(&path).unwrap(), bundle);
    }

    #[test]
    fn behavior_model_learns_constant_action() {
        let mut ts = random_buffer(400, 4, 3).transitions().to_vec();
        ts.iter_mut().for_each(|t| t.action = 1);
        let buffer = ReplayBuffer::new(ts).unwrap();
        let g = train_behavior_model(&buffer, 16, &ClassifierConfig { iterations: 1500, learning_rate: 1e-2, ..Default::default() }, 1)
            .unwrap();
        let (x, _) = buffer_states_actions(&buffer).unwrap();
        assert!(predict_proba(&g, &x).unwrap().iter().all(|p| p[1] > 0.99));
    }

    #[test]
    fn behavior_model_on_separable_clouds() {
        let (x, y) = behavior::tests::separable(2000, 6, 6.0, 9);
        let ts = (0..x.rows())
            .map(|r| transition(x.row_slice(r).to_vec(), y[r] as u8, 0.0, x.row_slice(r).to_vec(), false))
            .collect();
        let buffer = ReplayBuffer::new(ts).unwrap();
        let cfg = ClassifierConfig { iterations: 1500, ..Default::default() };
        let g = train_behavior_model(&buffer, 32, &cfg, 2).unwrap();
        assert!(accuracy(&predict(&g, &x).unwrap(), &y) >= 0.99);
        let again = train_behavior_model(&buffer, 32, &cfg, 2).unwrap();
        assert_eq!(parameter_hash(&g), parameter_hash(&again));
        assert!(g.parameter_count() > 0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn argmax_is_always_eligible(p0 in 1e-9f64..1.0, tau in 0.0f64..0.999) {
            let probs = [p0, 1.0 - p0];
            let set = eligible_actions(&probs, tau);
            let argmax = if probs[1] > probs[0] { 1 } else { 0 };
            prop_assert!(set.contains(&argmax));
        }
    }
}
