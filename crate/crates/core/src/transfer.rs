//! Transfer from an expert bundle trained on a source task to a learner on a
//! target task.
//!
//! - `qvt`: the learner starts from its own initialization and the expert's
//!   `Q″(s,a)` enters every residual: `L_κ(y − Q_θ(s,a) + w·Q″)`.
//! - `wt`: Q, target-Q and G weights are copied and all layers keep training.
//! - `wtr`: as `wt`, then the listed dense layers are re-drawn.
//!
//! Encoders stay task-specific; only the networks behind the shared state
//! width move across.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bcq::{constrained_loss, BcqConfig, CurvePoint, PolicyBundle};
use crate::cohort::{Cohort, Transition};
use crate::error::{Error, Result};
use crate::nn::{derive_seed, rng_from_seed, Mlp, Tensor};
use crate::sim::SimConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferMode {
    Qvt,
    Wt,
    Wtr,
}

impl TransferMode {
    pub const ALL: [TransferMode; 3] = [TransferMode::Qvt, TransferMode::Wt, TransferMode::Wtr];

    pub fn name(self) -> &'static str {
        match self {
            TransferMode::Qvt => "qvt",
            TransferMode::Wt => "wt",
            TransferMode::Wtr => "wtr",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TransferConfig {
    pub mode: TransferMode,
    /// Bundle checkpoint of the expert.
    pub expert_checkpoint: Option<std::path::PathBuf>,
    /// Layers re-drawn under `wtr`, as `<network>.<layer index>` with network
    /// one of `q` or `g`.
    pub reinit_layers: Vec<String>,
    /// Weight on Q″ under `qvt`.
    pub qvt_weight: f64,
    /// Share of the source cohort size used for the paired target task.
    pub target_fraction: f64,
    /// Gaussian noise (standardized units) added to target-task features.
    pub target_feature_noise: f64,
}

impl Default for TransferConfig {
    fn default() -> Self {
        Self {
            mode: TransferMode::Wt,
            expert_checkpoint: None,
            reinit_layers: vec!["q.2".into(), "g.2".into()],
            qvt_weight: 1.0,
            target_fraction: 0.1,
            target_feature_noise: 0.1,
        }
    }
}

impl TransferConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mode == TransferMode::Wtr && self.reinit_layers.is_empty() {
            return Err(Error::config("transfer.reinit_layers must be non-empty for wtr"));
        }
        for l in &self.reinit_layers {
            parse_layer(l)?;
        }
        if !self.qvt_weight.is_finite() {
            return Err(Error::config("transfer.qvt_weight must be finite"));
        }
        if !(self.target_fraction > 0.0 && self.target_fraction <= 1.0) {
            return Err(Error::config(format!("transfer.target_fraction must lie in (0, 1], got {}", self.target_fraction)));
        }
        if !(self.target_feature_noise >= 0.0) || !self.target_feature_noise.is_finite() {
            return Err(Error::config("transfer.target_feature_noise must be finite and >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Network {
    Q,
    G,
}

fn parse_layer(name: &str) -> Result<(Network, usize)> {
    let bad = || Error::config(format!("re-init layer {name:?} is not of the form q.<n> or g.<n>"));
    let (net, idx) = name.split_once('.').ok_or_else(bad)?;
    let net = match net {
        "q" => Network::Q,
        "g" => Network::G,
        _ => return Err(bad()),
    };
    Ok((net, idx.parse().map_err(|_| bad())?))
}

/// `constrained_loss` with `Q″ = weight·Q_expert(s,a)`; the expert is only
/// read.
pub fn qvt_loss(learner: &PolicyBundle, expert: &Mlp, batch: &[&Transition], weight: f64) -> Result<f64> {
    if expert.input_dim() != learner.state_dim() || expert.output_dim() != learner.q.output_dim() {
        return Err(Error::config(format!(
            "expert maps {}→{} but the learner expects {}→{}",
            expert.input_dim(),
            expert.output_dim(),
            learner.state_dim(),
            learner.q.output_dim()
        )));
    }
    if batch.is_empty() {
        return Err(Error::input("loss over an empty batch"));
    }
    let rows: Vec<&[f64]> = batch.iter().map(|t| &t.state[..]).collect();
    let q = expert.forward(&Tensor::from_rows(&rows)?)?;
    let offsets: Vec<f64> = batch.iter().enumerate().map(|(i, t)| weight * q.get(i, t.action as usize)).collect();
    constrained_loss(learner, batch, Some(&offsets))
}

fn check_topology(expert: &Mlp, learner: &Mlp, net: &str) -> Result<()> {
    let (a, b) = (expert.sizes(), learner.sizes());
    if a.len() != b.len() {
        return Err(Error::config(format!("{net}: expert has {} layers, learner {}", a.len() - 1, b.len() - 1)));
    }
    for (i, (ea, la)) in expert.layers.iter().zip(&learner.layers).enumerate() {
        if ea.weight.shape() != la.weight.shape() || ea.activation != la.activation {
            return Err(Error::config(format!(
                "{net}.{i}: expert layer {:?} ({:?}) differs from learner layer {:?} ({:?})",
                ea.weight.shape(),
                ea.activation,
                la.weight.shape(),
                la.activation
            )));
        }
    }
    Ok(())
}

/// Initial learner bundle for `mode`. The learner keeps its own training
/// configuration; `state_dim` is the target task's encoder width.
pub fn init_learner(
    expert: &PolicyBundle,
    learner_config: &BcqConfig,
    state_dim: usize,
    mode: TransferMode,
    reinit_layers: &[String],
    seed: u64,
) -> Result<PolicyBundle> {
    let mut learner = PolicyBundle::new(learner_config.clone(), state_dim)?;
    check_topology(&expert.q, &learner.q, "q")?;
    check_topology(&expert.g, &learner.g, "g")?;
    match mode {
        TransferMode::Qvt => {}
        TransferMode::Wt | TransferMode::Wtr => {
            learner.q = expert.q.clone();
            learner.target = expert.target.clone();
            learner.g = expert.g.clone();
            if mode == TransferMode::Wtr {
                reinitialize(&mut learner, reinit_layers, seed)?;
            }
        }
    }
    Ok(learner)
}

/// Copy of the expert (`wt`) or copy with re-drawn layers (`wtr`), using the
/// expert's own configuration.
pub fn weight_transfer(expert: &PolicyBundle, mode: TransferMode, reinit_layers: &[String], seed: u64) -> Result<PolicyBundle> {
    if mode == TransferMode::Qvt {
        return Err(Error::config("weight_transfer needs mode wt or wtr"));
    }
    init_learner(expert, &expert.config, expert.state_dim(), mode, reinit_layers, seed)
}

// Re-draw the listed layers. A re-drawn Q layer is mirrored into the target
// network so θ′ = θ when training starts.
fn reinitialize(bundle: &mut PolicyBundle, layers: &[String], seed: u64) -> Result<()> {
    if layers.is_empty() {
        return Err(Error::config("wtr needs at least one layer to re-initialize"));
    }
    let mut rng = rng_from_seed(derive_seed(seed, 7));
    for name in layers {
        let (net, idx) = parse_layer(name)?;
        let target = match net {
            Network::Q => &mut bundle.q,
            Network::G => &mut bundle.g,
        };
        let count = target.layers.len();
        let layer = target
            .layers
            .get_mut(idx)
            .ok_or_else(|| Error::config(format!("layer {name} does not exist ({count} layers)")))?;
        layer.reinitialize(&mut rng);
        if net == Network::Q {
            bundle.target.layers[idx] = bundle.q.layers[idx].clone();
        }
    }
    Ok(())
}

/// Transfer benefit relative to a scratch learner on the same eval grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferMetrics {
    pub jumpstart: f64,
    pub asymptotic: f64,
    /// Deltas as a percentage of the scratch value's magnitude; `None` when
    /// the scratch value is zero.
    pub jumpstart_pct: Option<f64>,
    pub asymptotic_pct: Option<f64>,
}

fn wis_series(curve: &[CurvePoint], which: &str) -> Result<Vec<f64>> {
    curve
        .iter()
        .map(|p| p.wis.ok_or_else(|| Error::input(format!("{which} curve is missing WIS at iteration {}", p.iteration))))
        .collect()
}

/// Mean of the last tenth of the points (at least one).
pub fn tail_mean(values: &[f64]) -> f64 {
    let k = values.len().div_ceil(10).max(1);
    let tail = &values[values.len() - k..];
    tail.iter().sum::<f64>() / k as f64
}

fn pct(delta: f64, base: f64) -> Option<f64> {
    (base != 0.0).then(|| 100.0 * delta / base.abs())
}

pub fn transfer_metrics(scratch: &[CurvePoint], transfer: &[CurvePoint]) -> Result<TransferMetrics> {
    if scratch.is_empty() || scratch.len() != transfer.len() || scratch.iter().zip(transfer).any(|(a, b)| a.iteration != b.iteration)
    {
        return Err(Error::input("scratch and transfer curves must share the evaluation grid"));
    }
    let (s, t) = (wis_series(scratch, "scratch")?, wis_series(transfer, "transfer")?);
    let jumpstart = t[0] - s[0];
    let (ts, ss) = (tail_mean(&t), tail_mean(&s));
    let asymptotic = ts - ss;
    Ok(TransferMetrics { jumpstart, asymptotic, jumpstart_pct: pct(jumpstart, s[0]), asymptotic_pct: pct(asymptotic, ss) })
}

/// Largest percentage improvement across tasks, in the form
/// `jump-start WIS return improves up to 18.94% and asymptotic WIS return improves up to 21.63%`.
pub fn summarize(metrics: &[TransferMetrics]) -> String {
    let best = |f: fn(&TransferMetrics) -> Option<f64>| {
        metrics.iter().filter_map(f).fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v))))
    };
    let show = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.2}%"));
    format!(
        "jump-start WIS return improves up to {} and asymptotic WIS return improves up to {}",
        show(best(|m| m.jumpstart_pct)),
        show(best(|m| m.asymptotic_pct))
    )
}

/// Simulator settings for the target half of a paired task: the source
/// dynamics with `fraction` of its patients and an independent seed.
pub fn paired_target_sim(source: &SimConfig, fraction: f64) -> SimConfig {
    SimConfig {
        patients: ((source.patients as f64 * fraction).round() as usize).max(1),
        seed: derive_seed(source.seed, 0x7a2),
        ..source.clone()
    }
}

/// Add `N(0, sigma²)` to every standardized temporal feature.
pub fn add_feature_noise(cohort: &mut Cohort, sigma: f64, seed: u64) -> Result<()> {
    if sigma == 0.0 {
        return Ok(());
    }
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::config(format!("feature noise: {e}")))?;
    let mut rng = rng_from_seed(seed);
    for t in &mut cohort.trajectories {
        for row in &mut t.features {
            for v in row.iter_mut() {
                *v += normal.sample(&mut rng);
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bcq::bcq_loss;
    use crate::cohort::ReplayBuffer;
    use crate::nn::{Activation, Checkpoint};
    use proptest::prelude::*;
    use rand::Rng;

    fn bundle(seed: u64, dim: usize) -> PolicyBundle {
        PolicyBundle::new(BcqConfig { hidden: 16, seed, ..Default::default() }, dim).unwrap()
    }

    fn batch(n: usize, dim: usize, seed: u64) -> Vec<Transition> {
        let mut rng = rng_from_seed(seed);
        (0..n)
            .map(|i| Transition {
                state: (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect(),
                action: rng.random_range(0..2u8),
                reward: rng.random_range(-10.0..10.0),
                next_state: (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect(),
                done: rng.random_bool(0.2),
                patient: i,
            })
            .collect()
    }

    fn zero_expert(dim: usize) -> Mlp {
        let mut m = Mlp::new(&mut rng_from_seed(0), &[dim, 16, 16, 2], Activation::Relu, Activation::Identity);
        m.layers.iter_mut().for_each(|l| {
            l.weight.values_mut().fill(0.0);
            l.bias.values_mut().fill(0.0);
        });
        m
    }

    #[test]
    fn qvt_arithmetic() {
        // Terminal: r = 10, Q = 10, Q″ = 1 → L_1(1) = 0.5.
        let mut learner = bundle(0, 2);
        for l in &mut learner.q.layers {
            l.weight.values_mut().fill(0.0);
            l.bias.values_mut().fill(0.0);
        }
        learner.q.layers[2].bias.values_mut().fill(10.0);
        let mut expert = zero_expert(2);
        expert.layers[2].bias.values_mut().fill(1.0);
        let t = Transition { state: vec![0.1, 0.2], action: 1, reward: 10.0, next_state: vec![0.0, 0.0], done: true, patient: 0 };
        assert_eq!(bcq_loss(&learner, &[&t]).unwrap(), 0.0);
        assert_eq!(qvt_loss(&learner, &expert, &[&t], 1.0).unwrap(), 0.5);
    }

    #[test]
    fn qvt_rejects_width_mismatch() {
        let t = batch(1, 3, 0);
        assert!(matches!(qvt_loss(&bundle(0, 3), &zero_expert(4), &[&t[0]], 1.0), Err(Error::Config(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn zero_expert_reduces_to_bcq(seed in 0u64..10_000, tau in 0.0f64..0.9) {
            let mut learner = bundle(seed, 3);
            learner.config.tau = tau;
            learner.target = Mlp::new(&mut rng_from_seed(seed ^ 1), &[3, 16, 16, 2], Activation::Relu, Activation::Identity);
            let ts = batch(32, 3, seed);
            let refs: Vec<&Transition> = ts.iter().collect();
            let a = qvt_loss(&learner, &zero_expert(3), &refs, 1.0).unwrap();
            let b = bcq_loss(&learner, &refs).unwrap();
            prop_assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn wt_is_an_exact_copy() {
        let expert = bundle(3, 5);
        let learner = weight_transfer(&expert, TransferMode::Wt, &[], 0).unwrap();
        let mut rng = rng_from_seed(1);
        let rows: Vec<Vec<f64>> = (0..100).map(|_| (0..5).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
        let x = Tensor::from_rows(&rows).unwrap();
        assert_eq!(learner.q_values(&x).unwrap(), expert.q_values(&x).unwrap());
        assert_eq!(learner.act(&x).unwrap(), expert.act(&x).unwrap());
        let strip = |mut ck: Checkpoint| {
            ck.metadata.clear();
            ck
        };
        assert_eq!(strip(learner.checkpoint().unwrap()), strip(expert.checkpoint().unwrap()));
    }

    #[test]
    fn wtr_redraws_final_layers() {
        let expert = bundle(3, 5);
        let learner = weight_transfer(&expert, TransferMode::Wtr, &["q.2".into(), "g.2".into()], 9).unwrap();
        let mut rng = rng_from_seed(2);
        let rows: Vec<Vec<f64>> = (0..100).map(|_| (0..5).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
        let x = Tensor::from_rows(&rows).unwrap();
        let (a, b) = (learner.q_values(&x).unwrap(), expert.q_values(&x).unwrap());
        let diff = a.values().iter().zip(b.values()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        assert!(diff > 1e-6);
        assert_eq!(learner.q.layers[..2], expert.q.layers[..2]);
        assert_eq!(learner.q, learner.target);
        assert_ne!(learner.g.layers[2], expert.g.layers[2]);
    }

    #[test]
    fn topology_mismatch_names_the_layer() {
        let expert = bundle(0, 5);
        let err = init_learner(&expert, &BcqConfig { hidden: 32, ..Default::default() }, 5, TransferMode::Wt, &[], 0).unwrap_err();
        assert!(err.to_string().contains("q.0"), "{err}");
        assert!(weight_transfer(&expert, TransferMode::Wtr, &["x.1".into()], 0).is_err());
        assert!(weight_transfer(&expert, TransferMode::Wtr, &["q.7".into()], 0).is_err());
        assert!(TransferConfig { mode: TransferMode::Wtr, reinit_layers: vec![], ..Default::default() }.validate().is_err());
    }

    #[test]
    fn expert_unchanged_by_learner_training() {
        use crate::bcq::{train_q, EvalPoint, QTrainer};
        let expert = bundle(1, 3);
        let before = expert.clone();
        let buffer = ReplayBuffer::new(batch(200, 3, 4)).unwrap();
        let cfg = BcqConfig { hidden: 16, total_iterations: 10_000, eval_stride: 5000, target_sync: 1000, ..Default::default() };
        for mode in TransferMode::ALL {
            let learner = init_learner(&expert, &cfg, 3, mode, &["q.2".into()], 0).unwrap();
            let trainer = if mode == TransferMode::Qvt {
                QTrainer::with_expert(learner, &buffer, &expert.q, 1.0).unwrap()
            } else {
                QTrainer::new(learner, &buffer).unwrap()
            };
            train_q(trainer, |_| Ok(EvalPoint::default()), None).unwrap();
        }
        assert_eq!(expert, before);
    }

    fn curve(wis: &[f64]) -> Vec<CurvePoint> {
        wis.iter()
            .enumerate()
            .map(|(i, &w)| CurvePoint { iteration: i * 1000, wis: Some(w), accuracy: None, loss: 0.0 })
            .collect()
    }

    #[test]
    fn metrics_examples() {
        let s = curve(&[1.0, 2.0, 3.0, 4.0]);
        let m = transfer_metrics(&s, &s).unwrap();
        assert_eq!((m.jumpstart, m.asymptotic), (0.0, 0.0));
        let t = curve(&[3.0, 4.0, 5.0, 6.0]);
        let m = transfer_metrics(&s, &t).unwrap();
        assert_eq!((m.jumpstart, m.asymptotic), (2.0, 2.0));
        assert_eq!(m.jumpstart_pct, Some(200.0));
        assert!(transfer_metrics(&s, &curve(&[1.0])).is_err());
    }

    #[test]
    fn tail_window() {
        assert_eq!(tail_mean(&[1.0, 2.0, 3.0]), 3.0);
        let v: Vec<f64> = (0..51).map(f64::from).collect();
        // ceil(51/10) = 6 points: 45..=50
        assert_eq!(tail_mean(&v), 47.5);
    }

    #[test]
    fn summary_format() {
        let m = |j, a| TransferMetrics { jumpstart: 0.0, asymptotic: 0.0, jumpstart_pct: j, asymptotic_pct: a };
        let s = summarize(&[m(Some(18.94), Some(3.0)), m(Some(-2.0), Some(21.63)), m(None, None)]);
        assert_eq!(s, "jump-start WIS return improves up to 18.94% and asymptotic WIS return improves up to 21.63%");
    }

    #[test]
    fn paired_target() {
        let src = SimConfig { patients: 2000, seed: 4, ..Default::default() };
        let tgt = paired_target_sim(&src, 0.1);
        assert_eq!(tgt.patients, 200);
        assert_ne!(tgt.seed, src.seed);
        assert_eq!(tgt.alpha, src.alpha);
    }
}
