//! Next-observation pretraining: a linear decoder reads Ŝ_t and predicts
//! F_{t+1}; encoder and decoder train jointly on mean-squared error with
//! Adam, and the decoder is then dropped.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Encoder;
use crate::cohort::Trajectory;
use crate::error::{Error, Result};
use crate::nn::{derive_seed, rng_from_seed, Activation, DenseLayer, Optimizer, Parameterized, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: usize,
    /// Trajectories per optimizer step.
    pub batch_trajectories: usize,
    pub learning_rate: f64,
    /// Trajectories held fixed for the before/after loss.
    pub eval_trajectories: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self { steps: 2000, batch_trajectories: 8, learning_rate: 1e-3, eval_trajectories: 64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Evaluation-set loss before the first update.
    pub initial_loss: f64,
    /// Evaluation-set loss after the last update.
    pub final_loss: f64,
    /// Mini-batch loss per step.
    pub losses: Vec<f64>,
}

// Mean next-step MSE over one trajectory, recorded on `tape`.
fn trajectory_loss(
    encoder: &Encoder,
    decoder: &DenseLayer,
    tape: &mut Tape,
    vars: &[Var],
    traj: &Trajectory,
) -> Result<Option<Var>> {
    let n = traj.len();
    if n < 2 {
        return Ok(None);
    }
    let enc_count = encoder.parameters().len();
    let states = encoder.forward_tape(tape, &vars[..enc_count], &traj.features[..n - 1], &traj.actions[..n - 2])?;
    let mut total: Option<Var> = None;
    for (t, s) in states.iter().enumerate() {
        let pred = decoder.forward_tape(tape, &vars[enc_count..], *s)?;
        let l = tape.mse(pred, &Tensor::row(traj.features[t + 1].clone()))?;
        total = Some(match total {
            Some(acc) => tape.add(acc, l)?,
            None => l,
        });
    }
    let total = total.expect("at least one step");
    Ok(Some(tape.scale(total, 1.0 / (n - 1) as f64)?))
}

struct Joint<'a> {
    encoder: &'a mut Encoder,
    decoder: &'a mut DenseLayer,
}

impl Joint<'_> {
    fn parameters(&self) -> Vec<&Tensor> {
        let mut p = self.encoder.parameters();
        p.extend(self.decoder.parameters());
        p
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = self.encoder.parameters_mut();
        p.extend(self.decoder.parameters_mut());
        p
    }
}

fn mean_loss(encoder: &Encoder, decoder: &DenseLayer, trajs: &[&Trajectory]) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0;
    for traj in trajs {
        let mut tape = Tape::new();
        let mut vars: Vec<Var> = tape.bind(encoder).vars().to_vec();
        vars.extend(tape.bind(decoder).vars());
        if let Some(l) = trajectory_loss(encoder, decoder, &mut tape, &vars, traj)? {
            sum += tape.value(l).values()[0];
            count += 1;
        }
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Train `encoder` in place on `trajectories`; the decoder is discarded.
pub fn pretrain_encoder(
    encoder: &mut Encoder,
    trajectories: &[&Trajectory],
    config: &PretrainConfig,
    seed: u64,
) -> Result<PretrainReport> {
    let usable: Vec<&Trajectory> = trajectories.iter().copied().filter(|t| t.len() >= 2).collect();
    if usable.is_empty() {
        return Err(Error::input("encoder pretraining needs at least one trajectory with two bins"));
    }
    if config.batch_trajectories == 0 {
        return Err(Error::config("pretrain.batch_trajectories must be > 0"));
    }
    let mut rng = rng_from_seed(derive_seed(seed, 0x5052_4554));
    let mut decoder = DenseLayer::new(&mut rng, encoder.hidden(), encoder.feature_width, Activation::Identity);
    let mut opt = Optimizer::adam(config.learning_rate)?;
    let eval: Vec<&Trajectory> = usable.iter().copied().take(config.eval_trajectories.max(1)).collect();
    let initial_loss = mean_loss(encoder, &decoder, &eval)?;

    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let mut grads: Option<Vec<Tensor>> = None;
        let mut batch_loss = 0.0;
        for _ in 0..config.batch_trajectories {
            let traj = usable[rng.random_range(0..usable.len())];
            let mut tape = Tape::new();
            let mut vars: Vec<Var> = tape.bind(&*encoder).vars().to_vec();
            vars.extend(tape.bind(&decoder).vars());
            let loss = trajectory_loss(encoder, &decoder, &mut tape, &vars, traj)?.expect("usable trajectory");
            batch_loss += tape.value(loss).values()[0];
            let g = tape.backward(loss)?;
            let these: Vec<Tensor> = vars.iter().map(|v| g.wrt(*v)).collect();
            grads = Some(match grads {
                None => these,
                Some(mut acc) => {
                    for (a, t) in acc.iter_mut().zip(&these) {
                        a.values_mut().iter_mut().zip(t.values()).for_each(|(x, y)| *x += y);
                    }
                    acc
                }
            });
        }
        let scale = 1.0 / config.batch_trajectories as f64;
        let mut grads = grads.expect("non-empty batch");
        grads.iter_mut().for_each(|g| g.values_mut().iter_mut().for_each(|v| *v *= scale));
        batch_loss *= scale;
        if !batch_loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numerical(format!(
                "encoder pretraining diverged at step {step} (loss {batch_loss})"
            )));
        }
        losses.push(batch_loss);
        let mut joint = Joint { encoder: &mut *encoder, decoder: &mut decoder };
        debug_assert_eq!(joint.parameters().len(), grads.len());
        opt.step(joint.parameters_mut(), &grads)?;
    }
    let final_loss = mean_loss(encoder, &decoder, &eval)?;
    if !final_loss.is_finite() {
        return Err(Error::Numerical("encoder pretraining ended with a non-finite loss".into()));
    }
    log::info!("encoder pretraining: loss {initial_loss:.4} -> {final_loss:.4} over {} steps", config.steps);
    Ok(PretrainReport { initial_loss, final_loss, losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoders::{EncoderConfig, EncoderKind};
    use crate::nn::parameter_hash;

    // Two-feature linear dynamics: F_{t+1} = A·F_t + small noise.
    fn linear_cohort(n: usize, seed: u64) -> Vec<Trajectory> {
        let mut rng = rng_from_seed(seed);
        (0..n)
            .map(|i| {
                let bins = 8;
                let mut f = vec![vec![rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)]];
                for _ in 1..bins {
                    let p = f.last().unwrap().clone();
                    f.push(vec![
                        0.9 * p[0] - 0.3 * p[1] + rng.random_range(-0.05..0.05),
                        0.3 * p[0] + 0.8 * p[1] + rng.random_range(-0.05..0.05),
                    ]);
                }
                Trajectory {
                    patient_id: format!("p{i}"),
                    statics: vec![],
                    features: f,
                    actions: vec![0; bins - 1],
                    acuity: vec![0.0; bins],
                    survived28: true,
                }
            })
            .collect()
    }

    #[test]
    fn beats_the_mean_predictor() {
        let cohort = linear_cohort(40, 1);
        let refs: Vec<&Trajectory> = cohort.iter().collect();
        let cfg = EncoderConfig { kind: EncoderKind::Rnn, hidden: 16, head: vec![16, 16], step_count: 2, seed: 3 };
        let mut enc = Encoder::new(cfg, 2).unwrap();
        let pc = PretrainConfig { steps: 400, batch_trajectories: 4, learning_rate: 1e-2, eval_trajectories: 40 };
        let report = pretrain_encoder(&mut enc, &refs, &pc, 9).unwrap();
        assert!(report.final_loss < report.initial_loss);

        // Mean predictor baseline: per-feature variance of F_{t+1}.
        let targets: Vec<&Vec<f64>> = cohort.iter().flat_map(|t| t.features[1..].iter()).collect();
        let n = targets.len() as f64;
        let mut var = 0.0;
        for k in 0..2 {
            let m = targets.iter().map(|r| r[k]).sum::<f64>() / n;
            var += targets.iter().map(|r| (r[k] - m).powi(2)).sum::<f64>() / n;
        }
        var /= 2.0;
        assert!(report.final_loss < var, "mse {} vs mean-predictor {}", report.final_loss, var);
    }

    #[test]
    fn deterministic_given_seed() {
        let cohort = linear_cohort(10, 2);
        let refs: Vec<&Trajectory> = cohort.iter().collect();
        let cfg = EncoderConfig { kind: EncoderKind::OdeRnn, hidden: 4, head: vec![4, 4], step_count: 1, seed: 5 };
        let pc = PretrainConfig { steps: 5, batch_trajectories: 2, learning_rate: 1e-3, eval_trajectories: 4 };
        let mut a = Encoder::new(cfg.clone(), 2).unwrap();
        let mut b = Encoder::new(cfg, 2).unwrap();
        pretrain_encoder(&mut a, &refs, &pc, 1).unwrap();
        pretrain_encoder(&mut b, &refs, &pc, 1).unwrap();
        assert_eq!(parameter_hash(&a), parameter_hash(&b));
    }

    #[test]
    fn divergence_aborts() {
        let mut cohort = linear_cohort(3, 3);
        cohort[0].features[2][0] = 1e300;
        let refs: Vec<&Trajectory> = cohort.iter().take(1).collect();
        let cfg = EncoderConfig { kind: EncoderKind::Rnn, hidden: 4, head: vec![4, 4], step_count: 1, seed: 5 };
        let mut enc = Encoder::new(cfg, 2).unwrap();
        let pc = PretrainConfig { steps: 3, batch_trajectories: 1, learning_rate: 1e-3, eval_trajectories: 1 };
        let err = pretrain_encoder(&mut enc, &refs, &pc, 1).unwrap_err();
        assert!(err.is_numerical(), "{err}");
    }
}
