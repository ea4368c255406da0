//! Q-network training loop with periodic evaluation.
//!
//! The buffer and G_ω are frozen during Q-training, so the eligible sets of
//! every next state are computed once up front. The target network only
//! changes at sync points, so `max_{a′∈eligible} Q_θ′(s′,a′)` is cached for
//! the whole buffer at each sync and read back per minibatch.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{constrained_loss, constrained_max, PolicyBundle};
use crate::cohort::{ReplayBuffer, Transition};
use crate::error::{Error, Result};
use crate::nn::{derive_seed, rng_from_seed, Mlp, Optimizer, Parameterized, SeededRng, Tape, Tensor};

/// One learning-curve row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub iteration: usize,
    pub wis: Option<f64>,
    pub accuracy: Option<f64>,
    /// Constrained loss on a fixed probe batch of the training buffer.
    pub loss: f64,
}

/// What an evaluator reports for a snapshot of the bundle.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub wis: Option<f64>,
    pub accuracy: Option<f64>,
}

const PROBE_SIZE: usize = 256;
const FORWARD_CHUNK: usize = 4096;

pub struct QTrainer<'a> {
    bundle: PolicyBundle,
    buffer: &'a ReplayBuffer,
    optimizer: Optimizer,
    rng: SeededRng,
    iteration: usize,
    next_eligible: Vec<Vec<usize>>,
    target_max: Vec<f64>,
    offsets: Option<Vec<f64>>,
    probe: Vec<usize>,
}

impl<'a> QTrainer<'a> {
    pub fn new(bundle: PolicyBundle, buffer: &'a ReplayBuffer) -> Result<Self> {
        Self::build(bundle, buffer, None)
    }

    /// Trainer whose residuals carry `weight·Q_expert(s,a)` (Q-value transfer).
    pub fn with_expert(bundle: PolicyBundle, buffer: &'a ReplayBuffer, expert: &Mlp, weight: f64) -> Result<Self> {
        if expert.input_dim() != buffer.state_dim() || expert.output_dim() != bundle.q.output_dim() {
            return Err(Error::config(format!(
                "expert network maps {}→{} but the learner expects {}→{}",
                expert.input_dim(),
                expert.output_dim(),
                buffer.state_dim(),
                bundle.q.output_dim()
            )));
        }
        let q = forward_all(expert, buffer, false)?;
        let offsets = buffer.transitions().iter().enumerate().map(|(i, t)| weight * q[i][t.action as usize]).collect();
        Self::build(bundle, buffer, Some(offsets))
    }

    fn build(bundle: PolicyBundle, buffer: &'a ReplayBuffer, offsets: Option<Vec<f64>>) -> Result<Self> {
        bundle.config.validate()?;
        if buffer.is_empty() {
            return Err(Error::input("cannot train on an empty buffer"));
        }
        if buffer.state_dim() != bundle.state_dim() {
            return Err(Error::config(format!(
                "buffer state width {} does not match policy width {}",
                buffer.state_dim(),
                bundle.state_dim()
            )));
        }
        let g_logits = forward_all(&bundle.g, buffer, true)?;
        let next_eligible = g_logits
            .iter()
            .map(|row| super::eligible_actions(&crate::nn::softmax(row), bundle.config.tau))
            .collect();
        let optimizer = Optimizer::new(bundle.config.optimizer, bundle.config.learning_rate)?;
        let rng = rng_from_seed(derive_seed(bundle.config.seed, 2));
        let n = buffer.len();
        let probe_len = n.min(PROBE_SIZE);
        let probe = (0..probe_len).map(|k| k * n / probe_len).collect();
        let mut trainer = Self {
            bundle,
            buffer,
            optimizer,
            rng,
            iteration: 0,
            next_eligible,
            target_max: Vec::new(),
            offsets,
            probe,
        };
        trainer.refresh_target_cache()?;
        Ok(trainer)
    }

    fn refresh_target_cache(&mut self) -> Result<()> {
        let q_next = forward_all(&self.bundle.target, self.buffer, true)?;
        self.target_max = q_next.iter().zip(&self.next_eligible).map(|(q, e)| constrained_max(q, e)).collect();
        Ok(())
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn bundle(&self) -> &PolicyBundle {
        &self.bundle
    }

    pub fn into_bundle(self) -> PolicyBundle {
        self.bundle
    }

    /// Loss of the current parameters on the fixed probe batch.
    pub fn probe_loss(&self) -> Result<f64> {
        let batch: Vec<&Transition> = self.probe.iter().map(|&i| self.buffer.get(i)).collect();
        let offsets: Option<Vec<f64>> = self.offsets.as_ref().map(|o| self.probe.iter().map(|&i| o[i]).collect());
        constrained_loss(&self.bundle, &batch, offsets.as_deref())
    }

    /// One minibatch update; returns its loss. Syncs the target afterwards
    /// when the iteration count reaches a multiple of the sync frequency.
    pub fn step(&mut self) -> Result<f64> {
        let cfg = &self.bundle.config;
        let idx = self.buffer.sample(&mut self.rng, cfg.batch_size);
        let width = self.buffer.state_dim();
        let mut states = Vec::with_capacity(idx.len() * width);
        let mut actions = Vec::with_capacity(idx.len());
        let mut y = Vec::with_capacity(idx.len());
        for &i in &idx {
            let t = self.buffer.get(i);
            states.extend_from_slice(&t.state);
            actions.push(t.action as usize);
            y.push(if t.done { t.reward } else { t.reward + cfg.gamma * self.target_max[i] });
        }
        let mut tape = Tape::new();
        let binding = tape.bind(&self.bundle.q);
        let x = tape.leaf(Tensor::matrix(idx.len(), width, states)?);
        let q = self.bundle.q.forward_tape(&mut tape, binding.vars(), x)?;
        let q_sa = tape.gather(q, &actions)?;
        let y = tape.leaf(Tensor::matrix(idx.len(), 1, y)?);
        let mut residual = tape.sub(y, q_sa)?;
        if let Some(o) = &self.offsets {
            let off = tape.leaf(Tensor::matrix(idx.len(), 1, idx.iter().map(|&i| o[i]).collect())?);
            residual = tape.add(residual, off)?;
        }
        let loss = tape.huber(residual, cfg.kappa)?;
        let value = tape.value(loss).values()[0];
        if !value.is_finite() {
            return Err(Error::Numerical(format!("Q loss became {value} at iteration {}", self.iteration + 1)));
        }
        let grads = tape.backward(loss)?.collect(&binding);
        self.optimizer.step(self.bundle.q.parameters_mut(), &grads)?;
        if !self.bundle.q.parameters().iter().all(|p| p.is_finite()) {
            return Err(Error::Numerical(format!("non-finite Q parameters at iteration {}", self.iteration + 1)));
        }
        self.iteration += 1;
        if self.iteration % self.bundle.config.target_sync == 0 {
            self.bundle.sync_target();
            self.refresh_target_cache()?;
        }
        Ok(value)
    }
}

// Forward `net` over every (next_)state of the buffer in chunks.
fn forward_all(net: &Mlp, buffer: &ReplayBuffer, next: bool) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(buffer.len());
    for chunk in buffer.transitions().chunks(FORWARD_CHUNK) {
        let rows: Vec<&[f64]> = chunk.iter().map(|t| if next { &t.next_state[..] } else { &t.state[..] }).collect();
        let y = net.forward(&Tensor::from_rows(&rows)?)?;
        out.extend((0..y.rows()).map(|r| y.row_slice(r).to_vec()));
    }
    Ok(out)
}

/// Run `trainer` to the configured iteration count, evaluating at iteration
/// 0 and every `eval_stride` iterations. On a numerical abort the bundle from
/// the most recent evaluation point is written to `abort_checkpoint` (when
/// given) before the error is returned.
pub fn train_q<F>(
    mut trainer: QTrainer<'_>,
    mut evaluator: F,
    abort_checkpoint: Option<&Path>,
) -> Result<(PolicyBundle, Vec<CurvePoint>)>
where
    F: FnMut(&PolicyBundle) -> Result<EvalPoint>,
{
    let total = trainer.bundle.config.total_iterations;
    let stride = trainer.bundle.config.eval_stride;
    let mut curve = Vec::with_capacity(total / stride + 1);
    let mut last_good = trainer.bundle.clone();
    let mut record = |trainer: &QTrainer<'_>, curve: &mut Vec<CurvePoint>| -> Result<()> {
        let e = evaluator(&trainer.bundle)?;
        curve.push(CurvePoint { iteration: trainer.iteration, wis: e.wis, accuracy: e.accuracy, loss: trainer.probe_loss()? });
        Ok(())
    };
    record(&trainer, &mut curve)?;
    while trainer.iteration < total {
        if let Err(e) = trainer.step() {
            if e.is_numerical() {
                if let Some(path) = abort_checkpoint {
                    last_good.save(path)?;
                    log::error!("training aborted; last good checkpoint written to {}", path.display());
                }
            }
            return Err(e);
        }
        if trainer.iteration % stride == 0 {
            record(&trainer, &mut curve)?;
            last_good = trainer.bundle.clone();
        }
    }
    Ok((trainer.into_bundle(), curve))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

/// CSV with header `iteration,wis,accuracy,loss`; missing metrics are empty.
pub fn write_curve_csv(path: &Path, curve: &[CurvePoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::input(format!("{other:?}")),
    })?;
    w.write_record(["iteration", "wis", "accuracy", "loss"])?;
    for p in curve {
        w.write_record([p.iteration.to_string(), fmt_opt(p.wis), fmt_opt(p.accuracy), format!("{}", p.loss)])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_curve_csv(path: &Path) -> Result<Vec<CurvePoint>> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["iteration", "wis", "accuracy", "loss"] {
        return Err(Error::input(format!("unexpected curve header {headers:?}")));
    }
    let parse_opt = |s: &str, line: usize| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(|_| Error::Parse { line, message: format!("bad number {s:?}") })
        }
    };
    let mut out = Vec::new();
    for (k, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = k + 2;
        let iteration = rec[0].parse().map_err(|_| Error::Parse { line, message: "bad iteration".into() })?;
        let loss = rec[3].parse().map_err(|_| Error::Parse { line, message: "bad loss".into() })?;
        out.push(CurvePoint { iteration, wis: parse_opt(&rec[1], line)?, accuracy: parse_opt(&rec[2], line)?, loss });
    }
    Ok(out)
}
