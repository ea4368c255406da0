//! Supervised action classifiers trained by cross-entropy on minibatches.
//! Used for the generative action filter G_ω, the behavior policy μ and the
//! classification baselines.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{rng_from_seed, softmax, Mlp, Optimizer, OptimizerKind, Parameterized, Tape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    /// Coefficient on the summed squared weights (biases excluded).
    pub l2: f64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self { iterations: 3000, batch_size: 64, learning_rate: 1e-3, optimizer: OptimizerKind::Adam, l2: 0.0 }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("classifier batch_size must be > 0"));
        }
        if !(self.l2 >= 0.0) || !self.l2.is_finite() {
            return Err(Error::config(format!("classifier l2 must be finite and >= 0, got {}", self.l2)));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config(format!("classifier learning_rate must be > 0, got {}", self.learning_rate)));
        }
        Ok(())
    }
}

/// Train `net` in place to predict `labels` from `states` (one row per
/// sample). Returns the minibatch loss per iteration.
pub fn train_classifier(
    net: &mut Mlp,
    states: &Tensor,
    labels: &[usize],
    config: &ClassifierConfig,
    seed: u64,
) -> Result<Vec<f64>> {
    config.validate()?;
    let n = states.rows();
    if n == 0 || labels.len() != n {
        return Err(Error::input(format!("classifier needs one label per state ({} states, {} labels)", n, labels.len())));
    }
    if states.cols() != net.input_dim() {
        return Err(Error::config(format!(
            "classifier input width {} does not match state width {}",
            net.input_dim(),
            states.cols()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= net.output_dim()) {
        return Err(Error::input(format!("label {bad} out of range for {} classes", net.output_dim())));
    }
    let mut rng = rng_from_seed(seed);
    let mut opt = Optimizer::new(config.optimizer, config.learning_rate)?;
    let width = states.cols();
    let mut losses = Vec::with_capacity(config.iterations);
    for it in 0..config.iterations {
        let idx: Vec<usize> = (0..config.batch_size).map(|_| rng.random_range(0..n)).collect();
        let mut rows = Vec::with_capacity(idx.len() * width);
        for &i in &idx {
            rows.extend_from_slice(states.row_slice(i));
        }
        let batch_labels: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let mut tape = Tape::new();
        let binding = tape.bind(&*net);
        let x = tape.leaf(Tensor::matrix(idx.len(), width, rows)?);
        let logits = net.forward_tape(&mut tape, binding.vars(), x)?;
        let mut loss = tape.cross_entropy(logits, &batch_labels)?;
        if config.l2 > 0.0 {
            for layer in 0..net.layers.len() {
                let sq = tape.sum_squares(binding.vars()[2 * layer])?;
                let pen = tape.scale(sq, config.l2)?;
                loss = tape.add(loss, pen)?;
            }
        }
        let value = tape.value(loss).values()[0];
        if !value.is_finite() {
            return Err(Error::Numerical(format!("classifier loss became {value} at iteration {it}")));
        }
        let grads = tape.backward(loss)?.collect(&binding);
        opt.step(net.parameters_mut(), &grads)?;
        losses.push(value);
    }
    Ok(losses)
}

/// Softmax probabilities per row.
pub fn predict_proba(net: &Mlp, states: &Tensor) -> Result<Vec<Vec<f64>>> {
    let logits = net.forward(states)?;
    Ok((0..logits.rows()).map(|r| softmax(logits.row_slice(r))).collect())
}

/// Argmax class per row; ties go to the lower index.
pub fn predict(net: &Mlp, states: &Tensor) -> Result<Vec<usize>> {
    let logits = net.forward(states)?;
    Ok((0..logits.rows())
        .map(|r| {
            let row = logits.row_slice(r);
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect())
}

pub fn accuracy(predicted: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    predicted.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64
}
