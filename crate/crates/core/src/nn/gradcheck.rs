//! Central finite-difference check of tape gradients.
//!
//! Only forward evaluations are used on the numeric side, so the check stays
//! independent of the reverse sweep it validates.

use super::layers::Parameterized;
use super::tape::{Binding, Tape, Var};
use crate::error::Result;

pub const FD_EPSILON: f64 = 1e-5;

/// Relative error with a floor on the denominator so that pairs of
/// near-zero derivatives compare as equal.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Largest relative error between analytic and central-difference
/// gradients over every scalar parameter of `model`.
///
/// `loss` builds a scalar loss on a fresh tape from the bound parameters.
pub fn max_relative_error<M, F>(model: &M, loss: F) -> Result<f64>
where
    M: Parameterized + Clone,
    F: Fn(&M, &mut Tape, &Binding) -> Result<Var>,
{
    let mut tape = Tape::new();
    let binding = tape.bind(model);
    let out = loss(model, &mut tape, &binding)?;
    let analytic = tape.backward(out)?.collect(&binding);

    let eval = |m: &M| -> Result<f64> {
        let mut t = Tape::new();
        let b = t.bind(m);
        let v = loss(m, &mut t, &b)?;
        Ok(t.value(v).values()[0])
    };

    let mut worst: f64 = 0.0;
    let mut probe = model.clone();
    for (pi, grad) in analytic.iter().enumerate() {
        for k in 0..grad.len() {
            let orig = probe.parameters()[pi].values()[k];
            probe.parameters_mut()[pi].values_mut()[k] = orig + FD_EPSILON;
            let up = eval(&probe)?;
            probe.parameters_mut()[pi].values_mut()[k] = orig - FD_EPSILON;
            let down = eval(&probe)?;
            probe.parameters_mut()[pi].values_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * FD_EPSILON);
            worst = worst.max(relative_error(grad.values()[k], numeric));
        }
    }
    Ok(worst)
}

/// Loose bag of tensors for exercising individual ops.
#[derive(Debug, Clone)]
pub struct ParamPack(pub Vec<super::tensor::Tensor>);

impl Parameterized for ParamPack {
    fn parameters(&self) -> Vec<&super::tensor::Tensor> {
        self.0.iter().collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut super::tensor::Tensor> {
        self.0.iter_mut().collect()
    }

    fn parameter_names(&self) -> Vec<String> {
        (0..self.0.len()).map(|i| i.to_string()).collect()
    }
}

/// Worst relative error per case over `trials` randomized draws.
///
/// Covers every layer kind (dense with each activation, a 2-layer network,
/// GRU) and every loss (Huber, cross-entropy, MSE) plus the remaining tape
/// ops.
pub fn gradient_suite(trials: usize, seed: u64) -> Result<Vec<(&'static str, f64)>> {
    use super::layers::{Activation, DenseLayer, GruCell, Mlp};
    use super::tensor::Tensor;
    use rand::Rng;

    let mut rng = super::rng_from_seed(seed);
    let mut worst: Vec<(&'static str, f64)> = Vec::new();
    let mut record = |name: &'static str, e: f64| match worst.iter_mut().find(|(n, _)| *n == name) {
        Some(slot) => slot.1 = slot.1.max(e),
        None => worst.push((name, e)),
    };

    for _ in 0..trials {
        let batch = rng.random_range(1..5usize);
        let inp = rng.random_range(1..6usize);
        let out = rng.random_range(1..5usize);
        let x = Tensor::matrix(batch, inp, (0..batch * inp).map(|_| rng.random_range(-2.0..2.0)).collect())?;
        let target = Tensor::matrix(batch, out, (0..batch * out).map(|_| rng.random_range(-1.0..1.0)).collect())?;

        for (name, act) in [
            ("dense_relu_mse", Activation::Relu),
            ("dense_tanh_mse", Activation::Tanh),
            ("dense_sigmoid_mse", Activation::Sigmoid),
            ("dense_identity_mse", Activation::Identity),
        ] {
            let mut layer = DenseLayer::new(&mut rng, inp, out, act);
            for b in layer.bias.values_mut() {
                *b = rng.random_range(-0.5..0.5);
            }
            let e = max_relative_error(&layer, |l, t, b| {
                let xv = t.leaf(x.clone());
                let y = l.forward_tape(t, b.vars(), xv)?;
                t.mse(y, &target)
            })?;
            record(name, e);
        }

        let classes = rng.random_range(2..4usize);
        let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..classes)).collect();
        let mlp = Mlp::new(&mut rng, &[inp, 6, classes], Activation::Relu, Activation::Identity);
        let e = max_relative_error(&mlp, |m, t, b| {
            let xv = t.leaf(x.clone());
            let y = m.forward_tape(t, b.vars(), xv)?;
            t.cross_entropy(y, &labels)
        })?;
        record("mlp2_cross_entropy", e);

        let kappa = rng.random_range(0.5..1.5);
        let mlp = Mlp::new(&mut rng, &[inp, 5, out], Activation::Tanh, Activation::Identity);
        let e = max_relative_error(&mlp, |m, t, b| {
            let xv = t.leaf(x.clone());
            let y = m.forward_tape(t, b.vars(), xv)?;
            let tv = t.leaf(target.clone());
            let scaled = t.scale(tv, 3.0)?;
            let d = t.sub(y, scaled)?;
            t.huber(d, kappa)
        })?;
        record("mlp2_huber", e);

        let hidden = rng.random_range(1..5usize);
        let cell = GruCell::new(&mut rng, inp, hidden);
        let h0 = Tensor::matrix(batch, hidden, (0..batch * hidden).map(|_| rng.random_range(-1.0..1.0)).collect())?;
        let gt = Tensor::matrix(batch, hidden, (0..batch * hidden).map(|_| rng.random_range(-1.0..1.0)).collect())?;
        let e = max_relative_error(&cell, |c, t, b| {
            let xv = t.leaf(x.clone());
            let hv = t.leaf(h0.clone());
            let h1 = c.step_tape(t, b.vars(), xv, hv)?;
            let h2 = c.step_tape(t, b.vars(), xv, h1)?;
            t.mse(h2, &gt)
        })?;
        record("gru_two_steps_mse", e);

        // contract, concat, gather, one_minus, mul, sum_squares, mean
        let channels = rng.random_range(1..4usize);
        let pack = ParamPack(vec![
            Tensor::matrix(batch, out * channels, (0..batch * out * channels).map(|_| rng.random_range(-1.0..1.0)).collect())?,
            Tensor::matrix(batch, channels, (0..batch * channels).map(|_| rng.random_range(-1.0..1.0)).collect())?,
            Tensor::matrix(batch, out, (0..batch * out).map(|_| rng.random_range(-1.0..1.0)).collect())?,
        ]);
        let index: Vec<usize> = (0..batch).map(|_| rng.random_range(0..out + out)).collect();
        let e = max_relative_error(&pack, |_, t, b| {
            let v = b.vars();
            let c = t.contract(v[0], v[1], out)?;
            let om = t.one_minus(v[2])?;
            let prod = t.mul(c, om)?;
            let cat = t.concat(prod, v[2])?;
            let g = t.gather(cat, &index)?;
            let ss = t.sum_squares(g)?;
            let m = t.mean(cat)?;
            t.add(ss, m)
        })?;
        record("ops_contract_concat_gather", e);
    }
    Ok(worst)
}
