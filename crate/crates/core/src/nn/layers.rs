use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
    Identity,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Sigmoid => sigmoid(x),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation's output `y`.
    pub fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Identity => 1.0,
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Anything with an ordered list of trainable tensors.
///
/// `parameters`, `parameters_mut` and `parameter_names` must agree on order.
pub trait Parameterized {
    fn parameters(&self) -> Vec<&Tensor>;
    fn parameters_mut(&mut self) -> Vec<&mut Tensor>;
    fn parameter_names(&self) -> Vec<String>;

    fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|t| t.len()).sum()
    }
}

/// `uniform(−1/√fan_in, 1/√fan_in)` weights.
pub fn init_uniform<R: Rng + ?Sized>(rng: &mut R, rows: usize, fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    let values = (0..rows * fan_in).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::matrix(rows, fan_in, values).expect("shape matches")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, input: usize, output: usize, activation: Activation) -> Self {
        Self { weight: init_uniform(rng, output, input), bias: Tensor::vector(vec![0.0; output]), activation }
    }

    pub fn from_parts(weight: Tensor, bias: Tensor, activation: Activation) -> Result<Self> {
        if weight.shape().len() != 2 || bias.len() != weight.rows() {
            return Err(Error::config(format!(
                "dense layer weight {:?} and bias {:?} are inconsistent",
                weight.shape(),
                bias.shape()
            )));
        }
        Ok(Self { weight, bias, activation })
    }

    pub fn zeros(input: usize, output: usize, activation: Activation) -> Self {
        Self { weight: Tensor::zeros(&[output, input]), bias: Tensor::vector(vec![0.0; output]), activation }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    /// `vars` are this layer's bound weight and bias.
    pub fn forward_tape(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let pre = tape.linear(x, vars[0], Some(vars[1]))?;
        tape.activate(pre, self.activation)
    }

    /// Re-draw weights from the init distribution and zero the bias.
    pub fn reinitialize<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        self.weight = init_uniform(rng, self.output_dim(), self.input_dim());
        self.bias = Tensor::vector(vec![0.0; self.output_dim()]);
    }
}

impl Parameterized for DenseLayer {
    fn parameters(&self) -> Vec<&Tensor> {
        vec![&self.weight, &self.bias]
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }

    fn parameter_names(&self) -> Vec<String> {
        vec!["weight".into(), "bias".into()]
    }
}

/// `activation(W·input + b)` for a single input row or a batch of rows.
pub fn dense_forward(layer: &DenseLayer, input: &Tensor) -> Result<Tensor> {
    if input.cols() != layer.input_dim() {
        return Err(Error::config(format!(
            "dense input width {} does not match layer in-dimension {}",
            input.cols(),
            layer.input_dim()
        )));
    }
    let mut tape = Tape::new();
    let vars = tape.bind(layer);
    let x = tape.leaf(input.clone());
    let y = layer.forward_tape(&mut tape, vars.vars(), x)?;
    let out = tape.value(y).clone();
    let mut shape = input.shape().to_vec();
    *shape.last_mut().expect("non-empty shape") = layer.output_dim();
    out.reshape(shape)
}

/// Stack of dense layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
}

impl Mlp {
    /// `sizes = [in, h1, ..., out]`; hidden layers use `hidden`, the last
    /// layer uses `output`.
    pub fn new<R: Rng + ?Sized>(rng: &mut R, sizes: &[usize], hidden: Activation, output: Activation) -> Self {
        assert!(sizes.len() >= 2, "an mlp needs at least input and output sizes");
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|i| DenseLayer::new(rng, sizes[i], sizes[i + 1], if i + 1 == n { output } else { hidden }))
            .collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().expect("non-empty").output_dim()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.input_dim()];
        s.extend(self.layers.iter().map(|l| l.output_dim()));
        s
    }

    pub fn forward_tape(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward_tape(tape, &vars[2 * i..2 * i + 2], h)?;
        }
        Ok(h)
    }

    /// Batch forward pass without recording gradients.
    pub fn forward(&self, input: &Tensor) -> Result<Tensor> {
        if input.cols() != self.input_dim() {
            return Err(Error::config(format!(
                "mlp input width {} does not match in-dimension {}",
                input.cols(),
                self.input_dim()
            )));
        }
        let mut cur = input.clone();
        for layer in &self.layers {
            cur = dense_rows(layer, &cur);
        }
        Ok(cur)
    }

    /// Single-row forward pass.
    pub fn forward_row(&self, row: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(&Tensor::row(row.to_vec()))?.into_values())
    }
}

// Untaped dense pass over every row of `x`; arithmetic mirrors Tape::linear
// so taped and untaped outputs agree bitwise.
fn dense_rows(layer: &DenseLayer, x: &Tensor) -> Tensor {
    let (rows, inp, out) = (x.rows(), x.cols(), layer.output_dim());
    let ws = layer.weight.values();
    let bs = layer.bias.values();
    let xs = x.values();
    let mut y = vec![0.0; rows * out];
    for r in 0..rows {
        let xr = &xs[r * inp..(r + 1) * inp];
        for o in 0..out {
            let wr = &ws[o * inp..(o + 1) * inp];
            let mut acc = 0.0;
            for (a, b) in xr.iter().zip(wr) {
                acc += a * b;
            }
            y[r * out + o] = layer.activation.apply(acc + bs[o]);
        }
    }
    Tensor::matrix(rows, out, y).expect("shape matches")
}

impl Parameterized for Mlp {
    fn parameters(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|l| l.parameters()).collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.parameters_mut()).collect()
    }

    fn parameter_names(&self) -> Vec<String> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.parameter_names().into_iter().map(move |n| format!("{i}.{n}")))
            .collect()
    }
}

/// Gated recurrent unit.
///
/// Each gate matrix is `hidden×(hidden+input)` and acts on `[h ++ x]`:
///
/// ```text
/// z  = σ(W_z[h, x] + b_z)
/// r  = σ(W_r[h, x] + b_r)
/// h̃  = tanh(W_h[r⊙h, x] + b_h)
/// h' = (1 − z)⊙h + z⊙h̃
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GruCell {
    pub w_update: Tensor,
    pub b_update: Tensor,
    pub w_reset: Tensor,
    pub b_reset: Tensor,
    pub w_candidate: Tensor,
    pub b_candidate: Tensor,
    pub hidden: usize,
    pub input: usize,
}

impl GruCell {
    pub fn new<R: Rng + ?Sized>(rng: &mut R, input: usize, hidden: usize) -> Self {
        let fan_in = hidden + input;
        Self {
            w_update: init_uniform(rng, hidden, fan_in),
            b_update: Tensor::vector(vec![0.0; hidden]),
            w_reset: init_uniform(rng, hidden, fan_in),
            b_reset: Tensor::vector(vec![0.0; hidden]),
            w_candidate: init_uniform(rng, hidden, fan_in),
            b_candidate: Tensor::vector(vec![0.0; hidden]),
            hidden,
            input,
        }
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        let w = Tensor::zeros(&[hidden, hidden + input]);
        let b = Tensor::vector(vec![0.0; hidden]);
        Self {
            w_update: w.clone(),
            b_update: b.clone(),
            w_reset: w.clone(),
            b_reset: b.clone(),
            w_candidate: w,
            b_candidate: b,
            hidden,
            input,
        }
    }

    /// `vars` are the six bound tensors in parameter order.
    pub fn step_tape(&self, tape: &mut Tape, vars: &[Var], x: Var, h: Var) -> Result<Var> {
        let xv = tape.value(x);
        let hv = tape.value(h);
        if xv.cols() != self.input || hv.cols() != self.hidden {
            return Err(Error::config(format!(
                "gru expects input {} / hidden {}, got {} / {}",
                self.input,
                self.hidden,
                xv.cols(),
                hv.cols()
            )));
        }
        let hx = tape.concat(h, x)?;
        let z_pre = tape.linear(hx, vars[0], Some(vars[1]))?;
        let z = tape.activate(z_pre, Activation::Sigmoid)?;
        let r_pre = tape.linear(hx, vars[2], Some(vars[3]))?;
        let r = tape.activate(r_pre, Activation::Sigmoid)?;
        let rh = tape.mul(r, h)?;
        let rhx = tape.concat(rh, x)?;
        let c_pre = tape.linear(rhx, vars[4], Some(vars[5]))?;
        let cand = tape.activate(c_pre, Activation::Tanh)?;
        let keep = tape.one_minus(z)?;
        let kept = tape.mul(keep, h)?;
        let fresh = tape.mul(z, cand)?;
        tape.add(kept, fresh)
    }
}

impl Parameterized for GruCell {
    fn parameters(&self) -> Vec<&Tensor> {
        vec![&self.w_update, &self.b_update, &self.w_reset, &self.b_reset, &self.w_candidate, &self.b_candidate]
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.w_update,
            &mut self.b_update,
            &mut self.w_reset,
            &mut self.b_reset,
            &mut self.w_candidate,
            &mut self.b_candidate,
        ]
    }

    fn parameter_names(&self) -> Vec<String> {
        ["w_update", "b_update", "w_reset", "b_reset", "w_candidate", "b_candidate"]
            .iter()
            .map(|s| s.to_string())
            .collect()
    }
}

/// One GRU recurrence step; `input` and `hidden` may be batched by rows.
pub fn gru_step(cell: &GruCell, input: &Tensor, hidden: &Tensor) -> Result<Tensor> {
    if input.rows() != hidden.rows() {
        return Err(Error::config(format!(
            "gru input has {} rows, hidden has {}",
            input.rows(),
            hidden.rows()
        )));
    }
    let mut tape = Tape::new();
    let vars = tape.bind(cell);
    let x = tape.leaf(input.clone());
    let h = tape.leaf(hidden.clone());
    let out = cell.step_tape(&mut tape, vars.vars(), x, h)?;
    tape.value(out).clone().reshape(hidden.shape().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn dense_identity() {
        let w = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let layer = DenseLayer::from_parts(w, Tensor::vector(vec![0.0, 0.0]), Activation::Identity).unwrap();
        let y = dense_forward(&layer, &Tensor::vector(vec![1.0, 2.0])).unwrap();
        assert_eq!(y.values(), &[1.0, 2.0]);
        assert_eq!(y.shape(), &[2]);
    }

    #[test]
    fn dense_relu_clamps_negative_preactivation() {
        let w = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let layer = DenseLayer::from_parts(w, Tensor::vector(vec![0.0, 0.0]), Activation::Relu).unwrap();
        let y = dense_forward(&layer, &Tensor::vector(vec![-1.0, 3.0])).unwrap();
        assert_eq!(y.values(), &[0.0, 3.0]);
    }

    #[test]
    fn dense_sigmoid_hand_value() {
        let w = Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap();
        let layer = DenseLayer::from_parts(w, Tensor::vector(vec![0.5]), Activation::Sigmoid).unwrap();
        let y = dense_forward(&layer, &Tensor::vector(vec![0.0, 0.0])).unwrap();
        let expected = 1.0 / (1.0 + (-0.5f64).exp());
        assert!((y.values()[0] - expected).abs() < 1e-15);
        assert!((y.values()[0] - 0.6225).abs() < 1e-4);
    }

    #[test]
    fn dense_shape_mismatch() {
        let layer = DenseLayer::zeros(3, 2, Activation::Relu);
        assert!(matches!(dense_forward(&layer, &Tensor::vector(vec![1.0, 2.0])), Err(Error::Config(_))));
    }

    #[test]
    fn mlp_taped_and_untaped_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mlp = Mlp::new(&mut rng, &[4, 8, 8, 2], Activation::Relu, Activation::Identity);
        let x = Tensor::matrix(3, 4, (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let mut tape = Tape::new();
        let b = tape.bind(&mlp);
        let xv = tape.leaf(x.clone());
        let y = mlp.forward_tape(&mut tape, b.vars(), xv).unwrap();
        assert_eq!(tape.value(y).values(), mlp.forward(&x).unwrap().values());
    }

    #[test]
    fn gru_zero_weights_halves_hidden() {
        let cell = GruCell::zeros(2, 3);
        let h = Tensor::vector(vec![1.0, -2.0, 0.5]);
        let out = gru_step(&cell, &Tensor::vector(vec![7.0, -3.0]), &h).unwrap();
        assert_eq!(out.values(), &[0.5, -1.0, 0.25]);
    }

    #[test]
    fn gru_zero_state_fixed_point() {
        let cell = GruCell::zeros(1, 1);
        let out = gru_step(&cell, &Tensor::vector(vec![0.0]), &Tensor::vector(vec![0.0])).unwrap();
        assert_eq!(out.values(), &[0.0]);
    }

    #[test]
    fn gru_matches_scalar_oracle() {
        // Independent single-unit recurrence written out by hand.
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let cell = GruCell::new(&mut rng, 1, 1);
        let (x, h) = (1.0, 0.0);
        let wz = cell.w_update.values();
        let wr = cell.w_reset.values();
        let wc = cell.w_candidate.values();
        let s = |v: f64| 1.0 / (1.0 + (-v).exp());
        let z = s(wz[0] * h + wz[1] * x);
        let r = s(wr[0] * h + wr[1] * x);
        let c = (wc[0] * r * h + wc[1] * x).tanh();
        let expected = (1.0 - z) * h + z * c;
        let out = gru_step(&cell, &Tensor::vector(vec![x]), &Tensor::vector(vec![h])).unwrap();
        assert!((out.values()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn gru_dimension_mismatch() {
        let cell = GruCell::zeros(2, 3);
        let r = gru_step(&cell, &Tensor::vector(vec![1.0]), &Tensor::vector(vec![0.0; 3]));
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn init_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = init_uniform(&mut rng, 10, 25);
        assert!(t.values().iter().all(|v| v.abs() <= 0.2));
    }
}
