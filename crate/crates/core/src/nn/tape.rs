//! Reverse-mode automatic differentiation over matrix-valued nodes.
//!
//! A [`Tape`] records every op of one forward pass. Parameters enter the tape
//! through [`Tape::bind`], which returns a [`Binding`] whose order matches
//! [`Parameterized::parameters`]; [`Gradients::collect`] returns gradients in
//! that same order so they can be handed straight to an optimizer.

use std::sync::atomic::{AtomicU64, Ordering};

use super::layers::{Activation, Parameterized};
use super::tensor::Tensor;
use crate::error::{Error, Result};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    index: usize,
}

/// Parameter handles for one model, in [`Parameterized::parameters`] order.
#[derive(Debug, Clone)]
pub struct Binding {
    vars: Vec<Var>,
}

impl Binding {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn slice(&self, start: usize, len: usize) -> &[Var] {
        &self.vars[start..start + len]
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Linear { x: usize, w: usize, b: Option<usize> },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    OneMinus(usize),
    Activate(usize, Activation),
    Concat(usize, usize),
    Gather { x: usize, index: Vec<usize> },
    Contract { field: usize, control: usize, hidden: usize, channels: usize },
    Huber { x: usize, kappa: f64 },
    CrossEntropy { logits: usize, labels: Vec<usize>, probs: Vec<f64> },
    Mse { x: usize, target: Vec<f64> },
    SumSquares(usize),
    Mean(usize),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Recorded forward computation.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradient of a scalar loss with respect to every node on its tape.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `var`; zeros when the loss does not depend on it.
    pub fn wrt(&self, var: Var) -> Tensor {
        assert_eq!(var.tape, self.tape, "variable from a different tape");
        let shape = self.shapes[var.index].clone();
        match &self.grads[var.index] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn collect(&self, binding: &Binding) -> Vec<Tensor> {
        binding.vars.iter().map(|&v| self.wrt(v)).collect()
    }
}

fn as_matrix(t: Tensor) -> Tensor {
    if t.shape().len() == 2 {
        t
    } else {
        let (r, c) = (t.rows(), t.cols());
        t.reshape(vec![r, c]).expect("same element count")
    }
}

impl Tape {
    pub fn new() -> Self {
        Self { id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var { tape: self.id, index: self.nodes.len() - 1 }
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::Usage("variable is not recorded on this tape".into()));
        }
        Ok(v.index)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable from a different tape");
        &self.nodes[v.index].value
    }

    /// Constant input. Rank-1 tensors become single-row matrices.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(as_matrix(value), Op::Leaf)
    }

    /// Trainable input; same as a leaf, kept apart for readability at call
    /// sites.
    pub fn param(&mut self, value: &Tensor) -> Var {
        self.push(value.clone(), Op::Leaf)
    }

    pub fn bind<M: Parameterized + ?Sized>(&mut self, model: &M) -> Binding {
        let vars = model.parameters().into_iter().map(|p| self.param(p)).collect();
        Binding { vars }
    }

    /// `x · wᵀ + b` for `x: rows×in`, `w: out×in`, `b: out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xi, wi) = (self.idx(x)?, self.idx(w)?);
        let bi = b.map(|b| self.idx(b)).transpose()?;
        let xv = &self.nodes[xi].value;
        let wv = &self.nodes[wi].value;
        let (rows, inp) = (xv.rows(), xv.cols());
        let (out, w_in) = (wv.rows(), wv.cols());
        if inp != w_in {
            return Err(Error::config(format!(
                "linear: input width {inp} does not match weight in-dimension {w_in}"
            )));
        }
        let bias = match bi {
            Some(bi) => {
                let bv = self.nodes[bi].value.values();
                if bv.len() != out {
                    return Err(Error::config(format!("linear: bias has {} entries, expected {out}", bv.len())));
                }
                Some(bv)
            }
            None => None,
        };
        let xs = xv.values();
        let ws = wv.values();
        let mut y = vec![0.0; rows * out];
        for r in 0..rows {
            let xr = &xs[r * inp..(r + 1) * inp];
            let yr = &mut y[r * out..(r + 1) * out];
            for (o, yo) in yr.iter_mut().enumerate() {
                let wr = &ws[o * inp..(o + 1) * inp];
                let mut acc = 0.0;
                for (a, b) in xr.iter().zip(wr) {
                    acc += a * b;
                }
                *yo = acc + bias.map_or(0.0, |b| b[o]);
            }
        }
        let value = Tensor::matrix(rows, out, y)?;
        Ok(self.push(value, Op::Linear { x: xi, w: wi, b: bi }))
    }

    fn binary(&mut self, a: Var, b: Var, name: &str, f: impl Fn(f64, f64) -> f64) -> Result<(usize, usize, Tensor)> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (av, bv) = (&self.nodes[ai].value, &self.nodes[bi].value);
        if av.rows() != bv.rows() || av.cols() != bv.cols() {
            return Err(Error::config(format!(
                "{name}: shape mismatch {:?} vs {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let vals = av.values().iter().zip(bv.values()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::matrix(av.rows(), av.cols(), vals)?;
        Ok((ai, bi, value))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi, v) = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(v, Op::Add(ai, bi)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi, v) = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(ai, bi)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi, v) = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(ai, bi)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let ai = self.idx(a)?;
        let v = as_matrix(self.nodes[ai].value.map(|x| x * factor));
        Ok(self.push(v, Op::Scale(ai, factor)))
    }

    /// `1 − a`, elementwise.
    pub fn one_minus(&mut self, a: Var) -> Result<Var> {
        let ai = self.idx(a)?;
        let v = as_matrix(self.nodes[ai].value.map(|x| 1.0 - x));
        Ok(self.push(v, Op::OneMinus(ai)))
    }

    pub fn activate(&mut self, a: Var, act: Activation) -> Result<Var> {
        let ai = self.idx(a)?;
        if act == Activation::Identity {
            return Ok(a);
        }
        let v = as_matrix(self.nodes[ai].value.map(|x| act.apply(x)));
        Ok(self.push(v, Op::Activate(ai, act)))
    }

    /// Column-wise concatenation of two matrices with equal row counts.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (av, bv) = (&self.nodes[ai].value, &self.nodes[bi].value);
        if av.rows() != bv.rows() {
            return Err(Error::config(format!("concat: row mismatch {} vs {}", av.rows(), bv.rows())));
        }
        let (rows, ac, bc) = (av.rows(), av.cols(), bv.cols());
        let mut vals = Vec::with_capacity(rows * (ac + bc));
        for r in 0..rows {
            vals.extend_from_slice(av.row_slice(r));
            vals.extend_from_slice(bv.row_slice(r));
        }
        let v = Tensor::matrix(rows, ac + bc, vals)?;
        Ok(self.push(v, Op::Concat(ai, bi)))
    }

    /// Picks column `index[r]` from each row `r`; result is `rows×1`.
    pub fn gather(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let xi = self.idx(x)?;
        let xv = &self.nodes[xi].value;
        if index.len() != xv.rows() {
            return Err(Error::config(format!("gather: {} indices for {} rows", index.len(), xv.rows())));
        }
        let cols = xv.cols();
        let mut vals = Vec::with_capacity(index.len());
        for (r, &c) in index.iter().enumerate() {
            if c >= cols {
                return Err(Error::input(format!("gather: column {c} out of range for width {cols}")));
            }
            vals.push(xv.get(r, c));
        }
        let v = Tensor::matrix(index.len(), 1, vals)?;
        Ok(self.push(v, Op::Gather { x: xi, index: index.to_vec() }))
    }

    /// Matrix–vector product per row: `field` holds a row-major
    /// `hidden×channels` matrix in each row, `control` a `channels` vector.
    pub fn contract(&mut self, field: Var, control: Var, hidden: usize) -> Result<Var> {
        let (fi, ci) = (self.idx(field)?, self.idx(control)?);
        let (fv, cv) = (&self.nodes[fi].value, &self.nodes[ci].value);
        let channels = cv.cols();
        if fv.rows() != cv.rows() || fv.cols() != hidden * channels {
            return Err(Error::config(format!(
                "contract: field {:?} incompatible with control {:?} and hidden {hidden}",
                fv.shape(),
                cv.shape()
            )));
        }
        let rows = fv.rows();
        let mut vals = vec![0.0; rows * hidden];
        for r in 0..rows {
            let f = fv.row_slice(r);
            let c = cv.row_slice(r);
            for i in 0..hidden {
                let fr = &f[i * channels..(i + 1) * channels];
                vals[r * hidden + i] = fr.iter().zip(c).map(|(a, b)| a * b).sum();
            }
        }
        let v = Tensor::matrix(rows, hidden, vals)?;
        Ok(self.push(v, Op::Contract { field: fi, control: ci, hidden, channels }))
    }

    /// Mean Huber loss over every element of `x`.
    pub fn huber(&mut self, x: Var, kappa: f64) -> Result<Var> {
        let xi = self.idx(x)?;
        let xv = &self.nodes[xi].value;
        let n = xv.len().max(1) as f64;
        let mut total = 0.0;
        for &d in xv.values() {
            total += super::loss::huber_loss(d, kappa)?;
        }
        Ok(self.push(Tensor::scalar(total / n), Op::Huber { x: xi, kappa }))
    }

    /// Mean cross-entropy of integer labels under softmax(logits).
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let li = self.idx(logits)?;
        let lv = &self.nodes[li].value;
        if labels.len() != lv.rows() {
            return Err(Error::config(format!("cross_entropy: {} labels for {} rows", labels.len(), lv.rows())));
        }
        let cols = lv.cols();
        let mut probs = Vec::with_capacity(lv.len());
        let mut total = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            if label >= cols {
                return Err(Error::input(format!("label {label} out of range for {cols} logits")));
            }
            let row = lv.row_slice(r);
            total += super::loss::cross_entropy(row, label)?;
            probs.extend(super::loss::softmax(row));
        }
        let n = labels.len().max(1) as f64;
        Ok(self.push(Tensor::scalar(total / n), Op::CrossEntropy { logits: li, labels: labels.to_vec(), probs }))
    }

    /// Mean squared error against a constant target of the same shape.
    pub fn mse(&mut self, x: Var, target: &Tensor) -> Result<Var> {
        let xi = self.idx(x)?;
        let xv = &self.nodes[xi].value;
        if xv.len() != target.len() {
            return Err(Error::config(format!("mse: {} predictions vs {} targets", xv.len(), target.len())));
        }
        let n = xv.len().max(1) as f64;
        let total: f64 = xv.values().iter().zip(target.values()).map(|(a, b)| (a - b) * (a - b)).sum();
        Ok(self.push(Tensor::scalar(total / n), Op::Mse { x: xi, target: target.values().to_vec() }))
    }

    pub fn sum_squares(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let v = self.nodes[xi].value.sum_squares();
        Ok(self.push(Tensor::scalar(v), Op::SumSquares(xi)))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let xv = &self.nodes[xi].value;
        let v = xv.values().iter().sum::<f64>() / xv.len().max(1) as f64;
        Ok(self.push(Tensor::scalar(v), Op::Mean(xi)))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let li = self.idx(loss)?;
        if self.nodes[li].value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[li].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[li] = Some(vec![1.0]);

        fn acc(grads: &mut [Option<Vec<f64>>], i: usize, len: usize) -> &mut Vec<f64> {
            grads[i].get_or_insert_with(|| vec![0.0; len])
        }

        for n in (0..=li).rev() {
            let Some(g) = grads[n].take() else { continue };
            let node = &self.nodes[n];
            match &node.op {
                Op::Leaf => {}
                Op::Linear { x, w, b } => {
                    let xv = &self.nodes[*x].value;
                    let wv = &self.nodes[*w].value;
                    let (rows, inp, out) = (xv.rows(), xv.cols(), wv.rows());
                    let (xs, ws) = (xv.values(), wv.values());
                    {
                        let gx = acc(&mut grads, *x, rows * inp);
                        for r in 0..rows {
                            let gr = &g[r * out..(r + 1) * out];
                            let gxr = &mut gx[r * inp..(r + 1) * inp];
                            for (o, &go) in gr.iter().enumerate() {
                                if go == 0.0 {
                                    continue;
                                }
                                let wr = &ws[o * inp..(o + 1) * inp];
                                for (a, &wv) in gxr.iter_mut().zip(wr) {
                                    *a += go * wv;
                                }
                            }
                        }
                    }
                    {
                        let gw = acc(&mut grads, *w, out * inp);
                        for r in 0..rows {
                            let gr = &g[r * out..(r + 1) * out];
                            let xr = &xs[r * inp..(r + 1) * inp];
                            for (o, &go) in gr.iter().enumerate() {
                                if go == 0.0 {
                                    continue;
                                }
                                let gwr = &mut gw[o * inp..(o + 1) * inp];
                                for (a, &xv) in gwr.iter_mut().zip(xr) {
                                    *a += go * xv;
                                }
                            }
                        }
                    }
                    if let Some(b) = b {
                        let gb = acc(&mut grads, *b, out);
                        for r in 0..rows {
                            for o in 0..out {
                                gb[o] += g[r * out + o];
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    for (t, s) in [(*a, 1.0), (*b, 1.0)] {
                        let ga = acc(&mut grads, t, g.len());
                        for (x, &y) in ga.iter_mut().zip(&g) {
                            *x += s * y;
                        }
                    }
                }
                Op::Sub(a, b) => {
                    for (t, s) in [(*a, 1.0), (*b, -1.0)] {
                        let ga = acc(&mut grads, t, g.len());
                        for (x, &y) in ga.iter_mut().zip(&g) {
                            *x += s * y;
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let av = self.nodes[*a].value.values();
                    let bv = self.nodes[*b].value.values();
                    {
                        let ga = acc(&mut grads, *a, g.len());
                        for i in 0..g.len() {
                            ga[i] += g[i] * bv[i];
                        }
                    }
                    let gb = acc(&mut grads, *b, g.len());
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                }
                Op::Scale(a, f) => {
                    let ga = acc(&mut grads, *a, g.len());
                    for (x, &y) in ga.iter_mut().zip(&g) {
                        *x += f * y;
                    }
                }
                Op::OneMinus(a) => {
                    let ga = acc(&mut grads, *a, g.len());
                    for (x, &y) in ga.iter_mut().zip(&g) {
                        *x -= y;
                    }
                }
                Op::Activate(a, act) => {
                    let y = node.value.values();
                    let ga = acc(&mut grads, *a, g.len());
                    for i in 0..g.len() {
                        ga[i] += g[i] * act.derivative_from_output(y[i]);
                    }
                }
                Op::Concat(a, b) => {
                    let (ac, bc) = (self.nodes[*a].value.cols(), self.nodes[*b].value.cols());
                    let rows = node.value.rows();
                    let w = ac + bc;
                    {
                        let ga = acc(&mut grads, *a, rows * ac);
                        for r in 0..rows {
                            for c in 0..ac {
                                ga[r * ac + c] += g[r * w + c];
                            }
                        }
                    }
                    let gb = acc(&mut grads, *b, rows * bc);
                    for r in 0..rows {
                        for c in 0..bc {
                            gb[r * bc + c] += g[r * w + ac + c];
                        }
                    }
                }
                Op::Gather { x, index } => {
                    let xv = &self.nodes[*x].value;
                    let cols = xv.cols();
                    let gx = acc(&mut grads, *x, xv.len());
                    for (r, &c) in index.iter().enumerate() {
                        gx[r * cols + c] += g[r];
                    }
                }
                Op::Contract { field, control, hidden, channels } => {
                    let fv = self.nodes[*field].value.values();
                    let cv = self.nodes[*control].value.values();
                    let rows = node.value.rows();
                    let (h, c) = (*hidden, *channels);
                    {
                        let gf = acc(&mut grads, *field, rows * h * c);
                        for r in 0..rows {
                            for i in 0..h {
                                let gi = g[r * h + i];
                                for j in 0..c {
                                    gf[r * h * c + i * c + j] += gi * cv[r * c + j];
                                }
                            }
                        }
                    }
                    let gc = acc(&mut grads, *control, rows * c);
                    for r in 0..rows {
                        for i in 0..h {
                            let gi = g[r * h + i];
                            for j in 0..c {
                                gc[r * c + j] += gi * fv[r * h * c + i * c + j];
                            }
                        }
                    }
                }
                Op::Huber { x, kappa } => {
                    let xv = self.nodes[*x].value.values();
                    let n = xv.len().max(1) as f64;
                    let gx = acc(&mut grads, *x, xv.len());
                    for (a, &d) in gx.iter_mut().zip(xv) {
                        *a += g[0] * super::loss::huber_derivative(d, *kappa) / n;
                    }
                }
                Op::CrossEntropy { logits, labels, probs } => {
                    let cols = self.nodes[*logits].value.cols();
                    let n = labels.len().max(1) as f64;
                    let gl = acc(&mut grads, *logits, probs.len());
                    for (r, &label) in labels.iter().enumerate() {
                        for c in 0..cols {
                            let onehot = if c == label { 1.0 } else { 0.0 };
                            gl[r * cols + c] += g[0] * (probs[r * cols + c] - onehot) / n;
                        }
                    }
                }
                Op::Mse { x, target } => {
                    let xv = self.nodes[*x].value.values();
                    let n = xv.len().max(1) as f64;
                    let gx = acc(&mut grads, *x, xv.len());
                    for i in 0..xv.len() {
                        gx[i] += g[0] * 2.0 * (xv[i] - target[i]) / n;
                    }
                }
                Op::SumSquares(x) => {
                    let xv = self.nodes[*x].value.values();
                    let gx = acc(&mut grads, *x, xv.len());
                    for (a, &v) in gx.iter_mut().zip(xv) {
                        *a += g[0] * 2.0 * v;
                    }
                }
                Op::Mean(x) => {
                    let len = self.nodes[*x].value.len();
                    let gx = acc(&mut grads, *x, len);
                    for a in gx.iter_mut() {
                        *a += g[0] / len.max(1) as f64;
                    }
                }
            }
            grads[n] = Some(g);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { tape: self.id, grads, shapes })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_has_derivative_two_w() {
        let mut tape = Tape::new();
        let w = tape.param(&Tensor::scalar(3.0));
        let loss = tape.mul(w, w).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(w).values(), &[6.0]);
    }

    #[test]
    fn constant_loss_has_zero_gradients() {
        let mut tape = Tape::new();
        let w = tape.param(&Tensor::row(vec![1.0, 2.0]));
        let loss = tape.leaf(Tensor::scalar(4.2));
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(w).values(), &[0.0, 0.0]);
    }

    #[test]
    fn loss_from_another_tape_is_rejected() {
        let mut a = Tape::new();
        let b = Tape::new();
        let loss = a.leaf(Tensor::scalar(1.0));
        assert!(matches!(b.backward(loss), Err(Error::Usage(_))));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::row(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(v), Err(Error::Usage(_))));
    }

    #[test]
    fn shared_node_accumulates() {
        // loss = mean(x * x + x) at x = [1, 2] -> d/dx = (2x + 1) / 2
        let mut tape = Tape::new();
        let x = tape.param(&Tensor::row(vec![1.0, 2.0]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.add(sq, x).unwrap();
        let loss = tape.mean(s).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).values(), &[1.5, 2.5]);
    }

    #[test]
    fn linear_rejects_width_mismatch() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::row(vec![1.0, 2.0, 3.0]));
        let w = tape.param(&Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap());
        assert!(matches!(tape.linear(x, w, None), Err(Error::Config(_))));
    }
}
