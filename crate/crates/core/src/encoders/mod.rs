//! History encoders Φ mapping `(F_{0:t}, A_{0:t−1})` to a latent state Ŝ_t.
//!
//! The input at step τ is `[F_τ ++ A_{τ−1}]` with `A_{−1} = 0`.
//!
//! * `rnn`: two dense+relu layers, then a GRU.
//! * `ode_rnn`: the same stack, but before each GRU update (after the first)
//!   the hidden state flows for one bin under `dh/dt = f(h)` using fixed-step
//!   RK4. `f` is an `H→100→H` network with a tanh hidden layer.
//! * `cde`: a natural cubic spline over the channels `[τ ++ F_τ ++ A_{τ−1}]`
//!   drives `z ← z + f(z)·ΔX` over `step_count` sub-steps per bin, with
//!   `z_0` a linear map of `X(0)`. The spline for the interval `[τ−1, τ]` is
//!   fitted to knots `0..=τ` only, so Ŝ_t never sees later bins.

pub mod pretrain;
pub mod rk4;
pub mod spline;

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use pretrain::{pretrain_encoder, PretrainConfig, PretrainReport};
pub use rk4::{rk4_integrate, FnSystem, Rk4System};
pub use spline::{natural_cubic_spline, CubicSplineCoeffs, PathSpline};

use crate::cohort::Trajectory;
use crate::error::{Error, Result};
use crate::nn::{rng_from_seed, Activation, Checkpoint, DenseLayer, GruCell, Mlp, Parameterized, Tape, Tensor, Var};

/// Hidden widths offered by the encoder grid.
pub const HIDDEN_GRID: [usize; 4] = [32, 64, 128, 256];
/// Width of the ODE and CDE vector-field hidden layers.
pub const FIELD_HIDDEN: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Rnn,
    OdeRnn,
    Cde,
}

impl EncoderKind {
    pub fn name(self) -> &'static str {
        match self {
            EncoderKind::Rnn => "rnn",
            EncoderKind::OdeRnn => "ode_rnn",
            EncoderKind::Cde => "cde",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub hidden: usize,
    /// Widths of the two dense layers ahead of the GRU.
    pub head: Vec<usize>,
    /// Integration sub-steps per bin (ODE-RNN and CDE).
    pub step_count: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { kind: EncoderKind::Rnn, hidden: 64, head: vec![64, 64], step_count: 4, seed: 0 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::config("encoder.hidden must be > 0"));
        }
        if self.step_count == 0 {
            return Err(Error::config("encoder.step_count must be >= 1"));
        }
        if self.head.is_empty() || self.head.contains(&0) {
            return Err(Error::config("encoder.head must list positive layer widths"));
        }
        Ok(())
    }
}

/// Anything that turns a trajectory into one state per bin.
pub trait StateEncoder {
    fn width(&self) -> usize;

    /// States Ŝ_0..Ŝ_{T−1}.
    fn encode_trajectory(&self, trajectory: &Trajectory) -> Result<Vec<Vec<f64>>>;
}

/// Uses the raw row `[F_t ++ A_{t−1}]` as the state.
#[derive(Debug, Clone, Copy)]
pub struct FeatureEncoder {
    pub feature_width: usize,
}

impl StateEncoder for FeatureEncoder {
    fn width(&self) -> usize {
        self.feature_width + 1
    }

    fn encode_trajectory(&self, trajectory: &Trajectory) -> Result<Vec<Vec<f64>>> {
        check_trajectory(&trajectory.features, &trajectory.actions, self.feature_width)?;
        Ok((0..trajectory.len()).map(|t| step_input(&trajectory.features, &trajectory.actions, t)).collect())
    }
}

fn step_input(features: &[Vec<f64>], actions: &[u8], t: usize) -> Vec<f64> {
    let mut row = features[t].clone();
    row.push(if t == 0 { 0.0 } else { f64::from(actions[t - 1]) });
    row
}

fn check_trajectory(features: &[Vec<f64>], actions: &[u8], width: usize) -> Result<()> {
    if features.is_empty() {
        return Err(Error::input("cannot encode an empty trajectory"));
    }
    if actions.len() + 1 < features.len() {
        return Err(Error::input(format!("{} bins need at least {} actions", features.len(), features.len() - 1)));
    }
    if let Some(row) = features.iter().find(|r| r.len() != width) {
        return Err(Error::input(format!("feature row has width {}, encoder expects {width}", row.len())));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdeNet {
    /// `X(0) → z_0`.
    pub initial: DenseLayer,
    /// `z → H×C` matrix, row-major.
    pub field: Mlp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub feature_width: usize,
    pub head: Option<Mlp>,
    pub gru: Option<GruCell>,
    pub ode: Option<Mlp>,
    pub cde: Option<CdeNet>,
}

struct Bound<'a> {
    head: Option<&'a [Var]>,
    gru: Option<&'a [Var]>,
    ode: Option<&'a [Var]>,
    initial: Option<&'a [Var]>,
    field: Option<&'a [Var]>,
}

impl Encoder {
    pub fn new(config: EncoderConfig, feature_width: usize) -> Result<Self> {
        config.validate()?;
        if feature_width == 0 {
            return Err(Error::config("encoder needs at least one feature"));
        }
        let mut rng = rng_from_seed(config.seed);
        Ok(Self::build(config, feature_width, &mut rng))
    }

    fn build<R: Rng>(config: EncoderConfig, feature_width: usize, rng: &mut R) -> Self {
        let h = config.hidden;
        let input = feature_width + 1;
        let mut enc = Self { config: config.clone(), feature_width, head: None, gru: None, ode: None, cde: None };
        match config.kind {
            EncoderKind::Rnn | EncoderKind::OdeRnn => {
                let mut sizes = vec![input];
                sizes.extend(&config.head);
                let head = Mlp::new(rng, &sizes, Activation::Relu, Activation::Relu);
                enc.gru = Some(GruCell::new(rng, head.output_dim(), h));
                enc.head = Some(head);
                if config.kind == EncoderKind::OdeRnn {
                    enc.ode = Some(Mlp::new(rng, &[h, FIELD_HIDDEN, h], Activation::Tanh, Activation::Identity));
                }
            }
            EncoderKind::Cde => {
                let channels = input + 1;
                enc.cde = Some(CdeNet {
                    initial: DenseLayer::new(rng, channels, h, Activation::Identity),
                    field: Mlp::new(
                        rng,
                        &[h, FIELD_HIDDEN, FIELD_HIDDEN, FIELD_HIDDEN, h * channels],
                        Activation::Relu,
                        Activation::Tanh,
                    ),
                });
            }
        }
        enc
    }

    pub fn hidden(&self) -> usize {
        self.config.hidden
    }

    /// CDE path channels: time, features, previous action.
    pub fn channels(&self) -> usize {
        self.feature_width + 2
    }

    // Split a flat `parameters()`-ordered var list into components.
    fn split_vars<'a>(&self, vars: &'a [Var]) -> Bound<'a> {
        let mut rest = vars;
        let mut take = |n: usize| {
            let (head, tail) = rest.split_at(n);
            rest = tail;
            head
        };
        Bound {
            head: self.head.as_ref().map(|m| take(m.parameters().len())),
            gru: self.gru.as_ref().map(|m| take(m.parameters().len())),
            ode: self.ode.as_ref().map(|m| take(m.parameters().len())),
            initial: self.cde.as_ref().map(|c| take(c.initial.parameters().len())),
            field: self.cde.as_ref().map(|c| take(c.field.parameters().len())),
        }
    }

    /// Record the encoding of every bin on `tape`; returns Ŝ_0..Ŝ_{T−1}.
    fn forward(&self, tape: &mut Tape, bound: &Bound, features: &[Vec<f64>], actions: &[u8]) -> Result<Vec<Var>> {
        check_trajectory(features, actions, self.feature_width)?;
        match self.config.kind {
            EncoderKind::Rnn | EncoderKind::OdeRnn => self.forward_recurrent(tape, bound, features, actions),
            EncoderKind::Cde => self.forward_cde(tape, bound, features, actions),
        }
    }

    fn forward_recurrent(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        features: &[Vec<f64>],
        actions: &[u8],
    ) -> Result<Vec<Var>> {
        let head = self.head.as_ref().expect("recurrent encoder has a head");
        let gru = self.gru.as_ref().expect("recurrent encoder has a gru");
        let head_vars = bound.head.expect("bound");
        let gru_vars = bound.gru.expect("bound");
        let mut h = tape.leaf(Tensor::zeros(&[1, self.hidden()]));
        let mut out = Vec::with_capacity(features.len());
        for t in 0..features.len() {
            if t > 0 {
                if let (Some(ode), Some(vars)) = (&self.ode, bound.ode) {
                    let mut sys = TapeField { tape: &mut *tape, net: ode, vars };
                    h = rk4_integrate(&mut sys, h, 1.0, self.config.step_count)?;
                }
            }
            let x = tape.leaf(Tensor::row(step_input(features, actions, t)));
            let e = head.forward_tape(tape, head_vars, x)?;
            h = gru.step_tape(tape, gru_vars, e, h)?;
            out.push(h);
        }
        Ok(out)
    }

    fn forward_cde(&self, tape: &mut Tape, bound: &Bound, features: &[Vec<f64>], actions: &[u8]) -> Result<Vec<Var>> {
        let net = self.cde.as_ref().expect("cde encoder has its nets");
        let path_rows: Vec<Vec<f64>> = (0..features.len())
            .map(|t| {
                let mut row = vec![t as f64];
                row.extend(step_input(features, actions, t));
                row
            })
            .collect();
        let x0 = tape.leaf(Tensor::row(path_rows[0].clone()));
        let mut z = net.initial.forward_tape(tape, bound.initial.expect("bound"), x0)?;
        let mut out = vec![z];
        let field_vars = bound.field.expect("bound");
        for t in 1..features.len() {
            let times: Vec<f64> = (0..=t).map(|k| k as f64).collect();
            let path = PathSpline::fit(&times, &path_rows[..=t])?;
            z = self.cde_interval(tape, &net.field, field_vars, z, &path, (t - 1) as f64, t as f64)?;
            out.push(z);
        }
        Ok(out)
    }

    // Sub-stepped increment update of z across [from, to].
    #[allow(clippy::too_many_arguments)]
    fn cde_interval(
        &self,
        tape: &mut Tape,
        field: &Mlp,
        vars: &[Var],
        mut z: Var,
        path: &PathSpline,
        from: f64,
        to: f64,
    ) -> Result<Var> {
        let steps = self.config.step_count;
        let mut prev = path.evaluate(from);
        for k in 1..=steps {
            let s = if k == steps { to } else { from + (to - from) * k as f64 / steps as f64 };
            let cur = path.evaluate(s);
            let dx: Vec<f64> = cur.iter().zip(&prev).map(|(a, b)| a - b).collect();
            let f = field.forward_tape(tape, vars, z)?;
            let dxv = tape.leaf(Tensor::row(dx));
            let dz = tape.contract(f, dxv, self.hidden())?;
            z = tape.add(z, dz)?;
            prev = cur;
        }
        Ok(z)
    }

    /// Evolve `z0` across `[from, to]` along an arbitrary path (CDE only).
    pub fn cde_evolve(&self, z0: &[f64], path: &PathSpline, from: f64, to: f64) -> Result<Vec<f64>> {
        let net = self.cde.as_ref().ok_or_else(|| Error::config("cde_evolve needs a cde encoder"))?;
        if path.width() != self.channels() || z0.len() != self.hidden() {
            return Err(Error::config("path or latent width does not match the encoder"));
        }
        let mut tape = Tape::new();
        let vars = tape.bind(&net.field);
        let z = tape.leaf(Tensor::row(z0.to_vec()));
        let out = self.cde_interval(&mut tape, &net.field, vars.vars(), z, path, from, to)?;
        Ok(tape.value(out).values().to_vec())
    }

    /// Latent states for every bin of a raw feature/action history.
    pub fn encode_all(&self, features: &[Vec<f64>], actions: &[u8]) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let binding = tape.bind(self);
        let states = self.forward(&mut tape, &self.split_vars(binding.vars()), features, actions)?;
        let out: Vec<Vec<f64>> = states.iter().map(|v| tape.value(*v).values().to_vec()).collect();
        if out.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("encoder produced non-finite states".into()));
        }
        Ok(out)
    }

    /// Ŝ_t for one trajectory.
    pub fn encode(&self, trajectory: &Trajectory, t: usize) -> Result<Vec<f64>> {
        if t >= trajectory.len() {
            return Err(Error::input(format!(
                "step {t} out of range for patient {} with {} bins",
                trajectory.patient_id,
                trajectory.len()
            )));
        }
        let mut states = self.encode_all(&trajectory.features[..=t], &trajectory.actions[..t])?;
        Ok(states.pop().expect("t+1 states"))
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::new()
            .with_metadata("encoder_config", &self.config)?
            .with_metadata("feature_width", self.feature_width)?;
        ck.insert("encoder", self);
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config: EncoderConfig = ck.metadata("encoder_config")?;
        let width: usize = ck.metadata("feature_width")?;
        let mut enc = Self::new(config, width)?;
        ck.load_into("encoder", &mut enc)?;
        Ok(enc)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.checkpoint()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Taped pass over `vars`, the encoder's parameters bound in
    /// `parameters()` order; returns the per-bin states.
    pub fn forward_tape(&self, tape: &mut Tape, vars: &[Var], features: &[Vec<f64>], actions: &[u8]) -> Result<Vec<Var>> {
        if vars.len() != self.parameters().len() {
            return Err(Error::config(format!("encoder expects {} bound tensors, got {}", self.parameters().len(), vars.len())));
        }
        self.forward(tape, &self.split_vars(vars), features, actions)
    }
}

impl StateEncoder for Encoder {
    fn width(&self) -> usize {
        self.hidden()
    }

    fn encode_trajectory(&self, trajectory: &Trajectory) -> Result<Vec<Vec<f64>>> {
        self.encode_all(&trajectory.features, &trajectory.actions)
    }
}

impl Parameterized for Encoder {
    fn parameters(&self) -> Vec<&Tensor> {
        let mut p = Vec::new();
        if let Some(m) = &self.head {
            p.extend(m.parameters());
        }
        if let Some(m) = &self.gru {
            p.extend(m.parameters());
        }
        if let Some(m) = &self.ode {
            p.extend(m.parameters());
        }
        if let Some(c) = &self.cde {
            p.extend(c.initial.parameters());
            p.extend(c.field.parameters());
        }
        p
    }

    fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut p = Vec::new();
        if let Some(m) = &mut self.head {
            p.extend(m.parameters_mut());
        }
        if let Some(m) = &mut self.gru {
            p.extend(m.parameters_mut());
        }
        if let Some(m) = &mut self.ode {
            p.extend(m.parameters_mut());
        }
        if let Some(c) = &mut self.cde {
            p.extend(c.initial.parameters_mut());
            p.extend(c.field.parameters_mut());
        }
        p
    }

    fn parameter_names(&self) -> Vec<String> {
        let prefixed = |prefix: &'static str, names: Vec<String>| names.into_iter().map(move |n| format!("{prefix}.{n}"));
        let mut p = Vec::new();
        if let Some(m) = &self.head {
            p.extend(prefixed("head", m.parameter_names()));
        }
        if let Some(m) = &self.gru {
            p.extend(prefixed("gru", m.parameter_names()));
        }
        if let Some(m) = &self.ode {
            p.extend(prefixed("ode", m.parameter_names()));
        }
        if let Some(c) = &self.cde {
            p.extend(prefixed("cde_initial", c.initial.parameter_names()));
            p.extend(prefixed("cde_field", c.field.parameter_names()));
        }
        p
    }
}

// The ODE-RNN vector field as an RK4 system over taped variables.
struct TapeField<'a> {
    tape: &'a mut Tape,
    net: &'a Mlp,
    vars: &'a [Var],
}

impl Rk4System for TapeField<'_> {
    type State = Var;

    fn field(&mut self, y: &Var) -> Result<Var> {
        self.net.forward_tape(self.tape, self.vars, *y)
    }

    fn axpy(&mut self, y: &Var, a: f64, d: &Var) -> Result<Var> {
        let s = self.tape.scale(*d, a)?;
        self.tape.add(*y, s)
    }
}
