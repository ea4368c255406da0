//! Fixed-step fourth-order Runge–Kutta, generic over the state
//! representation so the same stepping code drives plain vectors and taped
//! variables.

use crate::error::Result;

pub trait Rk4System {
    type State: Clone;

    /// `dy/dt` at `y` (autonomous systems only).
    fn field(&mut self, y: &Self::State) -> Result<Self::State>;

    /// `y + a·d`.
    fn axpy(&mut self, y: &Self::State, a: f64, d: &Self::State) -> Result<Self::State>;
}

/// Integrate over a span of length `span` using `steps` equal steps.
pub fn rk4_integrate<S: Rk4System>(system: &mut S, y0: S::State, span: f64, steps: usize) -> Result<S::State> {
    let dt = span / steps.max(1) as f64;
    let mut y = y0;
    for _ in 0..steps.max(1) {
        let k1 = system.field(&y)?;
        let y2 = system.axpy(&y, 0.5 * dt, &k1)?;
        let k2 = system.field(&y2)?;
        let y3 = system.axpy(&y, 0.5 * dt, &k2)?;
        let k3 = system.field(&y3)?;
        let y4 = system.axpy(&y, dt, &k3)?;
        let k4 = system.field(&y4)?;
        let mut next = system.axpy(&y, dt / 6.0, &k1)?;
        next = system.axpy(&next, dt / 3.0, &k2)?;
        next = system.axpy(&next, dt / 3.0, &k3)?;
        next = system.axpy(&next, dt / 6.0, &k4)?;
        y = next;
    }
    Ok(y)
}

/// Vector-valued system defined by a closure.
pub struct FnSystem<F>(pub F);

impl<F: FnMut(&[f64]) -> Vec<f64>> Rk4System for FnSystem<F> {
    type State = Vec<f64>;

    fn field(&mut self, y: &Vec<f64>) -> Result<Vec<f64>> {
        Ok((self.0)(y))
    }

    fn axpy(&mut self, y: &Vec<f64>, a: f64, d: &Vec<f64>) -> Result<Vec<f64>> {
        Ok(y.iter().zip(d).map(|(y, d)| y + a * d).collect())
    }
}
