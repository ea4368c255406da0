//! Natural cubic splines.
//!
//! On interval `i` the spline is
//! `S_i(x) = a_i + b_i·dx + c_i·dx² + d_i·dx³` with `dx = x − t_i`; the
//! natural boundary fixes `S''(t_0) = S''(t_n) = 0`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CubicSplineCoeffs {
    pub times: Vec<f64>,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub d: Vec<f64>,
    /// Knot value at the last time, kept so evaluation there is exact.
    last: f64,
}

/// Fit a natural cubic spline through `(times[i], values[i])`.
pub fn natural_cubic_spline(times: &[f64], values: &[f64]) -> Result<CubicSplineCoeffs> {
    let n = times.len();
    if n != values.len() {
        return Err(Error::input(format!("spline has {n} times but {} values", values.len())));
    }
    if n < 2 {
        return Err(Error::input("spline needs at least two knots"));
    }
    if times.iter().chain(values).any(|v| !v.is_finite()) {
        return Err(Error::input("spline knots must be finite"));
    }
    for w in times.windows(2) {
        if w[1] <= w[0] {
            return Err(Error::input(format!("spline times must be strictly increasing ({} then {})", w[0], w[1])));
        }
    }

    let h: Vec<f64> = times.windows(2).map(|w| w[1] - w[0]).collect();
    let slope: Vec<f64> = (0..n - 1).map(|i| (values[i + 1] - values[i]) / h[i]).collect();

    // Interior unknowns c_1..c_{n-2}; tridiagonal system solved by Thomas.
    let mut c = vec![0.0; n];
    let m = n - 2;
    if m > 0 {
        let mut diag = vec![0.0; m];
        let mut upper = vec![0.0; m];
        let mut rhs = vec![0.0; m];
        for k in 0..m {
            let i = k + 1;
            diag[k] = 2.0 * (h[i - 1] + h[i]);
            upper[k] = h[i];
            rhs[k] = 3.0 * (slope[i] - slope[i - 1]);
        }
        for k in 1..m {
            let lower = h[k];
            let f = lower / diag[k - 1];
            diag[k] -= f * upper[k - 1];
            rhs[k] -= f * rhs[k - 1];
        }
        c[m] = rhs[m - 1] / diag[m - 1];
        for k in (0..m - 1).rev() {
            c[k + 1] = (rhs[k] - upper[k] * c[k + 2]) / diag[k];
        }
    }

    let mut b = Vec::with_capacity(n - 1);
    let mut d = Vec::with_capacity(n - 1);
    for i in 0..n - 1 {
        b.push(slope[i] - h[i] * (2.0 * c[i] + c[i + 1]) / 3.0);
        d.push((c[i + 1] - c[i]) / (3.0 * h[i]));
    }
    c.truncate(n - 1);
    Ok(CubicSplineCoeffs {
        times: times.to_vec(),
        a: values[..n - 1].to_vec(),
        b,
        c,
        d,
        last: values[n - 1],
    })
}

impl CubicSplineCoeffs {
    pub fn knots(&self) -> usize {
        self.times.len()
    }

    // Interval index for `x`; points outside the knot range use the end
    // cubics.
    fn interval(&self, x: f64) -> usize {
        let intervals = self.a.len();
        self.times[1..].partition_point(|&t| t <= x).min(intervals - 1)
    }

    pub fn evaluate(&self, x: f64) -> f64 {
        if x == self.times[self.times.len() - 1] {
            return self.last;
        }
        let i = self.interval(x);
        let dx = x - self.times[i];
        self.a[i] + dx * (self.b[i] + dx * (self.c[i] + dx * self.d[i]))
    }

    pub fn second_derivative(&self, x: f64) -> f64 {
        let i = self.interval(x);
        let dx = x - self.times[i];
        2.0 * self.c[i] + 6.0 * self.d[i] * dx
    }
}

/// One spline per channel over shared knot times.
#[derive(Debug, Clone, PartialEq)]
pub struct PathSpline {
    pub channels: Vec<CubicSplineCoeffs>,
}

impl PathSpline {
    /// `rows[k]` is the channel vector at `times[k]`.
    pub fn fit(times: &[f64], rows: &[Vec<f64>]) -> Result<Self> {
        let width = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != width) {
            return Err(Error::input("path rows have inconsistent widths"));
        }
        let channels = (0..width)
            .map(|ch| {
                let vals: Vec<f64> = rows.iter().map(|r| r[ch]).collect();
                natural_cubic_spline(times, &vals)
            })
            .collect::<Result<_>>()?;
        Ok(Self { channels })
    }

    pub fn width(&self) -> usize {
        self.channels.len()
    }

    pub fn evaluate(&self, x: f64) -> Vec<f64> {
        self.channels.iter().map(|s| s.evaluate(x)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // Dense Gaussian-elimination solve of the full natural-spline system for
    // the knot second derivatives, then the standard second-derivative form
    // of the interpolant.
    fn oracle(times: &[f64], ys: &[f64], x: f64) -> f64 {
        let n = times.len();
        let mut a = vec![vec![0.0; n + 1]; n];
        a[0][0] = 1.0;
        a[n - 1][n - 1] = 1.0;
        for i in 1..n - 1 {
            let h0 = times[i] - times[i - 1];
            let h1 = times[i + 1] - times[i];
            a[i][i - 1] = h0 / 6.0;
            a[i][i] = (h0 + h1) / 3.0;
            a[i][i + 1] = h1 / 6.0;
            a[i][n] = (ys[i + 1] - ys[i]) / h1 - (ys[i] - ys[i - 1]) / h0;
        }
        for col in 0..n {
            let piv = (col..n).max_by(|&p, &q| a[p][col].abs().total_cmp(&a[q][col].abs())).unwrap();
            a.swap(col, piv);
            for r in 0..n {
                if r != col {
                    let f = a[r][col] / a[col][col];
                    for k in col..=n {
                        a[r][k] -= f * a[col][k];
                    }
                }
            }
        }
        let m: Vec<f64> = (0..n).map(|i| a[i][n] / a[i][i]).collect();
        let i = (0..n - 1).rfind(|&i| times[i] <= x).unwrap_or(0);
        let h = times[i + 1] - times[i];
        let (l, r) = (times[i + 1] - x, x - times[i]);
        m[i] * l.powi(3) / (6.0 * h)
            + m[i + 1] * r.powi(3) / (6.0 * h)
            + (ys[i] / h - m[i] * h / 6.0) * l
            + (ys[i + 1] / h - m[i + 1] * h / 6.0) * r
    }

    #[test]
    fn three_knot_midpoint() {
        let s = natural_cubic_spline(&[0.0, 1.0, 2.0], &[0.0, 1.0, 0.0]).unwrap();
        let expected = oracle(&[0.0, 1.0, 2.0], &[0.0, 1.0, 0.0], 0.5);
        assert!((expected - 0.6875).abs() < 1e-15);
        assert!((s.evaluate(0.5) - 0.6875).abs() < 1e-12);
    }

    #[test]
    fn two_knots_are_linear() {
        let s = natural_cubic_spline(&[0.0, 1.0], &[0.0, 1.0]).unwrap();
        assert!((s.evaluate(0.5) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn constant_data() {
        let s = natural_cubic_spline(&[0.0, 3.0], &[5.0, 5.0]).unwrap();
        for k in 0..=30 {
            assert_eq!(s.evaluate(k as f64 * 0.1), 5.0);
        }
    }

    #[test]
    fn duplicate_times_rejected() {
        assert!(natural_cubic_spline(&[0.0, 1.0, 1.0], &[0.0, 1.0, 2.0]).is_err());
        assert!(natural_cubic_spline(&[0.0], &[0.0]).is_err());
    }

    proptest! {
        #[test]
        fn interpolates_and_matches_oracle(
            gaps in proptest::collection::vec(0.1f64..3.0, 1..12),
            ys in proptest::collection::vec(-50.0f64..50.0, 13),
            probe in 0.0f64..1.0,
        ) {
            let mut times = vec![0.0];
            for g in &gaps {
                times.push(times.last().unwrap() + g);
            }
            let ys = &ys[..times.len()];
            let s = natural_cubic_spline(&times, ys).unwrap();
            for (t, y) in times.iter().zip(ys) {
                prop_assert!((s.evaluate(*t) - y).abs() < 1e-12);
            }
            let end = *times.last().unwrap();
            prop_assert!(s.second_derivative(0.0).abs() < 1e-9);
            prop_assert!(s.second_derivative(end).abs() < 1e-9);
            let x = probe * end;
            let o = oracle(&times, ys, x);
            prop_assert!((s.evaluate(x) - o).abs() < 1e-8 * (1.0 + o.abs()));
        }
    }
}
