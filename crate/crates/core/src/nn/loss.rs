use crate::error::{Error, Result};

/// Huber loss `L_κ(δ)`: quadratic inside `|δ| ≤ κ`, linear outside.
pub fn huber_loss(delta: f64, kappa: f64) -> Result<f64> {
    if !(kappa > 0.0) {
        return Err(Error::config(format!("huber kappa must be > 0, got {kappa}")));
    }
    let a = delta.abs();
    Ok(if a <= kappa { 0.5 * delta * delta } else { kappa * (a - 0.5 * kappa) })
}

/// `dL_κ/dδ`, i.e. δ clipped to `[−κ, κ]`.
pub fn huber_derivative(delta: f64, kappa: f64) -> f64 {
    delta.clamp(-kappa, kappa)
}

/// Softmax with the max-logit shift.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

pub fn log_sum_exp(logits: &[f64]) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + logits.iter().map(|&l| (l - m).exp()).sum::<f64>().ln()
}

/// `−log softmax(logits)[label]`.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if label >= logits.len() {
        return Err(Error::input(format!("label {label} out of range for {} logits", logits.len())));
    }
    Ok(log_sum_exp(logits) - logits[label])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn huber_branches() {
        assert_eq!(huber_loss(0.0, 1.0).unwrap(), 0.0);
        assert_eq!(huber_loss(0.5, 1.0).unwrap(), 0.125);
        assert_eq!(huber_loss(2.0, 1.0).unwrap(), 1.5);
        assert_eq!(huber_loss(-2.0, 1.0).unwrap(), 1.5);
    }

    #[test]
    fn huber_continuous_at_kappa() {
        for kappa in [0.8, 0.9, 1.0, 1.1, 1.2] {
            let inside = 0.5 * kappa * kappa;
            assert_eq!(huber_loss(kappa, kappa).unwrap(), inside);
            let just_out = huber_loss(kappa * (1.0 + 1e-12), kappa).unwrap();
            assert!((just_out - inside).abs() < 1e-9);
        }
    }

    #[test]
    fn huber_rejects_nonpositive_kappa() {
        assert!(matches!(huber_loss(1.0, 0.0), Err(Error::Config(_))));
        assert!(matches!(huber_loss(1.0, -1.0), Err(Error::Config(_))));
        assert!(huber_loss(1.0, f64::NAN).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        assert!((cross_entropy(&[0.0, 0.0], 0).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(cross_entropy(&[1000.0, 0.0], 0).unwrap().abs() < 1e-12);
        // -log(e^-1 / (e^1 + e^-1)) = 2 + log(1 + e^-2)
        let expected = 2.0 + (1.0 + (-2.0f64).exp()).ln();
        assert!((cross_entropy(&[1.0, -1.0], 1).unwrap() - expected).abs() < 1e-12);
        assert!((expected - 2.1269).abs() < 1e-4);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        assert!(matches!(cross_entropy(&[0.0, 0.0], 2), Err(Error::Input(_))));
    }

    #[test]
    fn stable_for_large_logits() {
        for l in [1e4, -1e4, 5e3] {
            let ce = cross_entropy(&[l, -l], 1).unwrap();
            assert!(ce.is_finite());
            assert!(softmax(&[l, -l]).iter().all(|p| p.is_finite()));
        }
    }
}
