//! Dense `f64` linear algebra, the scalar primitives shared by every loss
//! path (cosine similarity, tempered softmax, KL divergence), a small
//! reverse-mode tape and the central-difference gradient oracle.

mod fd;
mod matrix;
mod random;
pub mod tape;

pub use fd::{fd_gradient, max_relative_error, DEFAULT_FD_STEP};
pub use matrix::{dot, norm, Matrix};
pub use random::{gaussian_matrix, random_orthonormal, uniform_rotation};
pub use tape::{Gradients, Tape, Var};

use thiserror::Error;

/// Guard used for norms and logarithms.
pub const EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("finite-difference oracle failed at coordinate {coordinate}: loss is {value}")]
    OracleFailure { coordinate: usize, value: f64 },
}

/// Cosine similarity with the result clamped to `[-1, 1]`.
///
/// Returns the value together with a flag that is set when either input has
/// a norm below [`EPS`]; in that case the value is 0.
pub fn cosine_similarity_flagged(u: &[f64], v: &[f64]) -> Result<(f64, bool), NumericsError> {
    if u.len() != v.len() {
        return Err(NumericsError::DimensionMismatch(format!(
            "cosine of length {} against length {}",
            u.len(),
            v.len()
        )));
    }
    let nu = norm(u);
    let nv = norm(v);
    let degenerate = nu <= EPS || nv <= EPS;
    let c = dot(u, v) / (nu.max(EPS) * nv.max(EPS));
    Ok((c.clamp(-1.0, 1.0), degenerate))
}

/// Cosine similarity `u·v / (max(‖u‖,ε)·max(‖v‖,ε))`, clamped to `[-1, 1]`.
/// A degenerate (near-zero) input yields 0 and a logged warning.
pub fn cosine_similarity(u: &[f64], v: &[f64]) -> Result<f64, NumericsError> {
    let (c, degenerate) = cosine_similarity_flagged(u, v)?;
    if degenerate {
        log::warn!("cosine similarity on a near-zero vector; returning {c}");
    }
    Ok(c)
}

/// `softmax(x / tau)` with max-subtraction.
pub fn softmax_temp(x: &[f64], tau: f64) -> Result<Vec<f64>, NumericsError> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(NumericsError::Config(format!(
            "softmax temperature must be positive, got {tau}"
        )));
    }
    if let Some(bad) = x.iter().find(|v| !v.is_finite()) {
        return Err(NumericsError::NonFinite(format!("softmax input {bad}")));
    }
    let mut out = vec![0.0; x.len()];
    softmax_into(x, tau, &mut out);
    Ok(out)
}

pub(crate) fn softmax_into(x: &[f64], tau: f64, out: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = ((v - max) / tau).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// `Σ p_c log(max(p_c,ε) / max(q_c,ε))`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64, NumericsError> {
    if p.len() != q.len() {
        return Err(NumericsError::DimensionMismatch(format!(
            "KL between lengths {} and {}",
            p.len(),
            q.len()
        )));
    }
    check_distribution(p, "p")?;
    check_distribution(q, "q")?;
    Ok(p
        .iter()
        .zip(q)
        .map(|(&pc, &qc)| pc * (pc.max(EPS).ln() - qc.max(EPS).ln()))
        .sum())
}

fn check_distribution(p: &[f64], name: &str) -> Result<(), NumericsError> {
    if p.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
        return Err(NumericsError::Contract(format!(
            "{name} has a negative or non-finite entry"
        )));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(NumericsError::Contract(format!("{name} sums to {s}, not 1")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn cosine_examples() {
        let v = [0.3, -1.2, 4.0];
        assert!((cosine_similarity(&v, &v).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let c = cosine_similarity(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
    }

    #[test]
    fn cosine_errors_and_degenerate_input() {
        assert!(matches!(
            cosine_similarity(&[1.0], &[1.0, 2.0]),
            Err(NumericsError::DimensionMismatch(_))
        ));
        let (c, flagged) = cosine_similarity_flagged(&[0.0, 0.0], &[1.0, 2.0]).unwrap();
        assert_eq!(c, 0.0);
        assert!(flagged);
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax_temp(&[0.0, 0.0], 0.3).unwrap(), vec![0.5, 0.5]);
        let p = softmax_temp(&[1.0, 0.0], 1.0).unwrap();
        // 1/(1+e^-1)
        assert!((p[0] - 0.731_058_578_630_004_9).abs() < 1e-12);
        assert!((p[1] - 0.268_941_421_369_995_1).abs() < 1e-12);
        let sharp = softmax_temp(&[1.0, 0.0], 1e-3).unwrap();
        assert!((sharp[0] - 1.0).abs() < 1e-9 && sharp[1] < 1e-9);
        assert!(matches!(
            softmax_temp(&[1.0], 0.0),
            Err(NumericsError::Config(_))
        ));
        assert!(softmax_temp(&[1.0], -1.0).is_err());
    }

    #[test]
    fn kl_examples() {
        let p = [0.2, 0.3, 0.5];
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
        // 0.5 ln(0.5/0.9) + 0.5 ln(0.5/0.1)
        let expected = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        let kl = kl_divergence(&[0.5, 0.5], &[0.9, 0.1]).unwrap();
        assert!((kl - expected).abs() < 1e-15);
        assert!((kl - 0.510_825_623_765_990_7).abs() < 1e-12);
        let kl = kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap();
        assert!((kl - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn kl_contract_violations() {
        assert!(matches!(
            kl_divergence(&[1.0], &[0.5, 0.5]),
            Err(NumericsError::DimensionMismatch(_))
        ));
        assert!(matches!(
            kl_divergence(&[0.7, 0.7], &[0.5, 0.5]),
            Err(NumericsError::Contract(_))
        ));
        assert!(kl_divergence(&[1.5, -0.5], &[0.5, 0.5]).is_err());
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one(x in prop::collection::vec(-50.0f64..50.0, 1..12), tau in 0.01f64..5.0) {
            let p = softmax_temp(&x, tau).unwrap();
            let s: f64 = p.iter().sum();
            prop_assert!((s - 1.0).abs() <= 1e-12);
            prop_assert!(p.iter().all(|&v| v > 0.0 || v == 0.0) && p.iter().all(|&v| v <= 1.0));
        }

        // Logits on a dyadic grid make the shift exact in floating point, so
        // the max-subtracted inputs and therefore the outputs match bitwise.
        #[test]
        fn softmax_shift_invariance_is_bitwise_on_exact_shifts(
            ints in prop::collection::vec(-4096i32..4096, 1..10),
            shift in -4096i32..4096,
            tau in 0.05f64..3.0,
        ) {
            let x: Vec<f64> = ints.iter().map(|&i| i as f64 / 1024.0).collect();
            let shifted: Vec<f64> = x.iter().map(|v| v + shift as f64 / 1024.0).collect();
            let a = softmax_temp(&x, tau).unwrap();
            let b = softmax_temp(&shifted, tau).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn softmax_shift_invariance_general(
            x in prop::collection::vec(-20.0f64..20.0, 1..10),
            shift in -1e3f64..1e3,
        ) {
            let shifted: Vec<f64> = x.iter().map(|v| v + shift).collect();
            let a = softmax_temp(&x, 0.5).unwrap();
            let b = softmax_temp(&shifted, 0.5).unwrap();
            for (u, v) in a.iter().zip(&b) {
                prop_assert!((u - v).abs() <= 1e-9);
            }
        }

        #[test]
        fn kl_is_nonnegative_and_zero_only_on_equality(
            a in prop::collection::vec(-3.0f64..3.0, 2..8),
            b in prop::collection::vec(-3.0f64..3.0, 2..8),
        ) {
            let n = a.len().min(b.len());
            let p = softmax_temp(&a[..n], 1.0).unwrap();
            let q = softmax_temp(&b[..n], 1.0).unwrap();
            let kl = kl_divergence(&p, &q).unwrap();
            prop_assert!(kl >= -1e-12);
            prop_assert!(kl_divergence(&p, &p).unwrap().abs() <= 1e-10);
            let max_gap = p.iter().zip(&q).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
            if max_gap > 1e-4 {
                prop_assert!(kl > 1e-10);
            }
        }

        #[test]
        fn cosine_in_range(
            u in prop::collection::vec(-10.0f64..10.0, 3),
            v in prop::collection::vec(-10.0f64..10.0, 3),
        ) {
            let c = cosine_similarity(&u, &v).unwrap();
            prop_assert!((-1.0..=1.0).contains(&c));
        }
    }
}
