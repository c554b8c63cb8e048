use super::NumericsError;

pub const DEFAULT_FD_STEP: f64 = 1e-5;

/// Scale below which a gradient entry is compared absolutely rather than
/// relatively in [`max_relative_error`].
const RELATIVE_FLOOR: f64 = 1e-6;

/// Central-difference gradient of `loss` at `theta`:
/// `(L(θ + h e_k) − L(θ − h e_k)) / 2h` per coordinate.
pub fn fd_gradient(
    mut loss: impl FnMut(&[f64]) -> f64,
    theta: &[f64],
    h: f64,
) -> Result<Vec<f64>, NumericsError> {
    if !(h > 0.0) {
        return Err(NumericsError::Config(format!("step must be positive, got {h}")));
    }
    let mut probe = theta.to_vec();
    let mut grad = Vec::with_capacity(theta.len());
    for k in 0..theta.len() {
        probe[k] = theta[k] + h;
        let up = loss(&probe);
        probe[k] = theta[k] - h;
        let down = loss(&probe);
        probe[k] = theta[k];
        for value in [up, down] {
            if !value.is_finite() {
                return Err(NumericsError::OracleFailure {
                    coordinate: k,
                    value,
                });
            }
        }
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// `max_k |a_k − b_k| / max(|a_k|, |b_k|, 1e-6)`.
pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient blocks differ in length");
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(RELATIVE_FLOOR))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{kl_divergence, softmax_temp};

    #[test]
    fn quadratic() {
        let g = fd_gradient(|t| 0.5 * t.iter().map(|v| v * v).sum::<f64>(), &[3.0, -2.0], 1e-5)
            .unwrap();
        assert!((g[0] - 3.0).abs() < 1e-7 && (g[1] + 2.0).abs() < 1e-7);
    }

    #[test]
    fn softmax_kl_gradients_at_uniform_logits() {
        let q = [0.75, 0.25];
        // KL(q || softmax(θ)) has logit gradient p − q.
        let reverse = fd_gradient(
            |t| kl_divergence(&q, &softmax_temp(t, 1.0).unwrap()).unwrap(),
            &[0.0, 0.0],
            DEFAULT_FD_STEP,
        )
        .unwrap();
        assert!((reverse[0] + 0.25).abs() < 1e-6, "{reverse:?}");
        assert!((reverse[1] - 0.25).abs() < 1e-6, "{reverse:?}");
        // KL(softmax(θ) || q): p_k (log(p_k/q_k) − KL), which at p = ½ is ±¼ ln 3.
        let forward = fd_gradient(
            |t| kl_divergence(&softmax_temp(t, 1.0).unwrap(), &q).unwrap(),
            &[0.0, 0.0],
            DEFAULT_FD_STEP,
        )
        .unwrap();
        let expected = 0.25 * (1.0f64 / 3.0).ln();
        assert!((forward[0] - expected).abs() < 1e-6, "{forward:?}");
        assert!((forward[1] + expected).abs() < 1e-6, "{forward:?}");
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let g = fd_gradient(|_| 4.2, &[1.0, 2.0, 3.0], DEFAULT_FD_STEP).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reports_failing_coordinate() {
        let err = fd_gradient(
            |t| if t[1] > 1.0 { f64::NAN } else { t[0] },
            &[0.0, 1.0],
            1e-3,
        )
        .unwrap_err();
        assert!(matches!(err, NumericsError::OracleFailure { coordinate: 1, .. }));
    }
}
