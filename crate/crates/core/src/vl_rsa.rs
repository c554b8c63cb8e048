//! Relative structural alignment between visual features and the text
//! reference geometry.
//!
//! Each domain owns a learnable visual anchor matrix (one row per class). A
//! feature is described by its cosine similarities to those anchors, and the
//! structural loss pulls that description towards the text reference
//! encoding of the sample's label.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{
    gaussian_matrix, kl_divergence, softmax_temp, Matrix, NumericsError, Tape, Var,
};
use crate::text_anchor::{relative_encoding, AnchorTag, RelativeEncoding};

pub const DEFAULT_TAU: f64 = 0.07;

#[derive(Debug, Error)]
pub enum AlignmentError {
    #[error("invalid loss configuration: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Form of the structural loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlignmentVariant {
    /// KL between tempered softmaxes of the two encodings.
    Kl,
    /// Mean absolute difference of the raw encodings.
    L1,
    /// Mean squared difference of the raw encodings.
    L2,
    None,
}

impl AlignmentVariant {
    pub const ALL: [AlignmentVariant; 4] = [
        AlignmentVariant::Kl,
        AlignmentVariant::L1,
        AlignmentVariant::L2,
        AlignmentVariant::None,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AlignmentVariant::Kl => "kl",
            AlignmentVariant::L1 => "l1",
            AlignmentVariant::L2 => "l2",
            AlignmentVariant::None => "none",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Temperature of the relational softmaxes (structural KL and anchor
    /// attention).
    pub tau: f64,
    /// Weight of the structural term in the combined objective.
    pub lambda: f64,
    pub variant: AlignmentVariant,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: DEFAULT_TAU,
            lambda: 0.5,
            variant: AlignmentVariant::Kl,
        }
    }
}

impl LossConfig {
    /// Validates ranges and returns non-fatal warnings.
    pub fn validate(&self) -> Result<Vec<String>, AlignmentError> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(AlignmentError::Config(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(AlignmentError::Config(format!(
                "lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        let mut warnings = Vec::new();
        if matches!(self.variant, AlignmentVariant::L1 | AlignmentVariant::L2)
            && self.tau != DEFAULT_TAU
        {
            warnings.push(format!(
                "tau = {} only affects anchor attention; the {} structural loss compares raw encodings",
                self.tau,
                self.variant.name()
            ));
        }
        Ok(warnings)
    }

    /// Whether the structural term contributes to the objective at all.
    pub fn aligns(&self) -> bool {
        self.variant != AlignmentVariant::None && self.lambda > 0.0
    }
}

/// `A^Vis_(t)`: learnable per-domain class anchors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualAnchorSet {
    pub domain: usize,
    pub anchors: Matrix,
    pub frozen: bool,
}

impl VisualAnchorSet {
    /// Seeded `N(0, 1/D)` initialisation.
    pub fn init<R: Rng + ?Sized>(domain: usize, n_classes: usize, dim: usize, rng: &mut R) -> Self {
        Self {
            domain,
            anchors: gaussian_matrix(rng, n_classes, dim, 1.0 / (dim as f64).sqrt()),
            frozen: false,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.anchors.rows()
    }
}

pub fn visual_relative_encoding(
    g: &[f64],
    anchors: &VisualAnchorSet,
) -> Result<RelativeEncoding, AlignmentError> {
    Ok(relative_encoding(
        g,
        &anchors.anchors,
        AnchorTag::Visual {
            domain: anchors.domain,
        },
    )?)
}

/// Structural loss between a visual relative encoding `r_g` and the text
/// reference `r_y`.
pub fn structural_loss(
    r_g: &RelativeEncoding,
    r_y: &RelativeEncoding,
    cfg: &LossConfig,
) -> Result<f64, AlignmentError> {
    if r_g.len() != r_y.len() {
        return Err(AlignmentError::Contract(format!(
            "encodings of length {} and {}",
            r_g.len(),
            r_y.len()
        )));
    }
    let n = r_g.len() as f64;
    let diffs = r_g.values.iter().zip(&r_y.values).map(|(a, b)| a - b);
    Ok(match cfg.variant {
        AlignmentVariant::Kl => kl_divergence(
            &softmax_temp(&r_g.values, cfg.tau)?,
            &softmax_temp(&r_y.values, cfg.tau)?,
        )?,
        AlignmentVariant::L1 => diffs.map(f64::abs).sum::<f64>() / n,
        AlignmentVariant::L2 => diffs.map(|d| d * d).sum::<f64>() / n,
        AlignmentVariant::None => 0.0,
    })
}

/// Records the structural loss for a 1×N encoding node against a fixed
/// reference. Returns `None` for the `none` variant.
pub fn record_structural_loss(
    tape: &mut Tape,
    r_g: Var,
    r_y: &[f64],
    cfg: &LossConfig,
) -> Result<Option<Var>, AlignmentError> {
    let n = tape.value(r_g).cols();
    if tape.value(r_g).rows() != 1 || n != r_y.len() {
        return Err(AlignmentError::Contract(format!(
            "encoding of width {n} against reference of length {}",
            r_y.len()
        )));
    }
    let loss = match cfg.variant {
        AlignmentVariant::Kl => {
            let p = tape.softmax_rows(r_g, cfg.tau)?;
            let log_p = tape.log(p)?;
            let q = softmax_temp(r_y, cfg.tau)?;
            let log_q = tape.constant(Matrix::from_vec(
                1,
                n,
                q.iter().map(|v| v.max(crate::numerics::EPS).ln()).collect(),
            )?);
            let ratio = tape.sub(log_p, log_q)?;
            tape.matmul_t(p, ratio)?
        }
        AlignmentVariant::L1 | AlignmentVariant::L2 => {
            let target = tape.constant(Matrix::row_vector(r_y)?);
            let diff = tape.sub(r_g, target)?;
            let total = if cfg.variant == AlignmentVariant::L1 {
                let a = tape.abs(diff)?;
                tape.sum(a)?
            } else {
                tape.matmul_t(diff, diff)?
            };
            tape.scale(total, 1.0 / n as f64)?
        }
        AlignmentVariant::None => return Ok(None),
    };
    Ok(Some(loss))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{fd_gradient, max_relative_error, DEFAULT_FD_STEP};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn enc(values: &[f64]) -> RelativeEncoding {
        RelativeEncoding {
            values: values.to_vec(),
            tag: AnchorTag::Other,
        }
    }

    fn cfg(variant: AlignmentVariant, tau: f64) -> LossConfig {
        LossConfig {
            tau,
            lambda: 1.0,
            variant,
        }
    }

    #[test]
    fn identical_encodings_give_zero_for_every_variant() {
        let r = enc(&[0.9, -0.2, 0.4]);
        for v in AlignmentVariant::ALL {
            assert_eq!(structural_loss(&r, &r, &cfg(v, 0.07)).unwrap(), 0.0, "{v:?}");
        }
    }

    #[test]
    fn hand_evaluated_examples() {
        let (g, y) = (enc(&[1.0, 0.0]), enc(&[0.0, 1.0]));
        let kl = structural_loss(&g, &y, &cfg(AlignmentVariant::Kl, 1.0)).unwrap();
        // p = [s, 1-s], q = [1-s, s] with s = σ(1): KL = (2s - 1)·1
        let s = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((kl - (2.0 * s - 1.0)).abs() < 1e-12);
        assert!((kl - 0.462_117_157_260_009_8).abs() < 1e-12);
        let l2 = structural_loss(&g, &y, &cfg(AlignmentVariant::L2, 1.0)).unwrap();
        assert_eq!(l2, 1.0);
        let l1 = structural_loss(&g, &y, &cfg(AlignmentVariant::L1, 1.0)).unwrap();
        assert_eq!(l1, 1.0);
        assert!(structural_loss(&g, &enc(&[1.0]), &cfg(AlignmentVariant::Kl, 1.0)).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().unwrap().is_empty());
        assert!(cfg(AlignmentVariant::Kl, 0.0).validate().is_err());
        let neg = LossConfig {
            lambda: -0.1,
            ..LossConfig::default()
        };
        assert!(neg.validate().is_err());
        assert_eq!(cfg(AlignmentVariant::L2, 1.0).validate().unwrap().len(), 1);
        assert!(cfg(AlignmentVariant::L2, DEFAULT_TAU).validate().unwrap().is_empty());
    }

    #[test]
    fn one_hot_against_orthonormal_anchors() {
        let set = VisualAnchorSet {
            domain: 0,
            anchors: Matrix::identity(4),
            frozen: false,
        };
        let r = visual_relative_encoding(&[0.0, 0.0, 2.5, 0.0], &set).unwrap();
        assert_eq!(r.values, vec![0.0, 0.0, 1.0, 0.0]);
        assert_eq!(r.tag, AnchorTag::Visual { domain: 0 });
        assert!(visual_relative_encoding(&[1.0], &set).is_err());
    }

    // At τ = 0.07 the third derivative is large enough that a plain central
    // difference has truncation error near the tolerance; combining steps h
    // and h/2 cancels the h² term.
    fn richardson(mut f: impl FnMut(&[f64]) -> f64, theta: &[f64]) -> Vec<f64> {
        let coarse = fd_gradient(&mut f, theta, 4.0 * DEFAULT_FD_STEP).unwrap();
        let fine = fd_gradient(&mut f, theta, 2.0 * DEFAULT_FD_STEP).unwrap();
        coarse.iter().zip(&fine).map(|(c, f)| (4.0 * f - c) / 3.0).collect()
    }

    fn tape_loss(g: &Matrix, anchors: &Matrix, r_y: &[f64], c: &LossConfig) -> (f64, Matrix, Matrix) {
        let mut tape = Tape::new();
        let gv = tape.leaf(g.clone());
        let av = tape.leaf(anchors.clone());
        let r = tape.cosine_rows(gv, av).unwrap();
        let l = record_structural_loss(&mut tape, r, r_y, c).unwrap().unwrap();
        let grads = tape.backward(l).unwrap();
        (tape.scalar(l), grads.get_or_zeros(&tape, gv), grads.get_or_zeros(&tape, av))
    }

    #[test]
    fn tape_loss_matches_plain_and_finite_differences() {
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for &(n, d) in &[(3, 4), (5, 8), (8, 6)] {
                let g = gaussian_matrix(&mut rng, 1, d, 1.0);
                let anchors = gaussian_matrix(&mut rng, n, d, 0.5);
                // A reference from a nearby vector keeps the loss O(1), as in
                // training; a fully random one is paired with τ = 1.
                let near = g.add(&gaussian_matrix(&mut rng, 1, d, 0.3)).unwrap();
                let near_ref = relative_encoding(near.as_slice(), &anchors, AnchorTag::Other)
                    .unwrap()
                    .values;
                let random_ref: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
                let cases = [
                    (AlignmentVariant::Kl, 0.07, &near_ref),
                    (AlignmentVariant::Kl, 1.0, &random_ref),
                    (AlignmentVariant::L1, DEFAULT_TAU, &random_ref),
                    (AlignmentVariant::L2, DEFAULT_TAU, &near_ref),
                ];
                for (variant, tau, r_y) in cases {
                    let c = cfg(variant, tau);
                    let r_y = r_y.as_slice();
                    let (value, dg, da) = tape_loss(&g, &anchors, r_y, &c);
                    let set = VisualAnchorSet { domain: 0, anchors: anchors.clone(), frozen: false };
                    let plain = structural_loss(
                        &visual_relative_encoding(g.as_slice(), &set).unwrap(),
                        &enc(r_y),
                        &c,
                    )
                    .unwrap();
                    assert!((value - plain).abs() <= 1e-12, "{variant:?}: {value} vs {plain}");

                    let loss_at = |gm: &[f64], am: &[f64]| {
                        let set = VisualAnchorSet {
                            domain: 0,
                            anchors: Matrix::from_vec(n, d, am.to_vec()).unwrap(),
                            frozen: false,
                        };
                        structural_loss(&visual_relative_encoding(gm, &set).unwrap(), &enc(r_y), &c)
                            .unwrap()
                    };
                    let fd_a = richardson(|t| loss_at(g.as_slice(), t), anchors.as_slice());
                    let fd_g = richardson(|t| loss_at(t, anchors.as_slice()), g.as_slice());
                    let ea = max_relative_error(da.as_slice(), &fd_a);
                    let eg = max_relative_error(dg.as_slice(), &fd_g);
                    assert!(ea <= 1e-4 && eg <= 1e-4, "{variant:?} seed {seed}: {ea} {eg}");
                }
            }
        }
    }

    #[test]
    fn kl_gradient_vanishes_at_the_reference() {
        let r = [0.8, 0.1, -0.3, 0.5];
        let c = cfg(AlignmentVariant::Kl, 0.07);
        let mut tape = Tape::new();
        let rg = tape.leaf(Matrix::row_vector(&r).unwrap());
        let l = record_structural_loss(&mut tape, rg, &r, &c).unwrap().unwrap();
        assert!(tape.scalar(l).abs() < 1e-12);
        let g = tape.backward(l).unwrap();
        assert!(g.get(rg).unwrap().max_abs() <= 1e-8);
    }

    #[test]
    fn none_variant_records_nothing() {
        let mut tape = Tape::new();
        let rg = tape.leaf(Matrix::row_vector(&[0.1, 0.2]).unwrap());
        let out = record_structural_loss(&mut tape, rg, &[0.0, 1.0], &cfg(AlignmentVariant::None, 1.0));
        assert!(out.unwrap().is_none());
    }

    #[test]
    fn anchor_init_is_seeded() {
        let a = VisualAnchorSet::init(1, 4, 16, &mut ChaCha8Rng::seed_from_u64(5));
        let b = VisualAnchorSet::init(1, 4, 16, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
        assert_eq!(a.anchors.shape(), (4, 16));
    }
}
