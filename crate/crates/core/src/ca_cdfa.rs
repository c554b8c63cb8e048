//! Class-aware attention over the anchor pools of every domain seen so far.
//!
//! Keys are the concatenated visual anchors of domains `0..=t`; values are
//! the matching prototype anchors, or the visual anchors themselves in share
//! mode. The attended value is added back onto the feature before the
//! domain classifier.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{
    gaussian_matrix, softmax_temp, Matrix, NumericsError, Tape, Var, EPS,
};
use crate::text_anchor::{relative_encoding, AnchorTag};
use crate::vl_rsa::{record_structural_loss, AlignmentError, LossConfig};

#[derive(Debug, Error)]
pub enum AggregationError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("missing state: {0}")]
    State(String),
    #[error(transparent)]
    Alignment(#[from] AlignmentError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// `V^proto_(t)`: learnable per-domain class prototypes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeAnchorSet {
    pub domain: usize,
    pub values: Matrix,
    pub frozen: bool,
}

impl PrototypeAnchorSet {
    pub fn init<R: Rng + ?Sized>(domain: usize, n_classes: usize, dim: usize, rng: &mut R) -> Self {
        Self {
            domain,
            values: gaussian_matrix(rng, n_classes, dim, 1.0 / (dim as f64).sqrt()),
            frozen: false,
        }
    }
}

/// Where attention values come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueSource {
    Prototypes,
    /// Share mode: the visual anchor pool serves as keys and values.
    VisualAnchors,
}

impl ValueSource {
    pub fn from_share(share: bool) -> Self {
        if share {
            ValueSource::VisualAnchors
        } else {
            ValueSource::Prototypes
        }
    }
}

/// Row-stacked keys and values. Block `d` (rows `d·N_c..(d+1)·N_c`) belongs
/// to domain `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalKeyValue {
    pub keys: Matrix,
    pub values: Matrix,
    pub block_rows: usize,
}

impl GlobalKeyValue {
    pub fn from_blocks(keys: &[&Matrix], values: &[&Matrix]) -> Result<Self, AggregationError> {
        if keys.is_empty() {
            return Err(AggregationError::Contract("empty key set".into()));
        }
        if keys.len() != values.len() {
            return Err(AggregationError::Contract(format!(
                "{} key blocks but {} value blocks",
                keys.len(),
                values.len()
            )));
        }
        let block_rows = keys[0].rows();
        if keys.iter().chain(values).any(|m| m.rows() != block_rows) {
            return Err(AggregationError::Contract(
                "every block must have one row per class".into(),
            ));
        }
        Ok(Self {
            keys: Matrix::vstack(keys)?,
            values: Matrix::vstack(values)?,
            block_rows,
        })
    }

    pub fn domains(&self) -> usize {
        self.keys.rows() / self.block_rows
    }

    pub fn block_range(&self, domain: usize) -> std::ops::Range<usize> {
        domain * self.block_rows..(domain + 1) * self.block_rows
    }
}

/// Softmax over the cosine similarities of `g` against every key.
pub fn global_attention(g: &[f64], kv: &GlobalKeyValue, tau: f64) -> Result<Vec<f64>, AggregationError> {
    if kv.keys.rows() == 0 {
        return Err(AggregationError::Contract("empty key set".into()));
    }
    let r = relative_encoding(g, &kv.keys, AnchorTag::Global { domains: kv.domains() })?;
    Ok(softmax_temp(&r.values, tau)?)
}

/// `alpha · V + g`.
pub fn aggregate(alpha: &[f64], kv: &GlobalKeyValue, g: &[f64]) -> Result<Vec<f64>, AggregationError> {
    if alpha.len() != kv.values.rows() || g.len() != kv.values.cols() {
        return Err(AggregationError::Contract(format!(
            "{} weights and a {}-dim feature against {:?} values",
            alpha.len(),
            g.len(),
            kv.values.shape()
        )));
    }
    let mut f = g.to_vec();
    for (&a, row) in alpha.iter().zip(kv.values.row_iter()) {
        for (fi, v) in f.iter_mut().zip(row) {
            *fi += a * v;
        }
    }
    Ok(f)
}

/// `ψ_(t)`: linear map to class logits, `W f + b` with `W` stored N_c × D.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainClassifier {
    pub weights: Matrix,
    pub bias: Matrix,
    pub frozen: bool,
}

impl DomainClassifier {
    pub fn init<R: Rng + ?Sized>(n_classes: usize, dim: usize, rng: &mut R) -> Self {
        Self {
            weights: gaussian_matrix(rng, n_classes, dim, 1.0 / (dim as f64).sqrt()),
            bias: Matrix::zeros(1, n_classes),
            frozen: false,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.weights.rows()
    }

    pub fn logits(&self, f: &[f64]) -> Result<Vec<f64>, AggregationError> {
        if f.len() != self.weights.cols() {
            return Err(AggregationError::Contract(format!(
                "{}-dim feature into a {}-dim classifier",
                f.len(),
                self.weights.cols()
            )));
        }
        Ok(self
            .weights
            .row_iter()
            .zip(self.bias.as_slice())
            .map(|(w, b)| crate::numerics::dot(w, f) + b)
            .collect())
    }
}

/// `−ln softmax(logits)[label]`, guarded at `ε`.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64, AggregationError> {
    if label >= logits.len() {
        return Err(AggregationError::Contract(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let p = softmax_temp(logits, 1.0)?;
    Ok(-p[label].max(EPS).ln())
}

pub fn combined_loss(
    logits: &[f64],
    label: usize,
    l_struct: f64,
    lambda: f64,
) -> Result<f64, AggregationError> {
    if !(lambda >= 0.0) {
        return Err(AggregationError::Contract(format!("lambda {lambda} is negative")));
    }
    Ok(cross_entropy(logits, label)? + lambda * l_struct)
}

/// Index of the largest logit, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
            if v > bv {
                (i, v)
            } else {
                (bi, bv)
            }
        })
        .0
}

/// Tape handles of the head parameters for one forward pass at stage `t`.
/// `visual` and `values` hold one node per domain `0..=t`; nodes of earlier
/// domains are recorded as constants by the caller.
#[derive(Debug, Clone)]
pub struct HeadVars {
    pub visual: Vec<Var>,
    pub values: Vec<Var>,
    pub weights: Var,
    pub bias: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct HeadOutput {
    pub logits: Var,
    pub cross_entropy: Var,
    pub structural: Option<Var>,
    pub loss: Var,
}

/// Records attention, aggregation, the classifier and the combined loss for
/// one 1×D feature `g`. With `aggregate_pools` off the classifier sees `g`
/// directly.
pub fn record_head(
    tape: &mut Tape,
    g: Var,
    vars: &HeadVars,
    label: usize,
    reference: &[f64],
    loss_cfg: &LossConfig,
    aggregate_pools: bool,
) -> Result<HeadOutput, AggregationError> {
    let current = *vars
        .visual
        .last()
        .ok_or_else(|| AggregationError::State("no visual anchor pool".into()))?;
    if vars.values.len() != vars.visual.len() {
        return Err(AggregationError::State(format!(
            "{} key pools but {} value pools",
            vars.visual.len(),
            vars.values.len()
        )));
    }
    let n_classes = tape.value(vars.weights).rows();
    if label >= n_classes {
        return Err(AggregationError::Contract(format!(
            "label {label} out of range for {n_classes} classes"
        )));
    }

    let f = if aggregate_pools {
        let keys = tape.concat_rows(&vars.visual)?;
        let values = tape.concat_rows(&vars.values)?;
        let scores = tape.cosine_rows(g, keys)?;
        let alpha = tape.softmax_rows(scores, loss_cfg.tau)?;
        let attended = tape.matmul(alpha, values)?;
        tape.add(attended, g)?
    } else {
        g
    };
    let raw = tape.matmul_t(f, vars.weights)?;
    let logits = tape.add(raw, vars.bias)?;

    let probs = tape.softmax_rows(logits, 1.0)?;
    let log_probs = tape.log(probs)?;
    let picker = tape.constant(Matrix::from_fn(1, n_classes, |_, c| {
        if c == label {
            -1.0
        } else {
            0.0
        }
    }));
    let cross_entropy = tape.matmul_t(log_probs, picker)?;

    let structural = if loss_cfg.aligns() {
        let r_g = tape.cosine_rows(g, current)?;
        record_structural_loss(tape, r_g, reference, loss_cfg)?
    } else {
        None
    };
    let loss = match structural {
        Some(s) => {
            let weighted = tape.scale(s, loss_cfg.lambda)?;
            tape.add(cross_entropy, weighted)?
        }
        None => cross_entropy,
    };
    Ok(HeadOutput {
        logits,
        cross_entropy,
        structural,
        loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{fd_gradient, max_relative_error, random_orthonormal, DEFAULT_FD_STEP};
    use crate::vl_rsa::AlignmentVariant;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn kv(rng: &mut ChaCha8Rng, t: usize, n: usize, d: usize) -> GlobalKeyValue {
        let keys: Vec<Matrix> = (0..t).map(|_| gaussian_matrix(rng, n, d, 1.0)).collect();
        let values: Vec<Matrix> = (0..t).map(|_| gaussian_matrix(rng, n, d, 1.0)).collect();
        GlobalKeyValue::from_blocks(
            &keys.iter().collect::<Vec<_>>(),
            &values.iter().collect::<Vec<_>>(),
        )
        .unwrap()
    }

    #[test]
    fn attention_shapes_and_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let one = kv(&mut rng, 1, 5, 6);
        assert_eq!(global_attention(&[1.0; 6], &one, 0.07).unwrap().len(), 5);
        assert_eq!(one.domains(), 1);

        let key = Matrix::from_fn(6, 4, |_, c| c as f64 + 1.0);
        let same = GlobalKeyValue::from_blocks(&[&key, &key], &[&key, &key]).unwrap();
        let alpha = global_attention(&[0.3, -1.0, 2.0, 0.5], &same, 0.07).unwrap();
        for a in alpha {
            assert!((a - 1.0 / 12.0).abs() < 1e-15);
        }
        assert!(GlobalKeyValue::from_blocks(&[], &[]).is_err());
    }

    #[test]
    fn sharp_attention_is_one_hot() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let basis = random_orthonormal(&mut rng, 8, 6).transpose();
        let kv = GlobalKeyValue::from_blocks(&[&basis.row_block(0, 3), &basis.row_block(3, 6)], &[
            &basis.row_block(0, 3),
            &basis.row_block(3, 6),
        ])
        .unwrap();
        let g: Vec<f64> = basis.row(4).iter().map(|v| 3.0 * v).collect();
        let alpha = global_attention(&g, &kv, 1e-3).unwrap();
        for (k, a) in alpha.iter().enumerate() {
            let expected = if k == 4 { 1.0 } else { 0.0 };
            assert!((a - expected).abs() < 1e-6, "{alpha:?}");
        }
    }

    #[test]
    fn aggregate_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = [0.5, -1.0, 2.0, 0.0];
        let zero = Matrix::zeros(3, 4);
        let key = gaussian_matrix(&mut rng, 3, 4, 1.0);
        let z = GlobalKeyValue::from_blocks(&[&key, &key], &[&zero, &zero]).unwrap();
        assert_eq!(aggregate(&[1.0 / 6.0; 6], &z, &g).unwrap(), g.to_vec());

        let full = kv(&mut rng, 2, 3, 4);
        let mut one_hot = vec![0.0; 6];
        one_hot[4] = 1.0;
        let f = aggregate(&one_hot, &full, &g).unwrap();
        for (c, fc) in f.iter().enumerate() {
            assert_eq!(*fc, full.values.get(4, c) + g[c]);
        }
        assert!(aggregate(&[1.0; 5], &full, &g).is_err());
    }

    #[test]
    fn aggregate_matches_dense_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let full = kv(&mut rng, 2, 3, 4);
        let g = gaussian_matrix(&mut rng, 1, 4, 1.0);
        let alpha = global_attention(g.as_slice(), &full, 0.5).unwrap();
        let dense = Matrix::row_vector(&alpha)
            .unwrap()
            .matmul(&full.values)
            .unwrap()
            .add(&g)
            .unwrap();
        let f = aggregate(&alpha, &full, g.as_slice()).unwrap();
        assert!(max_relative_error(&f, dense.as_slice()) < 1e-14);
    }

    #[test]
    fn loss_examples() {
        let ce = cross_entropy(&[0.0; 4], 2).unwrap();
        assert!((ce - 4f64.ln()).abs() < 1e-15);
        assert!((ce - 1.386_294_361_119_890_6).abs() < 1e-12);
        assert_eq!(combined_loss(&[0.0; 4], 2, 0.7, 0.0).unwrap(), ce);
        let l = combined_loss(&[0.0; 4], 2, 0.5, 0.2).unwrap();
        assert!((l - (ce + 0.1)).abs() < 1e-15);
        assert!(cross_entropy(&[0.0; 4], 4).is_err());
        assert!(combined_loss(&[0.0; 4], 0, 0.5, -1.0).is_err());
    }

    #[test]
    fn argmax_breaks_ties_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0]), 0);
    }

    fn toy_loss(theta: &[Matrix], frozen: &[Matrix], label: usize, reference: &[f64], cfg: &LossConfig, share: bool) -> (f64, Vec<Matrix>, Vec<Option<Matrix>>) {
        let mut tape = Tape::new();
        let leaves: Vec<Var> = theta.iter().map(|m| tape.leaf(m.clone())).collect();
        let fixed: Vec<Var> = frozen.iter().map(|m| tape.constant(m.clone())).collect();
        // theta: [g, visual_t, proto_t, W, b]; frozen: [visual_0, proto_0]
        let vars = HeadVars {
            visual: vec![fixed[0], leaves[1]],
            values: if share {
                vec![fixed[0], leaves[1]]
            } else {
                vec![fixed[1], leaves[2]]
            },
            weights: leaves[3],
            bias: leaves[4],
        };
        let out = record_head(&mut tape, leaves[0], &vars, label, reference, cfg, true).unwrap();
        let grads = tape.backward(out.loss).unwrap();
        (
            tape.scalar(out.loss),
            leaves.iter().map(|&v| grads.get_or_zeros(&tape, v)).collect(),
            fixed.iter().map(|&v| grads.get(v).cloned()).collect(),
        )
    }

    #[test]
    fn head_gradients_match_finite_differences() {
        let (n, d) = (4, 6);
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let theta: Vec<Matrix> = vec![
                gaussian_matrix(&mut rng, 1, d, 1.0),
                gaussian_matrix(&mut rng, n, d, 0.5),
                gaussian_matrix(&mut rng, n, d, 0.5),
                gaussian_matrix(&mut rng, n, d, 0.5),
                gaussian_matrix(&mut rng, 1, n, 0.1),
            ];
            let frozen = vec![gaussian_matrix(&mut rng, n, d, 0.5), gaussian_matrix(&mut rng, n, d, 0.5)];
            let reference: Vec<f64> = (0..n).map(|c| if c == 1 { 1.0 } else { 0.2 }).collect();
            for share in [false, true] {
                let cfg = LossConfig {
                    tau: 0.5,
                    lambda: 0.7,
                    variant: AlignmentVariant::Kl,
                };
                let (_, grads, frozen_grads) = toy_loss(&theta, &frozen, 1, &reference, &cfg, share);
                assert!(frozen_grads.iter().all(Option::is_none));
                for (k, block) in theta.iter().enumerate() {
                    if share && k == 2 {
                        assert_eq!(grads[k].max_abs(), 0.0);
                        continue;
                    }
                    let fd = fd_gradient(
                        |x| {
                            let mut probe = theta.clone();
                            probe[k] = Matrix::from_vec(block.rows(), block.cols(), x.to_vec()).unwrap();
                            toy_loss(&probe, &frozen, 1, &reference, &cfg, share).0
                        },
                        block.as_slice(),
                        DEFAULT_FD_STEP,
                    )
                    .unwrap();
                    let err = max_relative_error(grads[k].as_slice(), &fd);
                    assert!(err <= 1e-4, "seed {seed} share {share} block {k}: {err}");
                }
            }
        }
    }

    #[test]
    fn tape_head_matches_plain_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (n, d) = (3, 5);
        let g = gaussian_matrix(&mut rng, 1, d, 1.0);
        let full = kv(&mut rng, 2, n, d);
        let clf = DomainClassifier::init(n, d, &mut rng);
        let cfg = LossConfig {
            lambda: 0.0,
            ..LossConfig::default()
        };
        let mut tape = Tape::new();
        let gv = tape.constant(g.clone());
        let blocks = |m: &Matrix, tape: &mut Tape| {
            vec![tape.constant(m.row_block(0, n)), tape.constant(m.row_block(n, 2 * n))]
        };
        let vars = HeadVars {
            visual: blocks(&full.keys, &mut tape),
            values: blocks(&full.values, &mut tape),
            weights: tape.constant(clf.weights.clone()),
            bias: tape.constant(clf.bias.clone()),
        };
        let out = record_head(&mut tape, gv, &vars, 0, &[0.0; 3], &cfg, true).unwrap();
        let alpha = global_attention(g.as_slice(), &full, cfg.tau).unwrap();
        let logits = clf.logits(&aggregate(&alpha, &full, g.as_slice()).unwrap()).unwrap();
        assert!(max_relative_error(tape.value(out.logits).as_slice(), &logits) < 1e-13);
        let ce = cross_entropy(&logits, 0).unwrap();
        assert!((tape.scalar(out.loss) - ce).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn attention_is_a_strict_simplex(seed in 0u64..1000, t in 1usize..4, tau in 0.05f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let kv = kv(&mut rng, t, 3, 4);
            let g = gaussian_matrix(&mut rng, 1, 4, 1.0);
            let alpha = global_attention(g.as_slice(), &kv, tau).unwrap();
            prop_assert!((alpha.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(alpha.iter().all(|&a| a > 0.0));
        }

        // Cosine keys normalise away any scale; a power-of-two factor is
        // exact in floating point, so the weights match bitwise.
        #[test]
        fn key_scaling_leaves_attention_unchanged(seed in 0u64..1000, exp in -8i32..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let base = kv(&mut rng, 2, 3, 4);
            let scaled = GlobalKeyValue {
                keys: base.keys.scale(2f64.powi(exp)),
                ..base.clone()
            };
            let g = gaussian_matrix(&mut rng, 1, 4, 1.0);
            let a = global_attention(g.as_slice(), &base, 0.07).unwrap();
            let b = global_attention(g.as_slice(), &scaled, 0.07).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert_eq!(
                aggregate(&a, &base, g.as_slice()).unwrap(),
                aggregate(&b, &scaled, g.as_slice()).unwrap()
            );
        }

        #[test]
        fn key_scaling_by_any_positive_factor_is_near_exact(seed in 0u64..1000, c in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let base = kv(&mut rng, 2, 3, 4);
            let scaled = GlobalKeyValue { keys: base.keys.scale(c), ..base.clone() };
            let g = gaussian_matrix(&mut rng, 1, 4, 1.0);
            let a = global_attention(g.as_slice(), &base, 0.07).unwrap();
            let b = global_attention(g.as_slice(), &scaled, 0.07).unwrap();
            prop_assert!(max_relative_error(&a, &b) < 1e-10);
        }
    }
}
