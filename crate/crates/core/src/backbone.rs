//! Frozen toy transformer encoder with shallow prompt insertion.
//!
//! Pre-norm blocks (multi-head self-attention, then a GELU MLP), sinusoidal
//! positions added to patch tokens only, and a class token prepended to the
//! sequence. Every weight is drawn once from the configured seed and never
//! changes afterwards; gradients only ever reach the prompt tokens.
//!
//! Layer taps return the class-token row of the residual stream after a block,
//! passed through a parameter-free layer norm (the encoder's output norm).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{gaussian_matrix, random_orthonormal, Matrix, NumericsError, Tape, Var};

/// Amplitude of the sinusoidal position code added to patch tokens.
const POSITION_SCALE: f64 = 0.25;

#[derive(Debug, Error)]
pub enum BackboneError {
    #[error("invalid backbone configuration: {0}")]
    Config(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite activation in layer {layer}")]
    NonFinite { layer: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// How the attention value and output projections are drawn.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mixing {
    /// Independent Gaussian heads.
    Gaussian,
    /// Column blocks of one random orthonormal matrix, and an orthonormal
    /// output map. Keeps the geometry of the pooled tokens.
    Orthogonal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub depth: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub patch_count: usize,
    pub mixing: Mixing,
    /// Output scale of the second MLP layer, times `1/sqrt(hidden)`.
    pub mlp_gain: f64,
    /// Zero gives a zero class token, whose first-layer attention is uniform.
    pub class_token_std: f64,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            depth: 6,
            hidden_dim: 64,
            heads: 4,
            mlp_ratio: 4.0,
            patch_count: 16,
            mixing: Mixing::Orthogonal,
            mlp_gain: 0.25,
            class_token_std: 0.02,
            seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<(), BackboneError> {
        if self.depth < 2 {
            return Err(BackboneError::Config(format!(
                "depth must be at least 2, got {}",
                self.depth
            )));
        }
        if self.heads == 0 || self.hidden_dim == 0 || self.hidden_dim % self.heads != 0 {
            return Err(BackboneError::Config(format!(
                "hidden_dim {} must be a positive multiple of heads {}",
                self.hidden_dim, self.heads
            )));
        }
        if !(self.mlp_ratio > 0.0) || self.mlp_hidden() == 0 {
            return Err(BackboneError::Config(format!(
                "mlp_ratio {} gives an empty MLP",
                self.mlp_ratio
            )));
        }
        if self.patch_count == 0 {
            return Err(BackboneError::Config("patch_count must be at least 1".into()));
        }
        for (name, v) in [("mlp_gain", self.mlp_gain), ("class_token_std", self.class_token_std)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(BackboneError::Config(format!("{name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.heads
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.hidden_dim as f64 * self.mlp_ratio).round() as usize
    }
}

#[derive(Debug, Clone)]
struct Block {
    query: Vec<Matrix>,
    key: Vec<Matrix>,
    value: Vec<Matrix>,
    out: Matrix,
    fc1: Matrix,
    fc1_bias: Matrix,
    fc2: Matrix,
    fc2_bias: Matrix,
}

impl Block {
    fn matrices(&self) -> impl Iterator<Item = &Matrix> {
        self.query
            .iter()
            .chain(&self.key)
            .chain(&self.value)
            .chain([&self.out, &self.fc1, &self.fc1_bias, &self.fc2, &self.fc2_bias])
    }
}

/// Prompt tokens `P_(t)`, an `N_p × D` matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTokens {
    pub tokens: Matrix,
}

impl PromptTokens {
    pub fn empty(dim: usize) -> Self {
        Self {
            tokens: Matrix::zeros(0, dim),
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.rows() == 0
    }
}

/// `[x_cls, P, x_emb + positions]`, `(1 + N_p + patches) × D`.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptedSequence {
    pub tokens: Matrix,
    pub prompt_len: usize,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    config: BackboneConfig,
    class_token: Matrix,
    blocks: Vec<Block>,
}

impl Backbone {
    pub fn new(config: BackboneConfig) -> Result<Self, BackboneError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.hidden_dim;
        let dh = config.head_dim();
        let hidden = config.mlp_hidden();
        let class_token = gaussian_matrix(&mut rng, 1, d, config.class_token_std);
        let in_std = 1.0 / (d as f64).sqrt();
        let residual_std = in_std / (2.0 * config.depth as f64).sqrt();
        let mut blocks = Vec::with_capacity(config.depth);
        for _ in 0..config.depth {
            let query = (0..config.heads).map(|_| gaussian_matrix(&mut rng, d, dh, in_std)).collect();
            let key = (0..config.heads).map(|_| gaussian_matrix(&mut rng, d, dh, in_std)).collect();
            let (value, out) = match config.mixing {
                Mixing::Gaussian => {
                    let value = (0..config.heads).map(|_| gaussian_matrix(&mut rng, d, dh, in_std)).collect();
                    (value, gaussian_matrix(&mut rng, d, d, residual_std * 2.0))
                }
                Mixing::Orthogonal => {
                    let v = random_orthonormal(&mut rng, d, d);
                    let value = (0..config.heads)
                        .map(|h| Matrix::from_fn(d, dh, |r, c| v.get(r, h * dh + c)))
                        .collect();
                    (value, random_orthonormal(&mut rng, d, d))
                }
            };
            blocks.push(Block {
                query,
                key,
                value,
                out,
                fc1: gaussian_matrix(&mut rng, d, hidden, in_std),
                fc1_bias: gaussian_matrix(&mut rng, 1, hidden, 0.1),
                fc2: gaussian_matrix(&mut rng, hidden, d, config.mlp_gain / (hidden as f64).sqrt()),
                fc2_bias: Matrix::zeros(1, d),
            });
        }
        Ok(Self {
            config,
            class_token,
            blocks,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn depth(&self) -> usize {
        self.config.depth
    }

    pub fn dim(&self) -> usize {
        self.config.hidden_dim
    }

    /// Little-endian image of every frozen weight, in a fixed order.
    pub fn weight_bytes(&self) -> Vec<u8> {
        let mut out = self.class_token.to_le_bytes();
        for block in &self.blocks {
            for m in block.matrices() {
                out.extend(m.to_le_bytes());
            }
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.class_token.len()
            + self
                .blocks
                .iter()
                .flat_map(Block::matrices)
                .map(Matrix::len)
                .sum::<usize>()
    }

    fn check_patches(&self, x_emb: &Matrix) -> Result<(), BackboneError> {
        if x_emb.cols() != self.dim() || x_emb.rows() == 0 {
            return Err(BackboneError::Dimension(format!(
                "patch tokens are {}x{}, expected n x {} with n >= 1",
                x_emb.rows(),
                x_emb.cols(),
                self.dim()
            )));
        }
        Ok(())
    }

    fn positioned(&self, x_emb: &Matrix) -> Matrix {
        x_emb
            .add(&positional_encoding(x_emb.rows(), x_emb.cols()))
            .expect("shapes agree by construction")
    }

    /// Assembles `[x_cls, P, x_emb]` with positions added to the patches.
    pub fn build_prompted_sequence(
        &self,
        x_emb: &Matrix,
        prompt: &PromptTokens,
    ) -> Result<PromptedSequence, BackboneError> {
        self.check_patches(x_emb)?;
        if prompt.tokens.cols() != self.dim() {
            return Err(BackboneError::Dimension(format!(
                "prompt width {} differs from hidden dim {}",
                prompt.tokens.cols(),
                self.dim()
            )));
        }
        let tokens = Matrix::vstack(&[&self.class_token, &prompt.tokens, &self.positioned(x_emb)])?;
        Ok(PromptedSequence {
            tokens,
            prompt_len: prompt.len(),
        })
    }

    /// Records the prompted sequence on `tape` with `prompt` as an existing
    /// node (a leaf while training, a constant at inference).
    pub fn record_sequence(
        &self,
        tape: &mut Tape,
        x_emb: &Matrix,
        prompt: Var,
    ) -> Result<Var, BackboneError> {
        self.check_patches(x_emb)?;
        if tape.value(prompt).cols() != self.dim() {
            return Err(BackboneError::Dimension("prompt width differs from hidden dim".into()));
        }
        let cls = tape.constant(self.class_token.clone());
        let patches = tape.constant(self.positioned(x_emb));
        Ok(tape.concat_rows(&[cls, prompt, patches])?)
    }

    /// Runs the blocks over a recorded sequence and returns the normalised
    /// class-token feature after each requested layer (1-based, ascending,
    /// deduplicated by the caller). Work stops after the deepest tap.
    pub fn record_taps(
        &self,
        tape: &mut Tape,
        sequence: Var,
        layers: &[usize],
    ) -> Result<Vec<Var>, BackboneError> {
        self.check_layers(layers)?;
        let last = *layers.iter().max().expect("non-empty layer set");
        let n = tape.value(sequence).rows();
        let selector = tape.constant(Matrix::from_fn(1, n, |_, c| if c == 0 { 1.0 } else { 0.0 }));
        let tau = (self.config.head_dim() as f64).sqrt();

        let mut x = sequence;
        let mut taps = Vec::with_capacity(layers.len());
        for (idx, block) in self.blocks.iter().take(last).enumerate() {
            let layer = idx + 1;
            let class_only = layer == last;
            let wrap = |e: NumericsError| match e {
                NumericsError::NonFinite(_) => BackboneError::NonFinite { layer },
                other => BackboneError::Numerics(other),
            };
            let step = |tape: &mut Tape| -> Result<Var, NumericsError> {
                let h = tape.layer_norm(x)?;
                let query_rows = if class_only { tape.matmul(selector, h)? } else { h };
                let mut heads = Vec::with_capacity(block.query.len());
                for ((wq, wk), wv) in block.query.iter().zip(&block.key).zip(&block.value) {
                    let wq = tape.constant(wq.clone());
                    let wk = tape.constant(wk.clone());
                    let wv = tape.constant(wv.clone());
                    let q = tape.matmul(query_rows, wq)?;
                    let k = tape.matmul(h, wk)?;
                    let v = tape.matmul(h, wv)?;
                    let scores = tape.matmul_t(q, k)?;
                    let attn = tape.softmax_rows(scores, tau)?;
                    heads.push(tape.matmul(attn, v)?);
                }
                let joined = tape.concat_cols(&heads)?;
                let wo = tape.constant(block.out.clone());
                let attended = tape.matmul(joined, wo)?;
                let residual = if class_only { tape.matmul(selector, x)? } else { x };
                let x1 = tape.add(residual, attended)?;

                let h2 = tape.layer_norm(x1)?;
                let fc1 = tape.constant(block.fc1.clone());
                let b1 = tape.constant(block.fc1_bias.clone());
                let fc2 = tape.constant(block.fc2.clone());
                let b2 = tape.constant(block.fc2_bias.clone());
                let z = tape.matmul(h2, fc1)?;
                let z = tape.add(z, b1)?;
                let z = tape.gelu(z)?;
                let z = tape.matmul(z, fc2)?;
                let z = tape.add(z, b2)?;
                tape.add(x1, z)
            };
            x = step(tape).map_err(wrap)?;
            if layers.contains(&layer) {
                let cls = if class_only {
                    x
                } else {
                    tape.matmul(selector, x).map_err(wrap)?
                };
                taps.push(tape.layer_norm(cls).map_err(wrap)?);
            }
        }
        Ok(taps)
    }

    fn check_layers(&self, layers: &[usize]) -> Result<(), BackboneError> {
        if layers.is_empty() {
            return Err(BackboneError::Config("empty layer set".into()));
        }
        if let Some(bad) = layers.iter().find(|&&l| l == 0 || l > self.depth()) {
            return Err(BackboneError::Config(format!(
                "layer {bad} outside 1..={}",
                self.depth()
            )));
        }
        Ok(())
    }

    /// Final-layer class-token feature `g` (length D).
    pub fn encode(&self, sequence: &PromptedSequence) -> Result<Vec<f64>, BackboneError> {
        Ok(self
            .encode_with_taps(sequence, &[self.depth()])?
            .pop()
            .expect("one tap"))
    }

    /// Class-token feature after each layer in `layers`, returned in the
    /// order the layers are given.
    pub fn encode_with_taps(
        &self,
        sequence: &PromptedSequence,
        layers: &[usize],
    ) -> Result<Vec<Vec<f64>>, BackboneError> {
        self.check_layers(layers)?;
        let mut sorted = layers.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        let mut tape = Tape::new();
        let seq = tape.constant(sequence.tokens.clone());
        let taps = self.record_taps(&mut tape, seq, &sorted)?;
        Ok(layers
            .iter()
            .map(|l| {
                let pos = sorted.binary_search(l).expect("layer present");
                tape.value(taps[pos]).as_slice().to_vec()
            })
            .collect())
    }

    /// Features at every layer 1..=depth for the unprompted sequence.
    pub fn unprompted_taps(&self, x_emb: &Matrix) -> Result<Vec<Vec<f64>>, BackboneError> {
        let seq = self.build_prompted_sequence(x_emb, &PromptTokens::empty(self.dim()))?;
        let all: Vec<usize> = (1..=self.depth()).collect();
        self.encode_with_taps(&seq, &all)
    }
}

/// Standard sinusoidal code scaled by [`POSITION_SCALE`].
pub fn positional_encoding(n: usize, dim: usize) -> Matrix {
    Matrix::from_fn(n, dim, |pos, i| {
        let pair = (i / 2) as f64;
        let angle = pos as f64 / 10_000f64.powf(2.0 * pair / dim as f64);
        POSITION_SCALE * if i % 2 == 0 { angle.sin() } else { angle.cos() }
    })
}

/// Seeded row permutation of the patch tokens.
pub fn patch_shuffle(x_emb: &Matrix, seed: u64) -> Matrix {
    let mut order: Vec<usize> = (0..x_emb.rows()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    x_emb.select_rows(&order)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{fd_gradient, max_relative_error, DEFAULT_FD_STEP};

    fn small() -> Backbone {
        Backbone::new(BackboneConfig {
            depth: 3,
            hidden_dim: 8,
            heads: 2,
            mlp_ratio: 2.0,
            patch_count: 4,
            seed: 11,
            ..BackboneConfig::default()
        })
        .unwrap()
    }

    fn patches(n: usize, d: usize, shift: f64) -> Matrix {
        Matrix::from_fn(n, d, |r, c| ((r * d + c) as f64 * 0.37 + shift).sin())
    }

    #[test]
    fn config_validation() {
        let mut c = BackboneConfig::default();
        assert!(c.validate().is_ok());
        c.depth = 1;
        assert!(c.validate().is_err());
        c.depth = 2;
        c.heads = 3;
        assert!(c.validate().is_err());
    }

    #[test]
    fn sequence_layout() {
        let bb = small();
        let x = patches(4, 8, 0.0);
        let seq = bb.build_prompted_sequence(&x, &PromptTokens::empty(8)).unwrap();
        assert_eq!(seq.tokens.rows(), 5);
        assert_eq!(seq.tokens.row(0), bb.class_token.row(0));
        let prompt = PromptTokens {
            tokens: Matrix::filled(3, 8, 0.5),
        };
        let seq = bb.build_prompted_sequence(&x, &prompt).unwrap();
        assert_eq!(seq.tokens.rows(), 1 + 3 + 4);
        assert_eq!(seq.tokens.row(2), prompt.tokens.row(1));
        assert_eq!(seq, bb.build_prompted_sequence(&x, &prompt).unwrap());
        assert!(bb
            .build_prompted_sequence(&Matrix::zeros(4, 7), &prompt)
            .is_err());
    }

    #[test]
    fn paper_default_sequence_length() {
        let bb = Backbone::new(BackboneConfig::default()).unwrap();
        let prompt = PromptTokens {
            tokens: Matrix::zeros(16, 64),
        };
        let seq = bb
            .build_prompted_sequence(&Matrix::filled(16, 64, 0.1), &prompt)
            .unwrap();
        assert_eq!(seq.tokens.rows(), 33);
    }

    #[test]
    fn taps_are_consistent() {
        let bb = small();
        let seq = bb
            .build_prompted_sequence(&patches(4, 8, 0.2), &PromptTokens::empty(8))
            .unwrap();
        let g = bb.encode(&seq).unwrap();
        let all = bb.encode_with_taps(&seq, &[1, 2, 3]).unwrap();
        assert_eq!(all.len(), 3);
        assert!(all.iter().all(|f| f.len() == 8));
        assert_eq!(all[2], g);
        let partial = bb.encode_with_taps(&seq, &[2]).unwrap();
        assert_eq!(partial[0], all[1]);
        assert_eq!(bb.encode_with_taps(&seq, &[3, 1]).unwrap(), vec![all[2].clone(), all[0].clone()]);
        assert!(bb.encode_with_taps(&seq, &[0]).is_err());
        assert!(bb.encode_with_taps(&seq, &[4]).is_err());
    }

    #[test]
    fn prompt_changes_output_and_weights_are_deterministic() {
        let bb = small();
        let x = patches(4, 8, 0.0);
        let mut prompt = PromptTokens {
            tokens: Matrix::from_fn(2, 8, |r, c| ((r + c) as f64).cos()),
        };
        let g0 = bb.encode(&bb.build_prompted_sequence(&x, &prompt).unwrap()).unwrap();
        prompt.tokens.as_mut_slice()[3] += 0.1;
        let g1 = bb.encode(&bb.build_prompted_sequence(&x, &prompt).unwrap()).unwrap();
        let diff: f64 = g0.iter().zip(&g1).map(|(a, b)| (a - b).abs()).sum();
        assert!(diff > 0.0);
        assert_eq!(small().weight_bytes(), bb.weight_bytes());
    }

    #[test]
    fn prompt_gradient_matches_finite_differences() {
        let bb = small();
        let x = patches(4, 8, 0.4);
        let prompt0 = Matrix::from_fn(2, 8, |r, c| 0.3 * ((r * 8 + c) as f64).sin());
        let weights = Matrix::from_fn(1, 8, |_, c| (c as f64 - 3.5) / 4.0);
        let loss = |tape: &mut Tape, p: Var| {
            let seq = bb.record_sequence(tape, &x, p).unwrap();
            let g = bb.record_taps(tape, seq, &[3]).unwrap()[0];
            let w = tape.constant(weights.clone());
            let s = tape.matmul_t(g, w).unwrap();
            let s = tape.gelu(s).unwrap();
            tape.sum(s).unwrap()
        };
        let mut tape = Tape::new();
        let p = tape.leaf(prompt0.clone());
        let l = loss(&mut tape, p);
        let analytic = tape.backward(l).unwrap().get_or_zeros(&tape, p);
        let numeric = fd_gradient(
            |theta| {
                let mut t = Tape::new();
                let p = t.constant(Matrix::from_vec(2, 8, theta.to_vec()).unwrap());
                let l = loss(&mut t, p);
                t.scalar(l)
            },
            prompt0.as_slice(),
            DEFAULT_FD_STEP,
        )
        .unwrap();
        let err = max_relative_error(analytic.as_slice(), &numeric);
        assert!(err <= 1e-4, "relative error {err}");
    }

    #[test]
    fn shuffle_is_a_seeded_permutation() {
        let x = patches(6, 3, 0.0);
        let a = patch_shuffle(&x, 5);
        assert_eq!(a, patch_shuffle(&x, 5));
        let mut rows_a: Vec<Vec<u64>> =
            a.row_iter().map(|r| r.iter().map(|v| v.to_bits()).collect()).collect();
        let mut rows_x: Vec<Vec<u64>> =
            x.row_iter().map(|r| r.iter().map(|v| v.to_bits()).collect()).collect();
        rows_a.sort();
        rows_x.sort();
        assert_eq!(rows_a, rows_x);
        let single = patches(1, 3, 0.0);
        assert_eq!(patch_shuffle(&single, 9), single);
    }
}
