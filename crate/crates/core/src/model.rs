//! The continual model: a frozen feature encoder, the text reference
//! geometry and one parameter bundle per domain seen so far.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{Backbone, BackboneConfig, BackboneError, PromptTokens};
use crate::ca_cdfa::{
    aggregate, argmax, global_attention, record_head, AggregationError, DomainClassifier,
    GlobalKeyValue, HeadVars, PrototypeAnchorSet,
};
use crate::numerics::{gaussian_matrix, Matrix, NumericsError, Tape, Var};
use crate::text_anchor::TextAnchorSet;
use crate::vl_rsa::{
    structural_loss, visual_relative_encoding, AlignmentError, LossConfig, VisualAnchorSet,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("model state: {0}")]
    State(String),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Aggregation(#[from] AggregationError),
    #[error(transparent)]
    Alignment(#[from] AlignmentError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub prompt_length: usize,
    /// Reuse the visual anchor pool as attention values.
    pub share: bool,
    /// Cross-domain anchor attention before the classifier.
    pub aggregation: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            prompt_length: 16,
            share: false,
            aggregation: true,
        }
    }
}

/// SplitMix64 finaliser over `(global seed, domain position)`.
pub fn derive_seed(global: u64, domain: usize) -> u64 {
    let mut z = global ^ (domain as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Maps a sample to features. Precomputed features skip the transformer and
/// take no prompt.
#[derive(Debug, Clone)]
pub enum FeatureEncoder {
    Transformer(Backbone),
    Precomputed { dim: usize },
}

impl FeatureEncoder {
    pub fn transformer(config: BackboneConfig) -> Result<Self, ModelError> {
        Ok(FeatureEncoder::Transformer(Backbone::new(config)?))
    }

    pub fn dim(&self) -> usize {
        match self {
            FeatureEncoder::Transformer(b) => b.dim(),
            FeatureEncoder::Precomputed { dim } => *dim,
        }
    }

    /// Number of tap layers available for identification.
    pub fn depth(&self) -> usize {
        match self {
            FeatureEncoder::Transformer(b) => b.depth(),
            FeatureEncoder::Precomputed { .. } => 1,
        }
    }

    pub fn backbone(&self) -> Option<&Backbone> {
        match self {
            FeatureEncoder::Transformer(b) => Some(b),
            FeatureEncoder::Precomputed { .. } => None,
        }
    }

    fn check_row(&self, x: &Matrix) -> Result<(), ModelError> {
        if x.shape() != (1, self.dim()) {
            return Err(ModelError::Config(format!(
                "precomputed sample of shape {:?}, expected 1×{}",
                x.shape(),
                self.dim()
            )));
        }
        Ok(())
    }

    pub fn encode(&self, x: &Matrix, prompt: &PromptTokens) -> Result<Vec<f64>, ModelError> {
        match self {
            FeatureEncoder::Transformer(b) => Ok(b.encode(&b.build_prompted_sequence(x, prompt)?)?),
            FeatureEncoder::Precomputed { .. } => {
                self.check_row(x)?;
                Ok(x.as_slice().to_vec())
            }
        }
    }

    /// Unprompted features at layers `1..=depth`.
    pub fn unprompted_taps(&self, x: &Matrix) -> Result<Vec<Vec<f64>>, ModelError> {
        match self {
            FeatureEncoder::Transformer(b) => Ok(b.unprompted_taps(x)?),
            FeatureEncoder::Precomputed { .. } => {
                self.check_row(x)?;
                Ok(vec![x.as_slice().to_vec()])
            }
        }
    }

    fn record_feature(&self, tape: &mut Tape, x: &Matrix, prompt: Var) -> Result<Var, ModelError> {
        match self {
            FeatureEncoder::Transformer(b) => {
                let seq = b.record_sequence(tape, x, prompt)?;
                Ok(b.record_taps(tape, seq, &[b.depth()])?[0])
            }
            FeatureEncoder::Precomputed { .. } => {
                self.check_row(x)?;
                Ok(tape.constant(x.clone()))
            }
        }
    }
}

/// Learnable bundle of one domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainModelState {
    pub domain: usize,
    pub init_seed: u64,
    pub prompt: PromptTokens,
    pub visual: VisualAnchorSet,
    pub prototypes: Option<PrototypeAnchorSet>,
    pub classifier: DomainClassifier,
    pub trained: bool,
    pub frozen: bool,
}

impl DomainModelState {
    /// Fresh parameters for domain position `domain`. Each component draws
    /// from its own stream, so switching share mode on or off leaves the
    /// other components' initial values unchanged.
    pub fn init(
        domain: usize,
        init_seed: u64,
        prompt_length: usize,
        share: bool,
        n_classes: usize,
        dim: usize,
    ) -> Self {
        let stream = |k: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
            rng.set_stream(k);
            rng
        };
        let scale = 1.0 / (dim as f64).sqrt();
        Self {
            domain,
            init_seed,
            prompt: PromptTokens {
                tokens: gaussian_matrix(&mut stream(1), prompt_length, dim, scale),
            },
            visual: VisualAnchorSet::init(domain, n_classes, dim, &mut stream(2)),
            prototypes: (!share)
                .then(|| PrototypeAnchorSet::init(domain, n_classes, dim, &mut stream(3))),
            classifier: DomainClassifier::init(n_classes, dim, &mut stream(4)),
            trained: false,
            frozen: false,
        }
    }

    /// Trainable blocks in a fixed order: prompt, visual anchors,
    /// prototypes (if any), classifier weights, classifier bias.
    pub fn parameters(&self) -> Vec<&Matrix> {
        let mut out = vec![&self.prompt.tokens, &self.visual.anchors];
        if let Some(p) = &self.prototypes {
            out.push(&p.values);
        }
        out.extend([&self.classifier.weights, &self.classifier.bias]);
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = vec![&mut self.prompt.tokens, &mut self.visual.anchors];
        if let Some(p) = &mut self.prototypes {
            out.push(&mut p.values);
        }
        out.extend([&mut self.classifier.weights, &mut self.classifier.bias]);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|m| m.len()).sum()
    }

    pub(crate) fn set_frozen(&mut self) {
        self.frozen = true;
        self.visual.frozen = true;
        self.classifier.frozen = true;
        if let Some(p) = &mut self.prototypes {
            p.frozen = true;
        }
    }

    pub fn value_pool(&self) -> &Matrix {
        match &self.prototypes {
            Some(p) => &p.values,
            None => &self.visual.anchors,
        }
    }
}

/// Loss parts and parameter gradients for one training sample.
#[derive(Debug, Clone)]
pub struct SampleGradient {
    pub loss: f64,
    pub cross_entropy: f64,
    pub structural: f64,
    pub correct: bool,
    /// In [`DomainModelState::parameters`] order.
    pub gradients: Vec<Matrix>,
}

#[derive(Debug, Clone)]
pub struct ContinualModel {
    encoder: FeatureEncoder,
    text: TextAnchorSet,
    config: ModelConfig,
    loss: LossConfig,
    global_seed: u64,
    domains: Vec<DomainModelState>,
}

impl ContinualModel {
    pub fn new(
        encoder: FeatureEncoder,
        text: TextAnchorSet,
        mut config: ModelConfig,
        loss: LossConfig,
        global_seed: u64,
    ) -> Result<Self, ModelError> {
        for w in loss.validate()? {
            log::warn!("{w}");
        }
        if text.num_classes() < 2 {
            return Err(ModelError::Config("at least two classes are required".into()));
        }
        if matches!(encoder, FeatureEncoder::Precomputed { .. }) && config.prompt_length > 0 {
            log::warn!("precomputed features take no prompt; prompt_length set to 0");
            config.prompt_length = 0;
        }
        Ok(Self {
            encoder,
            text,
            config,
            loss,
            global_seed,
            domains: Vec::new(),
        })
    }

    pub fn with_domains(mut self, domains: Vec<DomainModelState>) -> Result<Self, ModelError> {
        for (t, d) in domains.iter().enumerate() {
            let expected = DomainModelState::init(
                t,
                d.init_seed,
                self.config.prompt_length,
                self.config.share,
                self.num_classes(),
                self.dim(),
            );
            let shapes = |s: &DomainModelState| s.parameters().iter().map(|m| m.shape()).collect::<Vec<_>>();
            if d.domain != t || shapes(d) != shapes(&expected) {
                return Err(ModelError::State(format!(
                    "domain state {t} does not fit the model configuration"
                )));
            }
        }
        self.domains = domains;
        Ok(self)
    }

    pub fn encoder(&self) -> &FeatureEncoder {
        &self.encoder
    }

    pub fn text(&self) -> &TextAnchorSet {
        &self.text
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn loss_config(&self) -> &LossConfig {
        &self.loss
    }

    pub fn global_seed(&self) -> u64 {
        self.global_seed
    }

    pub fn dim(&self) -> usize {
        self.encoder.dim()
    }

    pub fn num_classes(&self) -> usize {
        self.text.num_classes()
    }

    pub fn domains(&self) -> &[DomainModelState] {
        &self.domains
    }

    pub fn domain(&self, t: usize) -> Result<&DomainModelState, ModelError> {
        self.domains
            .get(t)
            .ok_or_else(|| ModelError::State(format!("domain {t} has no parameters")))
    }

    pub(crate) fn domain_mut(&mut self, t: usize) -> Result<&mut DomainModelState, ModelError> {
        self.domains
            .get_mut(t)
            .ok_or_else(|| ModelError::State(format!("domain {t} has no parameters")))
    }

    /// Allocates freshly initialised parameters for the next domain. Every
    /// earlier domain must be frozen.
    pub fn push_domain(&mut self) -> Result<usize, ModelError> {
        if let Some(d) = self.domains.iter().find(|d| !d.frozen) {
            return Err(ModelError::State(format!(
                "domain {} must be frozen before a new one starts",
                d.domain
            )));
        }
        let t = self.domains.len();
        self.domains.push(DomainModelState::init(
            t,
            derive_seed(self.global_seed, t),
            self.config.prompt_length,
            self.config.share,
            self.num_classes(),
            self.dim(),
        ));
        Ok(t)
    }

    pub fn trainable_parameter_count(&self) -> usize {
        self.domains.iter().map(DomainModelState::parameter_count).sum()
    }

    /// Final-layer feature of `x` under domain `s`'s prompt.
    pub fn feature(&self, x: &Matrix, s: usize) -> Result<Vec<f64>, ModelError> {
        self.encoder.encode(x, &self.domain(s)?.prompt)
    }

    /// Class logits for `x` using only the components of domains `0..=s`.
    pub fn predict_logits(&self, x: &Matrix, s: usize) -> Result<Vec<f64>, ModelError> {
        let g = self.feature(x, s)?;
        let state = self.domain(s)?;
        let f = if self.config.aggregation {
            let prefix = &self.domains[..=s];
            let keys: Vec<&Matrix> = prefix.iter().map(|d| &d.visual.anchors).collect();
            let values: Vec<&Matrix> = prefix.iter().map(DomainModelState::value_pool).collect();
            let kv = GlobalKeyValue::from_blocks(&keys, &values)?;
            let alpha = global_attention(&g, &kv, self.loss.tau)?;
            aggregate(&alpha, &kv, &g)?
        } else {
            g
        };
        Ok(state.classifier.logits(&f)?)
    }

    pub fn predict(&self, x: &Matrix, s: usize) -> Result<usize, ModelError> {
        Ok(argmax(&self.predict_logits(x, s)?))
    }

    /// Structural loss of one sample against domain `t`'s visual anchors.
    pub fn structural_loss(&self, x: &Matrix, label: usize, t: usize) -> Result<f64, ModelError> {
        let g = self.feature(x, t)?;
        let r_g = visual_relative_encoding(&g, &self.domain(t)?.visual)?;
        let r_y = self
            .text
            .reference_encoding(label)
            .map_err(|e| ModelError::Config(e.to_string()))?;
        Ok(structural_loss(&r_g, &r_y, &self.loss)?)
    }

    /// Loss and gradients for one sample at training stage `t`. Only the
    /// parameters of domain `t` are tape leaves.
    pub fn sample_gradient(&self, x: &Matrix, label: usize, t: usize) -> Result<SampleGradient, ModelError> {
        let state = self.domain(t)?;
        if label >= self.num_classes() {
            return Err(ModelError::Config(format!(
                "label {label} out of range for {} classes",
                self.num_classes()
            )));
        }
        let mut tape = Tape::new();
        let leaves: Vec<Var> = state.parameters().into_iter().map(|m| tape.leaf(m.clone())).collect();
        let prompt = leaves[0];
        let g = self.encoder.record_feature(&mut tape, x, prompt)?;

        let mut visual: Vec<Var> = self.domains[..t]
            .iter()
            .map(|d| tape.constant(d.visual.anchors.clone()))
            .collect();
        let mut values: Vec<Var> = self.domains[..t]
            .iter()
            .map(|d| tape.constant(d.value_pool().clone()))
            .collect();
        visual.push(leaves[1]);
        values.push(if state.prototypes.is_some() { leaves[2] } else { leaves[1] });
        let n = leaves.len();
        let vars = HeadVars {
            visual,
            values,
            weights: leaves[n - 2],
            bias: leaves[n - 1],
        };
        let reference = self.text.gram().row(label).to_vec();
        let out = record_head(
            &mut tape,
            g,
            &vars,
            label,
            &reference,
            &self.loss,
            self.config.aggregation,
        )?;
        let grads = tape.backward(out.loss)?;
        Ok(SampleGradient {
            loss: tape.scalar(out.loss),
            cross_entropy: tape.scalar(out.cross_entropy),
            structural: out.structural.map_or(0.0, |s| tape.scalar(s)),
            correct: argmax(tape.value(out.logits).as_slice()) == label,
            gradients: leaves.iter().map(|&v| grads.get_or_zeros(&tape, v)).collect(),
        })
    }
}
