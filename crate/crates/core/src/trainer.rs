//! Per-domain optimisation with AdamW and a cosine learning-rate schedule,
//! and the freeze-after-training policy.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::{DomainDataset, Sample};
use crate::model::{ContinualModel, ModelError, SampleGradient};
use crate::numerics::Matrix;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid optimizer configuration: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("training state: {0}")]
    State(String),
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFinite { epoch: usize, step: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            epochs: 20,
            batch_size: 32,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let positive = [("lr", self.lr), ("eps", self.eps)];
        if let Some((name, v)) = positive.iter().find(|(_, v)| !(*v > 0.0 && v.is_finite())) {
            return Err(TrainError::Config(format!("{name} must be positive, got {v}")));
        }
        for (name, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(TrainError::Config(format!("{name} must lie in [0, 1), got {v}")));
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(TrainError::Config(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(TrainError::Config("epochs and batch_size must be at least 1".into()));
        }
        Ok(())
    }
}

/// `lr0 · ½(1 + cos(π · step / total))`, clamped to the schedule's range.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> f64 {
    if total_steps == 0 {
        return lr0;
    }
    let progress = step.min(total_steps) as f64 / total_steps as f64;
    lr0 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// First and second moments for a list of parameter blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    first: Vec<Matrix>,
    second: Vec<Matrix>,
}

impl AdamState {
    pub fn new(shapes: &[(usize, usize)]) -> Self {
        let zeros = || shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect();
        Self {
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }
}

/// One AdamW update with bias correction. Decay `θ ← θ − lr·wd·θ` is applied
/// separately from the moment-based step.
pub fn adamw_step(
    params: &mut [&mut Matrix],
    grads: &[Matrix],
    state: &mut AdamState,
    lr: f64,
    cfg: &OptimizerConfig,
) -> Result<(), TrainError> {
    if params.len() != grads.len() || params.len() != state.first.len() {
        return Err(TrainError::Contract(format!(
            "{} parameter blocks, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.first.len()
        )));
    }
    for ((p, g), m) in params.iter().zip(grads).zip(&state.first) {
        if p.shape() != g.shape() || p.shape() != m.shape() {
            return Err(TrainError::Contract(format!(
                "parameter {:?}, gradient {:?}, moments {:?}",
                p.shape(),
                g.shape(),
                m.shape()
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let decay = 1.0 - lr * cfg.weight_decay;
    for (((p, g), m), v) in params
        .iter_mut()
        .zip(grads)
        .zip(&mut state.first)
        .zip(&mut state.second)
    {
        let (p, m, v) = (p.as_mut_slice(), m.as_mut_slice(), v.as_mut_slice());
        for k in 0..p.len() {
            let gk = g.as_slice()[k];
            m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * gk;
            v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * gk * gk;
            p[k] *= decay;
            p[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub cross_entropy: f64,
    pub structural: f64,
    pub train_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub domain: usize,
    /// Mean train-set structural loss before the first update.
    pub initial_structural: f64,
    /// Mean train-set structural loss with the final parameters.
    pub final_structural: f64,
    pub epochs: Vec<EpochLog>,
}

/// Mean structural loss of domain `t`'s parameters over `samples`.
pub fn mean_structural_loss(
    model: &ContinualModel,
    t: usize,
    samples: &[Sample],
) -> Result<f64, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::Contract("no samples".into()));
    }
    let losses = samples
        .par_iter()
        .map(|s| model.structural_loss(&s.tokens, s.label, t))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(losses.iter().sum::<f64>() / samples.len() as f64)
}

/// Owns optimizer moments for domains that are still being trained.
#[derive(Debug, Clone, Default)]
pub struct Trainer {
    config: OptimizerConfig,
    moments: BTreeMap<usize, AdamState>,
}

impl Trainer {
    pub fn new(config: OptimizerConfig) -> Result<Self, TrainError> {
        config.validate()?;
        Ok(Self {
            config,
            moments: BTreeMap::new(),
        })
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn has_moments(&self, t: usize) -> bool {
        self.moments.contains_key(&t)
    }

    /// Optimises domain `t`'s parameters on `data.train`. The domain is left
    /// unfrozen.
    pub fn train_domain(
        &mut self,
        model: &mut ContinualModel,
        t: usize,
        data: &DomainDataset,
    ) -> Result<TrainingLog, TrainError> {
        if data.train.is_empty() {
            return Err(TrainError::Contract(format!("domain {t} has no training samples")));
        }
        if model.domains().len() != t + 1 {
            return Err(TrainError::State(format!(
                "training domain {t} needs exactly {} allocated domains, found {}",
                t + 1,
                model.domains().len()
            )));
        }
        if let Some(d) = model.domains()[..t].iter().find(|d| !d.frozen) {
            return Err(TrainError::State(format!("domain {} is not frozen", d.domain)));
        }
        if model.domain(t)?.frozen {
            return Err(TrainError::State(format!("domain {t} is already frozen")));
        }

        let cfg = self.config.clone();
        let shapes: Vec<_> = model.domain(t)?.parameters().iter().map(|m| m.shape()).collect();
        let moments = self.moments.entry(t).or_insert_with(|| AdamState::new(&shapes));
        let initial_structural = mean_structural_loss(model, t, &data.train)?;

        let n = data.train.len();
        let batches = n.div_ceil(cfg.batch_size);
        let total = cfg.epochs * batches;
        let mut rng = ChaCha8Rng::seed_from_u64(model.domain(t)?.init_seed);
        rng.set_stream(0x5A);
        let mut order: Vec<usize> = (0..n).collect();
        let mut epochs = Vec::with_capacity(cfg.epochs);
        let mut step = 0;
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let (mut ce, mut ls, mut correct) = (0.0, 0.0, 0usize);
            for batch in order.chunks(cfg.batch_size) {
                let frozen_model: &ContinualModel = model;
                let results = batch
                    .par_iter()
                    .map(|&i| {
                        let s = &data.train[i];
                        frozen_model.sample_gradient(&s.tokens, s.label, t)
                    })
                    .collect::<Result<Vec<SampleGradient>, _>>()?;
                let mut sum: Vec<Matrix> = shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect();
                for r in &results {
                    if !r.loss.is_finite() {
                        return Err(TrainError::NonFinite { epoch, step });
                    }
                    ce += r.cross_entropy;
                    ls += r.structural;
                    correct += usize::from(r.correct);
                    for (acc, g) in sum.iter_mut().zip(&r.gradients) {
                        acc.add_assign(g);
                    }
                }
                let inv = 1.0 / batch.len() as f64;
                let mean: Vec<Matrix> = sum.iter().map(|g| g.scale(inv)).collect();
                let lr = cosine_lr(step, total, cfg.lr);
                let state = model.domain_mut(t)?;
                adamw_step(&mut state.parameters_mut(), &mean, moments, lr, &cfg)?;
                if state.parameters().iter().any(|m| !m.is_finite()) {
                    return Err(TrainError::NonFinite { epoch, step });
                }
                step += 1;
            }
            let entry = EpochLog {
                epoch,
                cross_entropy: ce / n as f64,
                structural: ls / n as f64,
                train_accuracy: correct as f64 / n as f64,
            };
            log::debug!(
                "domain {t} epoch {epoch}: ce {:.4} struct {:.4} acc {:.3}",
                entry.cross_entropy,
                entry.structural,
                entry.train_accuracy
            );
            epochs.push(entry);
        }
        model.domain_mut(t)?.trained = true;
        Ok(TrainingLog {
            domain: t,
            initial_structural,
            final_structural: mean_structural_loss(model, t, &data.train)?,
            epochs,
        })
    }

    /// Freezes domain `t` and drops its optimizer moments. Freezing twice
    /// is a no-op with a warning.
    pub fn freeze_domain(&mut self, model: &mut ContinualModel, t: usize) -> Result<(), TrainError> {
        let state = model.domain_mut(t)?;
        if state.frozen {
            log::warn!("domain {t} is already frozen");
            return Ok(());
        }
        if !state.trained {
            return Err(TrainError::State(format!("domain {t} was never trained")));
        }
        state.set_frozen();
        self.moments.remove(&t);
        Ok(())
    }
}
