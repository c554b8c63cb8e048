//! Experiment driver: configuration, the sequential train/freeze loop,
//! staged evaluation and the report files behind every subcommand.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{BackboneConfig, BackboneError};
use crate::ca_cdfa::AggregationError;
use crate::checkpoint::{Checkpoint, CheckpointError, EncoderSpec};
use crate::datagen::{
    generate_benchmark, load_feature_dataset, permute_domain_order, BenchmarkConfig, DatagenError,
    DomainDataset,
};
use crate::domain_id::{
    greedy_layer_search, identification_accuracy, knn_bank, mlfi_bank, nmc_bank, pss_bank,
    FeatureCache, IdError, IdStrategy, LayerSearchReport, LayerSet, PrototypeBank,
};
use crate::eval_metrics::{AccuracyMatrix, MetricsError, MetricsReport};
use crate::model::{ContinualModel, FeatureEncoder, ModelConfig, ModelError};
use crate::numerics::NumericsError;
use crate::text_anchor::{load_text_anchors, synth_text_anchors, AnchorError, TextAnchorSet};
use crate::trainer::{OptimizerConfig, TrainError, Trainer, TrainingLog};
use crate::vl_rsa::{AlignmentError, AlignmentVariant, LossConfig};

/// Environment variable naming the default output directory.
pub const OUTPUT_DIR_ENV: &str = "RELANCHOR_OUT";
pub const DEFAULT_OUTPUT_DIR: &str = "relanchor-out";

/// Every training sample with `index % HOLDOUT_STRIDE == HOLDOUT_STRIDE - 1`
/// is held out as validation data for the layer search.
pub const HOLDOUT_STRIDE: usize = 4;

/// Seed offset separating shuffled test features from shuffled train ones.
const PSS_TEST_OFFSET: u64 = 1 << 32;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid configuration at `{path}`: {message}")]
    Config { path: String, message: String },
    #[error("numeric failure during {stage}: {message}")]
    Numeric { stage: String, message: String },
    #[error("{stage}: {message}")]
    Stage { stage: String, message: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

impl ExperimentError {
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config { .. } => 2,
            ExperimentError::Numeric { .. } => 3,
            _ => 1,
        }
    }

    fn config(path: impl Into<String>, message: impl Display) -> Self {
        ExperimentError::Config {
            path: path.into(),
            message: message.to_string(),
        }
    }
}

/// Errors raised inside a pipeline stage; numeric ones map to exit code 3.
trait StageFailure: Display {
    fn is_numeric(&self) -> bool;
}

impl StageFailure for NumericsError {
    fn is_numeric(&self) -> bool {
        matches!(self, NumericsError::NonFinite(_) | NumericsError::OracleFailure { .. })
    }
}

impl StageFailure for BackboneError {
    fn is_numeric(&self) -> bool {
        match self {
            BackboneError::NonFinite { .. } => true,
            BackboneError::Numerics(e) => e.is_numeric(),
            _ => false,
        }
    }
}

impl StageFailure for AlignmentError {
    fn is_numeric(&self) -> bool {
        matches!(self, AlignmentError::Numerics(e) if e.is_numeric())
    }
}

impl StageFailure for AggregationError {
    fn is_numeric(&self) -> bool {
        match self {
            AggregationError::Alignment(e) => e.is_numeric(),
            AggregationError::Numerics(e) => e.is_numeric(),
            _ => false,
        }
    }
}

impl StageFailure for ModelError {
    fn is_numeric(&self) -> bool {
        match self {
            ModelError::Backbone(e) => e.is_numeric(),
            ModelError::Aggregation(e) => e.is_numeric(),
            ModelError::Alignment(e) => e.is_numeric(),
            ModelError::Numerics(e) => e.is_numeric(),
            _ => false,
        }
    }
}

impl StageFailure for TrainError {
    fn is_numeric(&self) -> bool {
        match self {
            TrainError::NonFinite { .. } => true,
            TrainError::Model(e) => e.is_numeric(),
            _ => false,
        }
    }
}

impl StageFailure for IdError {
    fn is_numeric(&self) -> bool {
        match self {
            IdError::Model(e) => e.is_numeric(),
            IdError::Numerics(e) => e.is_numeric(),
            _ => false,
        }
    }
}

impl StageFailure for DatagenError {
    fn is_numeric(&self) -> bool {
        matches!(self, DatagenError::Numerics(e) if e.is_numeric())
    }
}

impl StageFailure for AnchorError {
    fn is_numeric(&self) -> bool {
        matches!(self, AnchorError::Numerics(e) if e.is_numeric())
    }
}

impl StageFailure for MetricsError {
    fn is_numeric(&self) -> bool {
        false
    }
}

fn at<E: StageFailure>(stage: impl Into<String>) -> impl FnOnce(E) -> ExperimentError {
    let stage = stage.into();
    move |e| {
        if e.is_numeric() {
            ExperimentError::Numeric {
                stage,
                message: e.to_string(),
            }
        } else {
            ExperimentError::Stage {
                stage,
                message: e.to_string(),
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Configuration

/// How test samples are routed to a domain's components.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Routing {
    /// The true domain is supplied.
    Oracle,
    Mlfi,
    Nmc,
    Knn,
    Pss,
}

impl Routing {
    pub const STRATEGIES: [Routing; 4] = [Routing::Mlfi, Routing::Nmc, Routing::Knn, Routing::Pss];

    pub fn name(self) -> &'static str {
        match self {
            Routing::Oracle => "oracle",
            Routing::Mlfi => "mlfi",
            Routing::Nmc => "nmc",
            Routing::Knn => "knn",
            Routing::Pss => "pss",
        }
    }
}

/// MLFI layers: a fixed set or the greedy search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LayerChoiceRepr", into = "LayerChoiceRepr")]
pub enum LayerChoice {
    Search,
    Fixed(LayerSet),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum LayerChoiceRepr {
    Keyword(String),
    List(Vec<usize>),
}

impl TryFrom<LayerChoiceRepr> for LayerChoice {
    type Error = String;

    fn try_from(repr: LayerChoiceRepr) -> Result<Self, String> {
        match repr {
            LayerChoiceRepr::Keyword(k) if k == "search" => Ok(LayerChoice::Search),
            LayerChoiceRepr::Keyword(k) => Err(format!("expected \"search\" or a layer list, got {k:?}")),
            LayerChoiceRepr::List(l) => LayerSet::new(l).map(LayerChoice::Fixed).map_err(|e| e.to_string()),
        }
    }
}

impl From<LayerChoice> for LayerChoiceRepr {
    fn from(c: LayerChoice) -> Self {
        match c {
            LayerChoice::Search => LayerChoiceRepr::Keyword("search".into()),
            LayerChoice::Fixed(l) => LayerChoiceRepr::List(l.into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IdentificationConfig {
    pub routing: Routing,
    pub layers: LayerChoice,
    /// Centroids per domain for `knn`.
    pub k: usize,
}

impl Default for IdentificationConfig {
    fn default() -> Self {
        Self {
            routing: Routing::Mlfi,
            layers: LayerChoice::Search,
            k: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnchorConfig {
    /// Anchor JSON Lines file; synthetic anchors when absent.
    pub path: Option<PathBuf>,
    /// Width of synthetic anchors.
    pub dim: usize,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self { path: None, dim: 64 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    /// One feature JSON Lines file per domain; replaces the synthetic
    /// benchmark and the transformer when non-empty.
    pub files: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub variants: Vec<AlignmentVariant>,
    pub lambdas: Vec<f64>,
    pub prompt_lengths: Vec<usize>,
    pub share: Vec<bool>,
    /// Orders over the generated domains.
    pub orders: Vec<Vec<usize>>,
    /// Baseline, alignment only, alignment plus aggregation.
    pub components: bool,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            variants: AlignmentVariant::ALL.to_vec(),
            lambdas: vec![0.0, 0.2, 0.5, 1.0],
            prompt_lengths: Vec::new(),
            share: vec![false, true],
            orders: Vec::new(),
            components: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    /// Position `k` of the stream trains generated domain `domain_order[k]`.
    pub domain_order: Option<Vec<usize>>,
    pub benchmark: BenchmarkConfig,
    pub backbone: BackboneConfig,
    pub optimizer: OptimizerConfig,
    pub loss: LossConfig,
    pub model: ModelConfig,
    pub identification: IdentificationConfig,
    pub anchors: AnchorConfig,
    pub features: FeatureConfig,
    pub ablation: AblationConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let benchmark = BenchmarkConfig::default();
        let backbone = BackboneConfig {
            hidden_dim: benchmark.dim,
            patch_count: benchmark.patch_count,
            ..BackboneConfig::default()
        };
        Self {
            seed: 0,
            output_dir: None,
            domain_order: None,
            benchmark,
            backbone,
            optimizer: OptimizerConfig::default(),
            loss: LossConfig::default(),
            model: ModelConfig::default(),
            identification: IdentificationConfig::default(),
            anchors: AnchorConfig::default(),
            features: FeatureConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

/// Sets `a.b.c = value` in a TOML table, creating intermediate tables. The
/// value is parsed as TOML and falls back to a plain string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<(), ExperimentError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| ExperimentError::config(assignment, "override must look like key.path=value"))?;
    let key = key.trim();
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(ExperimentError::config(key, "empty key segment"));
    }
    let (last, parents) = parts.split_last().expect("split yields at least one part");
    let mut cursor = table;
    for (depth, part) in parents.iter().enumerate() {
        let entry = cursor
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cursor = entry
            .as_table_mut()
            .ok_or_else(|| ExperimentError::config(parts[..=depth].join("."), "is not a table"))?;
    }
    cursor.insert(last.to_string(), value);
    Ok(())
}

impl ExperimentConfig {
    /// Parses a config file body, applies `key=value` overrides, fills the
    /// backbone width and patch count from the benchmark when they are not
    /// given, and validates the result.
    pub fn resolve(text: &str, overrides: &[String]) -> Result<Self, ExperimentError> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| ExperimentError::config("<file>", e.message()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let bench = table.get("benchmark").and_then(toml::Value::as_table);
        let defaults = BenchmarkConfig::default();
        let dim = bench
            .and_then(|b| b.get("dim"))
            .cloned()
            .unwrap_or(toml::Value::Integer(defaults.dim as i64));
        let patches = bench
            .and_then(|b| b.get("patch_count"))
            .cloned()
            .unwrap_or(toml::Value::Integer(defaults.patch_count as i64));
        let backbone = table
            .entry("backbone")
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        if let Some(b) = backbone.as_table_mut() {
            b.entry("hidden_dim").or_insert(dim);
            b.entry("patch_count").or_insert(patches);
        }
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
            let path = e.path().to_string();
            ExperimentError::config(path, e.into_inner().message())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path).map_err(|source| ExperimentError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::resolve(&text, overrides)
    }

    pub fn uses_features(&self) -> bool {
        !self.features.files.is_empty()
    }

    fn domain_count(&self) -> usize {
        if self.uses_features() {
            self.features.files.len()
        } else {
            self.benchmark.domains
        }
    }

    fn check_order(order: &[usize], n: usize, path: &str) -> Result<(), ExperimentError> {
        let mut sorted = order.to_vec();
        sorted.sort_unstable();
        if sorted != (0..n).collect::<Vec<_>>() {
            return Err(ExperimentError::config(
                path,
                format!("{order:?} is not a permutation of 0..{n}"),
            ));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        self.benchmark
            .validate()
            .map_err(|e| ExperimentError::config("benchmark", e))?;
        if !self.uses_features() {
            self.backbone
                .validate()
                .map_err(|e| ExperimentError::config("backbone", e))?;
            if self.backbone.hidden_dim != self.benchmark.dim {
                return Err(ExperimentError::config(
                    "backbone.hidden_dim",
                    format!("must equal benchmark.dim ({})", self.benchmark.dim),
                ));
            }
            if self.backbone.patch_count != self.benchmark.patch_count {
                return Err(ExperimentError::config(
                    "backbone.patch_count",
                    format!("must equal benchmark.patch_count ({})", self.benchmark.patch_count),
                ));
            }
        }
        self.optimizer
            .validate()
            .map_err(|e| ExperimentError::config("optimizer", e))?;
        for w in self.loss.validate().map_err(|e| ExperimentError::config("loss", e))? {
            log::warn!("{w}");
        }
        if self.identification.k == 0 {
            return Err(ExperimentError::config("identification.k", "must be at least 1"));
        }
        if let LayerChoice::Fixed(layers) = &self.identification.layers {
            let depth = if self.uses_features() { 1 } else { self.backbone.depth };
            layers
                .check_depth(depth)
                .map_err(|e| ExperimentError::config("identification.layers", e))?;
        }
        if self.anchors.path.is_none() && self.anchors.dim < 2 {
            return Err(ExperimentError::config("anchors.dim", "must be at least 2"));
        }
        let n = self.domain_count();
        if let Some(order) = &self.domain_order {
            Self::check_order(order, n, "domain_order")?;
        }
        for (i, order) in self.ablation.orders.iter().enumerate() {
            Self::check_order(order, n, &format!("ablation.orders[{i}]"))?;
        }
        if let Some(l) = self.ablation.lambdas.iter().find(|l| !(**l >= 0.0 && l.is_finite())) {
            return Err(ExperimentError::config("ablation.lambdas", format!("{l} is not a finite non-negative weight")));
        }
        Ok(())
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_dir
            .clone()
            .or_else(|| std::env::var_os(OUTPUT_DIR_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_DIR))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is serialisable")
    }

    /// Bank strategy used for routing; oracle runs still build MLFI
    /// prototypes to report identification accuracy.
    pub fn id_strategy(&self, routing: Routing) -> IdStrategy {
        match routing {
            Routing::Oracle | Routing::Mlfi => IdStrategy::Mlfi,
            Routing::Nmc => IdStrategy::Nmc,
            Routing::Knn => IdStrategy::Knn {
                k: self.identification.k,
                seed: self.seed,
            },
            Routing::Pss => IdStrategy::Pss { seed: self.seed },
        }
    }
}

// ---------------------------------------------------------------------------
// Data and features

/// Datasets in stream order with the anchors and encoder they need.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub datasets: Vec<DomainDataset>,
    pub text: TextAnchorSet,
    pub encoder: FeatureEncoder,
}

impl Prepared {
    pub fn reordered(&self, order: &[usize]) -> Result<Self, ExperimentError> {
        Ok(Self {
            datasets: permute_domain_order(self.datasets.clone(), order).map_err(at("reordering domains"))?,
            text: self.text.clone(),
            encoder: self.encoder.clone(),
        })
    }

    pub fn domain_names(&self) -> Vec<String> {
        self.datasets.iter().map(|d| d.name.clone()).collect()
    }
}

/// Builds the datasets in generation order, before `domain_order`.
pub fn prepare_unordered(cfg: &ExperimentConfig) -> Result<Prepared, ExperimentError> {
    let text = match &cfg.anchors.path {
        Some(p) => load_text_anchors(p).map_err(|e| ExperimentError::config("anchors.path", e))?,
        None => synth_text_anchors(
            cfg.benchmark.classes,
            cfg.anchors.dim,
            &cfg.benchmark.group_structure(),
            cfg.seed,
        )
        .map_err(|e| ExperimentError::config("anchors.dim", e))?,
    };
    let (datasets, encoder) = if cfg.uses_features() {
        let datasets = cfg
            .features
            .files
            .iter()
            .enumerate()
            .map(|(t, p)| {
                load_feature_dataset(p, t, Some(text.num_classes()))
                    .map_err(|e| ExperimentError::config(format!("features.files[{t}]"), format!("{}: {e}", p.display())))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let dim = datasets[0].train.first().map_or(0, |s| s.tokens.cols());
        if datasets.iter().flat_map(|d| d.train.iter().chain(&d.test)).any(|s| s.tokens.cols() != dim) {
            return Err(ExperimentError::config("features.files", "feature widths differ between files"));
        }
        (datasets, FeatureEncoder::Precomputed { dim })
    } else {
        if text.num_classes() != cfg.benchmark.classes {
            return Err(ExperimentError::config(
                "anchors.path",
                format!(
                    "{} anchors for {} benchmark classes",
                    text.num_classes(),
                    cfg.benchmark.classes
                ),
            ));
        }
        let datasets = generate_benchmark(&cfg.benchmark).map_err(at("generating the benchmark"))?;
        let encoder = FeatureEncoder::transformer(cfg.backbone.clone()).map_err(at("building the backbone"))?;
        (datasets, encoder)
    };
    Ok(Prepared { datasets, text, encoder })
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared, ExperimentError> {
    let base = prepare_unordered(cfg)?;
    match &cfg.domain_order {
        Some(order) => base.reordered(order),
        None => Ok(base),
    }
}

/// Unprompted per-layer features of every train and test sample, in stream
/// order. They depend only on the frozen encoder.
#[derive(Debug, Clone)]
pub struct IdFeatures {
    pub train: Vec<FeatureCache>,
    pub test: Vec<FeatureCache>,
}

impl IdFeatures {
    pub fn build(prepared: &Prepared) -> Result<Self, ExperimentError> {
        let build = |samples: &[_], stage: String| FeatureCache::build(&prepared.encoder, samples).map_err(at(stage));
        let train = prepared
            .datasets
            .iter()
            .map(|d| build(&d.train, format!("encoding train features of {}", d.name)))
            .collect::<Result<_, _>>()?;
        let test = prepared
            .datasets
            .iter()
            .map(|d| build(&d.test, format!("encoding test features of {}", d.name)))
            .collect::<Result<_, _>>()?;
        Ok(Self { train, test })
    }

    /// Patch-shuffled final-layer features for PSS.
    pub fn build_shuffled(prepared: &Prepared, seed: u64) -> Result<Self, ExperimentError> {
        let build = |samples: &[_], seed: u64| {
            FeatureCache::build_shuffled(&prepared.encoder, samples, seed).map_err(at("encoding shuffled features"))
        };
        let train = prepared
            .datasets
            .iter()
            .map(|d| build(&d.train, seed))
            .collect::<Result<_, _>>()?;
        let test = prepared
            .datasets
            .iter()
            .map(|d| build(&d.test, seed.wrapping_add(PSS_TEST_OFFSET)))
            .collect::<Result<_, _>>()?;
        Ok(Self { train, test })
    }

    /// Splits every training cache into (fit, validation) parts.
    pub fn holdout(&self) -> (Vec<FeatureCache>, Vec<FeatureCache>) {
        self.train
            .iter()
            .map(|c| {
                let (fit, val): (Vec<usize>, Vec<usize>) =
                    (0..c.len()).partition(|i| i % HOLDOUT_STRIDE != HOLDOUT_STRIDE - 1);
                (c.select(&fit), c.select(&val))
            })
            .unzip()
    }
}

/// Greedy layer search on the training hold-out.
pub fn search_layers(features: &IdFeatures) -> Result<LayerSearchReport, ExperimentError> {
    let (fit, val) = features.holdout();
    greedy_layer_search(&fit, &val).map_err(at("layer search"))
}

pub fn resolve_layers(
    cfg: &ExperimentConfig,
    features: &IdFeatures,
) -> Result<(LayerSet, Option<LayerSearchReport>), ExperimentError> {
    match &cfg.identification.layers {
        LayerChoice::Fixed(l) => Ok((l.clone(), None)),
        LayerChoice::Search => {
            let report = search_layers(features)?;
            Ok((report.best.clone(), Some(report)))
        }
    }
}

/// Identification bank of `strategy` with the feature caches it routes on.
#[derive(Debug, Clone)]
pub struct Router {
    pub strategy: IdStrategy,
    pub bank: PrototypeBank,
    /// Test features in the form the bank expects.
    pub test: Vec<FeatureCache>,
}

impl Router {
    pub fn build(
        strategy: IdStrategy,
        layers: &LayerSet,
        prepared: &Prepared,
        features: &IdFeatures,
    ) -> Result<Self, ExperimentError> {
        let stage = format!("building {} prototypes", strategy.name());
        let (bank, test) = match &strategy {
            IdStrategy::Mlfi => (mlfi_bank(&features.train, layers).map_err(at(stage))?, features.test.clone()),
            IdStrategy::Nmc => (nmc_bank(&features.train).map_err(at(stage))?, features.test.clone()),
            IdStrategy::Knn { k, seed } => (knn_bank(&features.train, *k, *seed).map_err(at(stage))?, features.test.clone()),
            IdStrategy::Pss { seed } => {
                let shuffled = IdFeatures::build_shuffled(prepared, *seed)?;
                (pss_bank(&shuffled.train).map_err(at(stage))?, shuffled.test)
            }
        };
        Ok(Self { strategy, bank, test })
    }

    /// Identification accuracy over every test sample with the full bank.
    pub fn accuracy(&self) -> Result<f64, ExperimentError> {
        identification_accuracy(&self.bank, &self.test).map_err(at("measuring identification accuracy"))
    }
}

// ---------------------------------------------------------------------------
// Training and evaluation

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: ContinualModel,
    pub logs: Vec<TrainingLog>,
}

/// Trains the domains in stream order, freezing each before the next
/// starts. `after_stage` sees the model once domain `t` is frozen.
pub fn train_sequence(
    cfg: &ExperimentConfig,
    prepared: &Prepared,
    mut after_stage: impl FnMut(usize, &ContinualModel) -> Result<(), ExperimentError>,
) -> Result<TrainedModel, ExperimentError> {
    let mut model = ContinualModel::new(
        prepared.encoder.clone(),
        prepared.text.clone(),
        cfg.model.clone(),
        cfg.loss.clone(),
        cfg.seed,
    )
    .map_err(|e| ExperimentError::config("model", e))?;
    let mut trainer = Trainer::new(cfg.optimizer.clone()).map_err(|e| ExperimentError::config("optimizer", e))?;
    let mut logs = Vec::with_capacity(prepared.datasets.len());
    for (t, data) in prepared.datasets.iter().enumerate() {
        let stage = || format!("training domain {t} ({})", data.name);
        model.push_domain().map_err(at(stage()))?;
        logs.push(trainer.train_domain(&mut model, t, data).map_err(at(stage()))?);
        trainer.freeze_domain(&mut model, t).map_err(at(stage()))?;
        log::info!("domain {t} ({}) trained and frozen", data.name);
        after_stage(t, &model)?;
    }
    Ok(TrainedModel { model, logs })
}

/// Accuracy matrix of a trained model plus the summary metrics.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub matrix: AccuracyMatrix,
    pub report: MetricsReport,
}

/// Scores every stage `j` on the test sets of domains `0..=j`. A sample is
/// routed with the bank restricted to domains `0..=j` (or to its own domain
/// under the oracle) and classified with the components of domains up to
/// the routed one. Frozen components make the final model answer exactly as
/// it would have at stage `j`.
pub fn evaluate(
    model: &ContinualModel,
    datasets: &[DomainDataset],
    router: Option<&Router>,
    identification_accuracy: Option<f64>,
) -> Result<Evaluation, ExperimentError> {
    let n = datasets.len();
    if model.domains().len() != n {
        return Err(ExperimentError::Stage {
            stage: "evaluation".into(),
            message: format!("model holds {} domains, stream has {n}", model.domains().len()),
        });
    }
    let sizes = datasets.iter().map(|d| d.test.len() as u64).collect();
    let mut matrix = AccuracyMatrix::new(sizes).map_err(at("evaluation"))?;
    let prefixes: Vec<PrototypeBank> = router.map_or_else(Vec::new, |r| (1..=n).map(|j| r.bank.restricted(j)).collect());
    for (i, data) in datasets.iter().enumerate() {
        let stage = format!("evaluating domain {i} ({})", data.name);
        let hits: Vec<Vec<bool>> = data
            .test
            .par_iter()
            .enumerate()
            .map(|(idx, sample)| -> Result<Vec<bool>, ExperimentError> {
                let routes: Vec<usize> = match router {
                    None => vec![i; n - i],
                    Some(r) => {
                        let feature = r.test[i].multi_level(idx, &r.bank.layers);
                        prefixes[i..]
                            .iter()
                            .map(|b| b.identify(&feature))
                            .collect::<Result<_, _>>()
                            .map_err(at(stage.clone()))?
                    }
                };
                let mut predictions = BTreeMap::new();
                for &s in &routes {
                    if let std::collections::btree_map::Entry::Vacant(v) = predictions.entry(s) {
                        v.insert(model.predict(&sample.tokens, s).map_err(at(stage.clone()))?);
                    }
                }
                Ok(routes.iter().map(|s| predictions[s] == sample.label).collect())
            })
            .collect::<Result<_, _>>()?;
        for (offset, j) in (i..n).enumerate() {
            let correct = hits.iter().filter(|h| h[offset]).count() as u64;
            matrix.record(j, i, correct).map_err(at("evaluation"))?;
        }
    }
    let report = matrix.report(identification_accuracy).map_err(at("evaluation"))?;
    Ok(Evaluation { matrix, report })
}

/// A trained model with its identification bank.
#[derive(Debug, Clone)]
pub struct Run {
    pub trained: TrainedModel,
    pub router: Router,
    pub layers: LayerSet,
    pub layer_search: Option<LayerSearchReport>,
}

impl Run {
    pub fn checkpoint(&self, prepared: &Prepared) -> Checkpoint {
        Checkpoint::capture(
            &self.trained.model,
            prepared.domain_names(),
            Some((self.router.strategy.clone(), self.router.bank.clone())),
        )
    }

    pub fn evaluate(&self, cfg: &ExperimentConfig, prepared: &Prepared) -> Result<Evaluation, ExperimentError> {
        let routing = match cfg.identification.routing {
            Routing::Oracle => None,
            _ => Some(&self.router),
        };
        evaluate(&self.trained.model, &prepared.datasets, routing, Some(self.router.accuracy()?))
    }
}

/// Trains the stream and builds the configured identification bank.
pub fn train_run(cfg: &ExperimentConfig, prepared: &Prepared, features: &IdFeatures) -> Result<Run, ExperimentError> {
    let (layers, layer_search) = resolve_layers(cfg, features)?;
    let trained = train_sequence(cfg, prepared, |_, _| Ok(()))?;
    let router = Router::build(cfg.id_strategy(cfg.identification.routing), &layers, prepared, features)?;
    Ok(Run {
        trained,
        router,
        layers,
        layer_search,
    })
}

// ---------------------------------------------------------------------------
// Reports

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub routing: Routing,
    pub strategy: IdStrategy,
    pub layers: LayerSet,
    pub domains: Vec<String>,
    pub trainable_parameters: usize,
    pub metrics: MetricsReport,
}

/// One row of `ablation.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub axis: String,
    pub setting: String,
    pub average_accuracy: f64,
    pub avg_task_accuracy: f64,
    pub forgetting: Option<f64>,
    pub domain_id_accuracy: Option<f64>,
    pub trainable_parameters: usize,
}

/// One row of `id_compare.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdCompareRow {
    pub strategy: String,
    pub domain_id_accuracy: Option<f64>,
    pub average_accuracy: f64,
    pub avg_task_accuracy: f64,
    pub forgetting: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSearchOutput {
    pub search: LayerSearchReport,
    /// Test identification accuracy of every single layer.
    pub test_single_layer: Vec<(usize, f64)>,
    /// Test identification accuracy of the selected layer set.
    pub test_best: f64,
}

pub fn csv_string<T: Serialize>(rows: &[T]) -> Result<String, ExperimentError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| ExperimentError::Stage {
            stage: "writing csv".into(),
            message: e.to_string(),
        })?;
    }
    let bytes = w.into_inner().map_err(|e| ExperimentError::Stage {
        stage: "writing csv".into(),
        message: e.to_string(),
    })?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn json_string<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report is serialisable");
    s.push('\n');
    s
}

/// Ablation grid over the configured axes, one trained stream per row.
pub fn ablate(cfg: &ExperimentConfig, base: &Prepared) -> Result<Vec<AblationRow>, ExperimentError> {
    let prepared = match &cfg.domain_order {
        Some(order) => base.reordered(order)?,
        None => base.clone(),
    };
    let features = IdFeatures::build(&prepared)?;
    let (layers, _) = resolve_layers(cfg, &features)?;
    let fixed = ExperimentConfig {
        identification: IdentificationConfig {
            layers: LayerChoice::Fixed(layers),
            ..cfg.identification.clone()
        },
        ..cfg.clone()
    };

    let mut settings: Vec<(String, String, ExperimentConfig)> = Vec::new();
    for v in &cfg.ablation.variants {
        let mut c = fixed.clone();
        c.loss.variant = *v;
        settings.push(("variant".into(), v.name().into(), c));
    }
    for &l in &cfg.ablation.lambdas {
        let mut c = fixed.clone();
        c.loss.lambda = l;
        settings.push(("lambda".into(), l.to_string(), c));
    }
    for &p in &cfg.ablation.prompt_lengths {
        let mut c = fixed.clone();
        c.model.prompt_length = p;
        settings.push(("prompt_length".into(), p.to_string(), c));
    }
    for &s in &cfg.ablation.share {
        let mut c = fixed.clone();
        c.model.share = s;
        settings.push(("share".into(), s.to_string(), c));
    }
    if cfg.ablation.components {
        for (name, lambda, aggregation) in [
            ("baseline", 0.0, false),
            ("alignment", cfg.loss.lambda, false),
            ("full", cfg.loss.lambda, true),
        ] {
            let mut c = fixed.clone();
            c.loss.lambda = lambda;
            c.model.aggregation = aggregation;
            settings.push(("components".into(), name.into(), c));
        }
    }

    let mut rows = Vec::new();
    for (axis, setting, c) in &settings {
        log::info!("ablation {axis} = {setting}");
        rows.push(ablation_row(axis, setting, c, &prepared, &features)?);
    }
    for order in &cfg.ablation.orders {
        let p = base.reordered(order)?;
        let f = IdFeatures::build(&p)?;
        let setting = order.iter().map(usize::to_string).collect::<Vec<_>>().join(" ");
        log::info!("ablation order = {setting}");
        rows.push(ablation_row("order", &setting, &fixed, &p, &f)?);
    }
    Ok(rows)
}

fn ablation_row(
    axis: &str,
    setting: &str,
    cfg: &ExperimentConfig,
    prepared: &Prepared,
    features: &IdFeatures,
) -> Result<AblationRow, ExperimentError> {
    let run = train_run(cfg, prepared, features)?;
    let eval = run.evaluate(cfg, prepared)?;
    Ok(AblationRow {
        axis: axis.into(),
        setting: setting.into(),
        average_accuracy: eval.report.average_accuracy,
        avg_task_accuracy: eval.report.avg_task_accuracy,
        forgetting: eval.report.forgetting,
        domain_id_accuracy: eval.report.domain_id_accuracy,
        trainable_parameters: run.trained.model.trainable_parameter_count(),
    })
}

/// Trains once and routes the same model with every identification
/// strategy, plus the oracle.
pub fn id_compare(cfg: &ExperimentConfig, prepared: &Prepared) -> Result<Vec<IdCompareRow>, ExperimentError> {
    let features = IdFeatures::build(prepared)?;
    let (layers, _) = resolve_layers(cfg, &features)?;
    let trained = train_sequence(cfg, prepared, |_, _| Ok(()))?;
    let mut rows = Vec::new();
    let oracle = evaluate(&trained.model, &prepared.datasets, None, None)?;
    rows.push(IdCompareRow {
        strategy: Routing::Oracle.name().into(),
        domain_id_accuracy: Some(1.0),
        average_accuracy: oracle.report.average_accuracy,
        avg_task_accuracy: oracle.report.avg_task_accuracy,
        forgetting: oracle.report.forgetting,
    });
    for routing in Routing::STRATEGIES {
        let router = Router::build(cfg.id_strategy(routing), &layers, prepared, &features)?;
        let a_cls = router.accuracy()?;
        let eval = evaluate(&trained.model, &prepared.datasets, Some(&router), Some(a_cls))?;
        rows.push(IdCompareRow {
            strategy: routing.name().into(),
            domain_id_accuracy: Some(a_cls),
            average_accuracy: eval.report.average_accuracy,
            avg_task_accuracy: eval.report.avg_task_accuracy,
            forgetting: eval.report.forgetting,
        });
    }
    Ok(rows)
}

/// Searches layers on the training hold-out and scores the single layers
/// and the selected set on the test split.
pub fn layer_search(prepared: &Prepared) -> Result<LayerSearchOutput, ExperimentError> {
    let features = IdFeatures::build(prepared)?;
    let search = search_layers(&features)?;
    let score = |layers: &LayerSet| -> Result<f64, ExperimentError> {
        let bank = mlfi_bank(&features.train, layers).map_err(at("layer search"))?;
        identification_accuracy(&bank, &features.test).map_err(at("layer search"))
    };
    let test_single_layer = (1..=prepared.encoder.depth())
        .map(|l| Ok((l, score(&LayerSet::single(l).map_err(at("layer search"))?)?)))
        .collect::<Result<Vec<_>, ExperimentError>>()?;
    let test_best = score(&search.best)?;
    Ok(LayerSearchOutput {
        search,
        test_single_layer,
        test_best,
    })
}

// ---------------------------------------------------------------------------
// Subcommands

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Command {
    GenData,
    Train,
    /// Evaluates a checkpoint; `<output>/checkpoint.json` when `None`.
    Eval { checkpoint: Option<PathBuf> },
    Ablate,
    LayerSearch,
    IdCompare,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Train => "train",
            Command::Eval { .. } => "eval",
            Command::Ablate => "ablate",
            Command::LayerSearch => "layer-search",
            Command::IdCompare => "id-compare",
        }
    }
}

fn write(path: PathBuf, contents: impl AsRef<[u8]>) -> Result<PathBuf, ExperimentError> {
    fs::write(&path, contents).map_err(|source| ExperimentError::Io {
        path: path.clone(),
        source,
    })?;
    Ok(path)
}

/// Checks that a checkpoint was trained on the stream `prepared` describes.
fn check_compatible(ck: &Checkpoint, cfg: &ExperimentConfig, prepared: &Prepared) -> Result<(), ExperimentError> {
    let encoder = match &prepared.encoder {
        FeatureEncoder::Transformer(b) => EncoderSpec::Transformer(b.config().clone()),
        FeatureEncoder::Precomputed { dim } => EncoderSpec::Precomputed { dim: *dim },
    };
    if ck.encoder != encoder {
        return Err(ExperimentError::config("backbone", "checkpoint was trained with a different encoder"));
    }
    if ck.class_names != prepared.text.class_names() {
        return Err(ExperimentError::config("anchors", "checkpoint class names differ from the anchors"));
    }
    if ck.domain_names != prepared.domain_names() {
        return Err(ExperimentError::config(
            "domain_order",
            format!("checkpoint stream {:?} differs from {:?}", ck.domain_names, prepared.domain_names()),
        ));
    }
    if cfg.identification.routing != Routing::Oracle {
        let wanted = cfg.id_strategy(cfg.identification.routing);
        if ck.bank.as_ref().map(|(s, _)| s) != Some(&wanted) {
            return Err(ExperimentError::config(
                "identification.routing",
                format!("checkpoint holds no {} prototypes", wanted.name()),
            ));
        }
    }
    Ok(())
}

/// Runs a subcommand and returns the artifacts it wrote.
pub fn run(command: &Command, cfg: &ExperimentConfig) -> Result<Vec<PathBuf>, ExperimentError> {
    let out = cfg.output_dir();
    fs::create_dir_all(&out).map_err(|source| ExperimentError::Io {
        path: out.clone(),
        source,
    })?;
    let mut artifacts = vec![write(out.join("config.resolved.toml"), cfg.to_toml())?];
    match command {
        Command::GenData => {
            let prepared = prepare(cfg)?;
            artifacts.push(write(out.join("datasets.json"), json_string(&prepared.datasets))?);
        }
        Command::Train => {
            let prepared = prepare(cfg)?;
            let features = IdFeatures::build(&prepared)?;
            let run = train_run(cfg, &prepared, &features)?;
            artifacts.push(write(out.join("checkpoint.json"), run.checkpoint(&prepared).to_json())?);
            artifacts.push(write(out.join("train_log.json"), json_string(&run.trained.logs))?);
            if let Some(report) = &run.layer_search {
                artifacts.push(write(out.join("layer_search.json"), json_string(report))?);
            }
        }
        Command::Eval { checkpoint } => {
            let path = checkpoint.clone().unwrap_or_else(|| out.join("checkpoint.json"));
            let ck = Checkpoint::load(&path)?;
            let prepared = prepare(cfg)?;
            check_compatible(&ck, cfg, &prepared)?;
            let model = ck.restore()?;
            let features = IdFeatures::build(&prepared)?;
            let (strategy, bank) = ck
                .bank
                .clone()
                .ok_or_else(|| ExperimentError::config("identification", "checkpoint holds no prototypes"))?;
            let test = match &strategy {
                IdStrategy::Pss { seed } => IdFeatures::build_shuffled(&prepared, *seed)?.test,
                _ => features.test,
            };
            let router = Router { strategy, bank, test };
            let a_cls = router.accuracy()?;
            let routed = (cfg.identification.routing != Routing::Oracle).then_some(&router);
            let eval = evaluate(&model, &prepared.datasets, routed, Some(a_cls))?;
            let summary = Summary {
                routing: cfg.identification.routing,
                strategy: router.strategy.clone(),
                layers: router.bank.layers.clone(),
                domains: prepared.domain_names(),
                trainable_parameters: model.trainable_parameter_count(),
                metrics: eval.report,
            };
            artifacts.push(write(out.join("metrics.csv"), eval.matrix.to_csv())?);
            artifacts.push(write(out.join("summary.json"), json_string(&summary))?);
        }
        Command::Ablate => {
            let rows = ablate(cfg, &prepare_unordered(cfg)?)?;
            artifacts.push(write(out.join("ablation.csv"), csv_string(&rows)?)?);
        }
        Command::LayerSearch => {
            let output = layer_search(&prepare(cfg)?)?;
            artifacts.push(write(out.join("layer_search.json"), json_string(&output))?);
        }
        Command::IdCompare => {
            let rows = id_compare(cfg, &prepare(cfg)?)?;
            artifacts.push(write(out.join("id_compare.csv"), csv_string(&rows)?)?);
        }
    }
    Ok(artifacts)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny() -> ExperimentConfig {
        let text = r#"
            seed = 3
            [benchmark]
            domains = 2
            classes = 4
            train_per_class = 4
            test_per_class = 3
            patch_count = 4
            dim = 8
            class_groups = 2
            [backbone]
            depth = 2
            heads = 2
            [anchors]
            dim = 8
            [optimizer]
            epochs = 2
            batch_size = 8
            [model]
            prompt_length = 2
            [identification]
            layers = [1, 2]
        "#;
        ExperimentConfig::resolve(text, &[]).unwrap()
    }

    #[test]
    fn defaults_resolve_and_echo() {
        let cfg = ExperimentConfig::resolve("", &[]).unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        let echoed = ExperimentConfig::resolve(&cfg.to_toml(), &[]).unwrap();
        assert_eq!(echoed, cfg);
        let t = tiny();
        assert_eq!(t.backbone.hidden_dim, 8);
        assert_eq!(t.backbone.patch_count, 4);
        assert_eq!(ExperimentConfig::resolve(&t.to_toml(), &[]).unwrap(), t);
    }

    #[test]
    fn errors_name_the_field() {
        let err = ExperimentConfig::resolve("[optimizer]\nlrr = 0.1\n", &[]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("optimizer"), "{err}");
        let err = ExperimentConfig::resolve("[loss]\nvariant = \"kl2\"\n", &[]).unwrap_err();
        assert!(err.to_string().contains("loss.variant"), "{err}");
        let err = ExperimentConfig::resolve("[backbone]\nhidden_dim = 16\n", &[]).unwrap_err();
        assert!(err.to_string().contains("backbone.hidden_dim"), "{err}");
        let err = ExperimentConfig::resolve("domain_order = [0, 0, 1, 2]\n", &[]).unwrap_err();
        assert!(err.to_string().contains("domain_order"), "{err}");
        let err = ExperimentConfig::resolve("[identification]\nlayers = \"all\"\n", &[]).unwrap_err();
        assert!(err.to_string().contains("identification.layers"), "{err}");
        let err = ExperimentConfig::resolve("[identification]\nlayers = [9]\n", &[]).unwrap_err();
        assert!(err.to_string().contains("identification.layers"), "{err}");
    }

    #[test]
    fn overrides_take_precedence() {
        let cfg = ExperimentConfig::resolve(
            "[loss]\nlambda = 0.2\n",
            &[
                "loss.lambda=1.0".into(),
                "loss.variant=l2".into(),
                "identification.layers=[2, 3]".into(),
                "seed = 9".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.loss.lambda, 1.0);
        assert_eq!(cfg.loss.variant, AlignmentVariant::L2);
        assert_eq!(cfg.identification.layers, LayerChoice::Fixed(LayerSet::new(vec![2, 3]).unwrap()));
        assert_eq!(cfg.seed, 9);
        assert!(ExperimentConfig::resolve("", &["seed".into()]).is_err());
        assert!(ExperimentConfig::resolve("", &["seed.x=1".into()]).is_err());
    }

    #[test]
    fn staged_evaluation_matches_stage_by_stage_models() {
        let cfg = tiny();
        let prepared = prepare(&cfg).unwrap();
        let features = IdFeatures::build(&prepared).unwrap();
        let layers = LayerSet::new(vec![1, 2]).unwrap();
        let router = Router::build(IdStrategy::Mlfi, &layers, &prepared, &features).unwrap();
        let mut snapshots = Vec::new();
        let trained = train_sequence(&cfg, &prepared, |_, m| {
            snapshots.push(m.clone());
            Ok(())
        })
        .unwrap();
        let eval = evaluate(&trained.model, &prepared.datasets, Some(&router), None).unwrap();
        for (j, snapshot) in snapshots.iter().enumerate() {
            for i in 0..=j {
                let bank = router.bank.restricted(j + 1);
                let correct = prepared.datasets[i]
                    .test
                    .iter()
                    .enumerate()
                    .filter(|(idx, s)| {
                        let d = bank.identify_cached(&router.test[i], *idx).unwrap();
                        snapshot.predict(&s.tokens, d).unwrap() == s.label
                    })
                    .count() as u64;
                assert_eq!(eval.matrix.correct(j, i), Some(correct));
            }
        }
        let oracle = evaluate(&trained.model, &prepared.datasets, None, None).unwrap();
        assert_eq!(oracle.report.forgetting, Some(0.0));
    }

    #[test]
    fn numeric_failures_use_exit_code_three() {
        let e = at::<TrainError>("training domain 0")(TrainError::NonFinite { epoch: 1, step: 2 });
        assert_eq!(e.exit_code(), 3);
        assert!(e.to_string().contains("training domain 0"));
        let e = at::<TrainError>("x")(TrainError::State("s".into()));
        assert_eq!(e.exit_code(), 1);
    }

    #[test]
    fn csv_rows_are_quoted() {
        let rows = vec![AblationRow {
            axis: "order".into(),
            setting: "1,0".into(),
            average_accuracy: 0.5,
            avg_task_accuracy: 0.25,
            forgetting: None,
            domain_id_accuracy: Some(1.0),
            trainable_parameters: 7,
        }];
        assert_eq!(
            csv_string(&rows).unwrap(),
            "axis,setting,average_accuracy,avg_task_accuracy,forgetting,domain_id_accuracy,trainable_parameters\n\
             order,\"1,0\",0.5,0.25,,1.0,7\n"
        );
    }
}
