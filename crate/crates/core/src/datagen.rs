//! Synthetic multi-domain benchmark, domain-order permutation and the
//! feature JSON Lines format.
//!
//! Every domain shares one set of base class means. A domain sees them
//! through its own rotation, translation and noise level; the geometry knob
//! blends the shared means with per-domain independent ones.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{gaussian_matrix, uniform_rotation, Matrix, NumericsError};
use crate::text_anchor::{synth_unit_vectors, AnchorError, GroupStructure};

#[derive(Debug, Error)]
pub enum DatagenError {
    #[error("invalid benchmark configuration: {0}")]
    Config(String),
    #[error("generation failed: {0}")]
    Generation(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("malformed feature file: {0}")]
    Format(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One input: a patch-token grid (`patches × D`), or a single precomputed
/// feature row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub tokens: Matrix,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainDataset {
    /// Identity of the domain, kept through reordering.
    pub domain: usize,
    pub name: String,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    /// Realised class means (rows) for synthetic domains.
    pub class_means: Option<Matrix>,
}

impl DomainDataset {
    /// Little-endian dump of every sample, for byte-level comparisons.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for s in self.train.iter().chain(&self.test) {
            out.extend((s.label as u64).to_le_bytes());
            out.extend(s.tokens.to_le_bytes());
        }
        out
    }
}

/// Extra domain-discriminative structure injected into designated domains.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CueKind {
    /// Constant offset on every patch along a fixed direction.
    Offset,
    /// Offset whose sign alternates between neighbouring patches, so the
    /// patch average carries none of it.
    Alternating,
    /// Multiplies the patch-noise level.
    NoiseScale,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainCue {
    pub domain: usize,
    pub kind: CueKind,
    pub strength: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchmarkConfig {
    pub domains: usize,
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub patch_count: usize,
    pub dim: usize,
    /// Class grouping of the base means (and of synthetic text anchors).
    pub class_groups: usize,
    pub intra: f64,
    pub inter: f64,
    /// Norm of every class mean.
    pub class_scale: f64,
    /// Angle (radians) by which each domain turns every class mean.
    pub rotation: f64,
    /// Norm of the per-domain translation.
    pub translation: f64,
    /// Per-coordinate standard deviation of the patch noise.
    pub noise: f64,
    /// Per-coordinate standard deviation of a per-sample offset shared by
    /// all of its patches.
    pub sample_noise: f64,
    /// 1 keeps the base class geometry in every domain, 0 draws independent
    /// class means per domain.
    pub geometry: f64,
    /// Use the built-in complementary-cue layout when `cues` is empty.
    pub complementary_cue: bool,
    pub cues: Vec<DomainCue>,
    pub seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            domains: 4,
            classes: 8,
            train_per_class: 16,
            test_per_class: 16,
            patch_count: 8,
            dim: 32,
            class_groups: 4,
            intra: 0.5,
            inter: 0.0,
            class_scale: 4.0,
            rotation: 0.5,
            translation: 1.0,
            noise: 0.6,
            sample_noise: 0.2,
            geometry: 1.0,
            complementary_cue: false,
            cues: Vec::new(),
            seed: 0,
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<(), DatagenError> {
        let fail = |m: String| Err(DatagenError::Config(m));
        if self.domains == 0 {
            return fail("domains must be at least 1".into());
        }
        if self.classes < 2 {
            return fail("classes must be at least 2".into());
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return fail("every class needs train and test samples".into());
        }
        if self.patch_count == 0 || self.dim == 0 {
            return fail("patch_count and dim must be positive".into());
        }
        for (name, v) in [
            ("noise", self.noise),
            ("sample_noise", self.sample_noise),
            ("translation", self.translation),
            ("class_scale", self.class_scale),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(format!("{name} must be non-negative, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.geometry) {
            return fail(format!("geometry must lie in [0, 1], got {}", self.geometry));
        }
        if !self.rotation.is_finite() {
            return fail("rotation must be finite".into());
        }
        for cue in &self.cues {
            if cue.domain >= self.domains {
                return fail(format!("cue for domain {} of {}", cue.domain, self.domains));
            }
            if !(cue.strength >= 0.0 && cue.strength.is_finite()) {
                return fail(format!("cue strength {} must be non-negative", cue.strength));
            }
        }
        Ok(())
    }

    pub fn group_structure(&self) -> GroupStructure {
        GroupStructure::contiguous(self.classes, self.class_groups, self.intra, self.inter)
    }

    /// The cues in effect: the explicit list, or the built-in layout when
    /// `complementary_cue` is set and the list is empty.
    pub fn effective_cues(&self) -> Vec<DomainCue> {
        if self.cues.is_empty() && self.complementary_cue {
            complementary_cues(self.domains)
        } else {
            self.cues.clone()
        }
    }
}

/// Built-in layout for layer-search experiments. Domain 1 carries a constant
/// offset, strongest at the first layer and diluted deeper; domain 2 carries a
/// large alternating offset, which cancels under uniform first-layer pooling
/// (a zero class token) and only surfaces after the patch MLPs. Domain 3, if
/// present, carries both; domain 0 and the rest carry none.
pub fn complementary_cues(domains: usize) -> Vec<DomainCue> {
    const SHALLOW: (CueKind, f64) = (CueKind::Offset, 2.5);
    const DEEP: (CueKind, f64) = (CueKind::Alternating, 96.0);
    let layout: [(usize, (CueKind, f64)); 4] = [(1, SHALLOW), (2, DEEP), (3, SHALLOW), (3, DEEP)];
    layout
        .into_iter()
        .filter(|&(domain, _)| domain < domains)
        .map(|(domain, (kind, strength))| DomainCue { domain, kind, strength })
        .collect()
}

fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn unit_direction<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Vec<f64> {
    gaussian_matrix(rng, 1, dim, 1.0).normalize_rows().into_vec()
}

pub fn generate_benchmark(cfg: &BenchmarkConfig) -> Result<Vec<DomainDataset>, DatagenError> {
    cfg.validate()?;
    let base = synth_unit_vectors(&cfg.group_structure(), cfg.dim, cfg.seed).map_err(|e| match e {
        AnchorError::Generation(m) => DatagenError::Generation(m),
        other => DatagenError::Generation(other.to_string()),
    })?;
    let cues = cfg.effective_cues();
    (0..cfg.domains)
        .map(|t| generate_domain(cfg, &base, &cues, t))
        .collect()
}

fn generate_domain(
    cfg: &BenchmarkConfig,
    base: &Matrix,
    cues: &[DomainCue],
    t: usize,
) -> Result<DomainDataset, DatagenError> {
    let d = cfg.dim;
    let mut rng = seeded(cfg.seed, 1 + t as u64);
    let kappa = cfg.geometry;
    let blended = if kappa == 1.0 {
        base.clone()
    } else {
        let own = gaussian_matrix(&mut rng, cfg.classes, d, 1.0).normalize_rows();
        let keep = (1.0 - kappa * kappa).sqrt();
        base.scale(kappa).add(&own.scale(keep))?.normalize_rows()
    };
    let means = if cfg.rotation == 0.0 {
        blended
    } else {
        let rotation = uniform_rotation(&mut rng, d, cfg.rotation);
        blended.matmul_transposed(&rotation)?
    }
    .scale(cfg.class_scale);
    let shift: Vec<f64> = unit_direction(&mut rng, d)
        .into_iter()
        .map(|v| v * cfg.translation)
        .collect();

    let mut noise = cfg.noise;
    let mut offsets: Vec<(CueKind, Vec<f64>)> = Vec::new();
    let mut cue_rng = seeded(cfg.seed, 1_000 + t as u64);
    for cue in cues.iter().filter(|c| c.domain == t) {
        match cue.kind {
            CueKind::NoiseScale => noise *= cue.strength,
            kind => {
                let dir = unit_direction(&mut cue_rng, d);
                offsets.push((kind, dir.into_iter().map(|v| v * cue.strength).collect()));
            }
        }
    }

    let draw = |count: usize, rng: &mut ChaCha8Rng| -> Vec<Sample> {
        let mut out = Vec::with_capacity(count * cfg.classes);
        for label in 0..cfg.classes {
            for _ in 0..count {
                let sample_offset: Vec<f64> = (0..d)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut *rng);
                        cfg.sample_noise * z
                    })
                    .collect();
                let tokens = Matrix::from_fn(cfg.patch_count, d, |p, c| {
                    let mut v = means.get(label, c) + shift[c] + sample_offset[c];
                    for (kind, dir) in &offsets {
                        v += match kind {
                            CueKind::Alternating if p % 2 == 1 => -dir[c],
                            _ => dir[c],
                        };
                    }
                    let z: f64 = StandardNormal.sample(&mut *rng);
                    v + noise * z
                });
                out.push(Sample { tokens, label });
            }
        }
        out
    };
    let train = draw(cfg.train_per_class, &mut rng);
    let test = draw(cfg.test_per_class, &mut rng);
    Ok(DomainDataset {
        domain: t,
        name: format!("domain_{t}"),
        train,
        test,
        class_means: Some(means),
    })
}

/// Reorders the stream: position `k` receives `datasets[order[k]]`.
pub fn permute_domain_order(
    datasets: Vec<DomainDataset>,
    order: &[usize],
) -> Result<Vec<DomainDataset>, DatagenError> {
    let n = datasets.len();
    let mut seen = vec![false; n];
    if order.len() != n || order.iter().any(|&i| i >= n || std::mem::replace(&mut seen[i], true)) {
        return Err(DatagenError::Contract(format!(
            "{order:?} is not a permutation of 0..{n}"
        )));
    }
    let mut slots: Vec<Option<DomainDataset>> = datasets.into_iter().map(Some).collect();
    Ok(order
        .iter()
        .map(|&i| slots[i].take().expect("each index used once"))
        .collect())
}

#[derive(Debug, Serialize, Deserialize)]
struct FeatureHeader {
    dim: usize,
    count: usize,
    domain: serde_json::Value,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FeatureLine {
    label: usize,
    feature: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<Split>,
}

/// Reads a feature JSON Lines file: a header `{"dim","count","domain"}` and
/// `count` lines of `{"label","feature"}` with an optional `"split"`. Files
/// without split markers send every second sample of each class to test.
pub fn load_feature_dataset(
    path: impl AsRef<Path>,
    domain: usize,
    num_classes: Option<usize>,
) -> Result<DomainDataset, DatagenError> {
    parse_feature_dataset(&fs::read_to_string(path)?, domain, num_classes)
}

pub fn parse_feature_dataset(
    text: &str,
    domain: usize,
    num_classes: Option<usize>,
) -> Result<DomainDataset, DatagenError> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.trim().is_empty());
    let (_, header_line) = lines
        .next()
        .ok_or_else(|| DatagenError::Contract("empty feature file".into()))?;
    let header: FeatureHeader = serde_json::from_str(header_line).map_err(|e| DatagenError::Parse {
        line: 1,
        message: format!("header: {e}"),
    })?;
    if header.dim == 0 || header.count == 0 {
        return Err(DatagenError::Contract("header dim and count must be positive".into()));
    }
    let name = match &header.domain {
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    };
    let mut entries = Vec::with_capacity(header.count);
    for (line, raw) in lines {
        let entry: FeatureLine = serde_json::from_str(raw).map_err(|e| DatagenError::Parse {
            line,
            message: e.to_string(),
        })?;
        if entry.feature.len() != header.dim {
            return Err(DatagenError::Parse {
                line,
                message: format!("feature has {} values, header says {}", entry.feature.len(), header.dim),
            });
        }
        if let Some(n) = num_classes {
            if entry.label >= n {
                return Err(DatagenError::Parse {
                    line,
                    message: format!("label {} out of range for {n} classes", entry.label),
                });
            }
        }
        let tokens = Matrix::from_vec(1, header.dim, entry.feature).map_err(|e| DatagenError::Parse {
            line,
            message: e.to_string(),
        })?;
        entries.push((Sample { tokens, label: entry.label }, entry.split));
    }
    if entries.len() != header.count {
        return Err(DatagenError::Format(format!(
            "header announces {} samples, file has {}",
            header.count,
            entries.len()
        )));
    }
    let classes = entries.iter().map(|(s, _)| s.label + 1).max().unwrap_or(0);
    let mut seen = vec![0usize; classes];
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (sample, split) in entries {
        let split = split.unwrap_or_else(|| {
            seen[sample.label] += 1;
            if seen[sample.label] % 2 == 0 {
                Split::Test
            } else {
                Split::Train
            }
        });
        match split {
            Split::Train => train.push(sample),
            Split::Test => test.push(sample),
        }
    }
    Ok(DomainDataset {
        domain,
        name,
        train,
        test,
        class_means: None,
    })
}

/// Writes single-row samples in the feature format, marking their split.
pub fn write_feature_dataset(path: impl AsRef<Path>, dataset: &DomainDataset) -> Result<(), DatagenError> {
    let dim = dataset
        .train
        .iter()
        .chain(&dataset.test)
        .map(|s| s.tokens.len())
        .next()
        .ok_or_else(|| DatagenError::Contract("dataset has no samples".into()))?;
    let mut out = Vec::new();
    let header = FeatureHeader {
        dim,
        count: dataset.train.len() + dataset.test.len(),
        domain: serde_json::Value::String(dataset.name.clone()),
    };
    writeln!(out, "{}", serde_json::to_string(&header).expect("serialisable"))?;
    for (split, samples) in [(Split::Train, &dataset.train), (Split::Test, &dataset.test)] {
        for s in samples {
            if s.tokens.len() != dim {
                return Err(DatagenError::Contract("samples differ in size".into()));
            }
            let line = FeatureLine {
                label: s.label,
                feature: s.tokens.as_slice().to_vec(),
                split: Some(split),
            };
            writeln!(out, "{}", serde_json::to_string(&line).expect("serialisable"))?;
        }
    }
    fs::write(path, out)?;
    Ok(())
}
