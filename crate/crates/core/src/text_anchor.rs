//! Frozen text-side reference anchors and relative encodings.
//!
//! A relative encoding describes a vector by its cosine similarity to every
//! row of an anchor set. The text anchor set is immutable; the reference
//! encoding of class `y` is row `y` of its cosine Gram matrix, which is
//! computed once at construction.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{cosine_similarity, random_orthonormal, Matrix, NumericsError};

/// Tolerance on the realised Gram matrix of synthetic anchors.
pub const SYNTH_GRAM_TOLERANCE: f64 = 0.05;

#[derive(Debug, Error)]
pub enum AnchorError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("anchor file format: {0}")]
    Format(String),
    #[error("cannot realise anchor geometry: {0}")]
    Generation(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Which anchor set produced a [`RelativeEncoding`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AnchorTag {
    Text,
    Visual { domain: usize },
    Global { domains: usize },
    Other,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelativeEncoding {
    pub values: Vec<f64>,
    pub tag: AnchorTag,
}

impl RelativeEncoding {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Cosine similarity of `v` against every row of `anchors`, in row order.
pub fn relative_encoding(
    v: &[f64],
    anchors: &Matrix,
    tag: AnchorTag,
) -> Result<RelativeEncoding, NumericsError> {
    if v.len() != anchors.cols() {
        return Err(NumericsError::DimensionMismatch(format!(
            "vector of length {} against {}-dim anchors",
            v.len(),
            anchors.cols()
        )));
    }
    let values = anchors
        .row_iter()
        .map(|a| cosine_similarity(v, a))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(RelativeEncoding { values, tag })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum AnchorSource {
    File { encoder: String },
    Synthetic { seed: u64 },
}

/// Class grouping used to synthesise anchors (and, in the benchmark
/// generator, class means) with a known similarity structure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupStructure {
    /// Group id of every class.
    pub groups: Vec<usize>,
    /// Target cosine between classes in the same group.
    pub intra: f64,
    /// Target cosine between classes in different groups.
    pub inter: f64,
}

impl GroupStructure {
    /// `n_classes` split into `n_groups` contiguous groups of near-equal size.
    pub fn contiguous(n_classes: usize, n_groups: usize, intra: f64, inter: f64) -> Self {
        let n_groups = n_groups.clamp(1, n_classes.max(1));
        Self {
            groups: (0..n_classes).map(|c| c * n_groups / n_classes.max(1)).collect(),
            intra,
            inter,
        }
    }

    /// Mutually orthogonal classes.
    pub fn orthogonal(n_classes: usize) -> Self {
        Self {
            groups: (0..n_classes).collect(),
            intra: 0.0,
            inter: 0.0,
        }
    }

    pub fn target_gram(&self) -> Matrix {
        let n = self.groups.len();
        Matrix::from_fn(n, n, |i, j| {
            if i == j {
                1.0
            } else if self.groups[i] == self.groups[j] {
                self.intra
            } else {
                self.inter
            }
        })
    }
}

/// Unit vectors (`n × dim`) whose cosine Gram matrix realises `structure`
/// to within [`SYNTH_GRAM_TOLERANCE`], rotated by a seeded random basis.
pub fn synth_unit_vectors(
    structure: &GroupStructure,
    dim: usize,
    seed: u64,
) -> Result<Matrix, AnchorError> {
    let n = structure.groups.len();
    if n == 0 || dim == 0 {
        return Err(AnchorError::Generation("need at least one class and one dimension".into()));
    }
    if !(0.0..1.0).contains(&structure.intra) {
        return Err(AnchorError::Generation(format!(
            "intra-group similarity {} outside [0, 1)",
            structure.intra
        )));
    }
    if !(structure.inter > -1.0 && structure.inter < 1.0) {
        return Err(AnchorError::Generation(format!(
            "inter-group similarity {} outside (-1, 1)",
            structure.inter
        )));
    }
    let target = structure.target_gram();
    let eig = DMatrix::from_row_slice(n, n, target.as_slice()).symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    if eig.eigenvalues[order[n - 1]] < -1e-9 {
        return Err(AnchorError::Generation(format!(
            "target Gram matrix is not positive semidefinite (eigenvalue {:.3e})",
            eig.eigenvalues[order[n - 1]]
        )));
    }
    let kept: Vec<usize> = order
        .into_iter()
        .filter(|&i| eig.eigenvalues[i] > 1e-12)
        .take(dim)
        .collect();
    let k = kept.len();
    let raw = Matrix::from_fn(n, k, |r, c| {
        eig.eigenvectors[(r, kept[c])] * eig.eigenvalues[kept[c]].sqrt()
    });
    if raw.row_iter().any(|r| crate::numerics::norm(r) < 0.5) {
        return Err(AnchorError::Generation(format!(
            "{n} classes cannot be placed in {dim} dimensions"
        )));
    }
    let coords = raw.normalize_rows();
    let realised = coords.matmul_transposed(&coords)?;
    let err = realised.sub(&target)?.max_abs();
    if err > SYNTH_GRAM_TOLERANCE {
        return Err(AnchorError::Generation(format!(
            "best rank-{k} realisation misses the target Gram by {err:.3}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let basis = random_orthonormal(&mut rng, dim, k);
    Ok(coords.matmul_transposed(&basis)?.normalize_rows())
}

/// `A^Text` with its class-name index map and cached reference encodings.
#[derive(Debug, Clone, PartialEq)]
pub struct TextAnchorSet {
    anchors: Matrix,
    class_names: Vec<String>,
    source: AnchorSource,
    gram: Matrix,
}

impl TextAnchorSet {
    /// Normalises rows and caches the Gram matrix.
    pub fn new(
        embeddings: Matrix,
        class_names: Vec<String>,
        source: AnchorSource,
    ) -> Result<Self, AnchorError> {
        if embeddings.rows() != class_names.len() || embeddings.rows() == 0 {
            return Err(AnchorError::Format(format!(
                "{} embeddings for {} class names",
                embeddings.rows(),
                class_names.len()
            )));
        }
        let mut seen = HashSet::new();
        for name in &class_names {
            if name.is_empty() {
                return Err(AnchorError::Format("empty class name".into()));
            }
            if !seen.insert(name.as_str()) {
                return Err(AnchorError::Format(format!("duplicate class name {name:?}")));
            }
        }
        if let Some(r) = embeddings
            .row_iter()
            .position(|row| crate::numerics::norm(row) <= crate::numerics::EPS)
        {
            return Err(AnchorError::Format(format!(
                "embedding for {:?} has zero norm",
                class_names[r]
            )));
        }
        let anchors = embeddings.normalize_rows();
        let n = anchors.rows();
        let mut gram = Vec::with_capacity(n * n);
        for row in anchors.row_iter() {
            gram.extend(relative_encoding(row, &anchors, AnchorTag::Text)?.values);
        }
        let gram = Matrix::from_vec(n, n, gram)?;
        Ok(Self {
            anchors,
            class_names,
            source,
            gram,
        })
    }

    pub fn anchors(&self) -> &Matrix {
        &self.anchors
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn source(&self) -> &AnchorSource {
        &self.source
    }

    pub fn num_classes(&self) -> usize {
        self.anchors.rows()
    }

    pub fn dim(&self) -> usize {
        self.anchors.cols()
    }

    /// Cosine Gram matrix; row `y` is the reference encoding of class `y`.
    pub fn gram(&self) -> &Matrix {
        &self.gram
    }

    /// `rel(A^Text[label], A^Text)`, served from the cached Gram matrix.
    pub fn reference_encoding(&self, label: usize) -> Result<RelativeEncoding, AnchorError> {
        if label >= self.num_classes() {
            return Err(AnchorError::Contract(format!(
                "label {label} outside 0..{}",
                self.num_classes()
            )));
        }
        Ok(RelativeEncoding {
            values: self.gram.row(label).to_vec(),
            tag: AnchorTag::Text,
        })
    }

    pub fn relative_encoding(&self, v: &[f64]) -> Result<RelativeEncoding, AnchorError> {
        Ok(relative_encoding(v, &self.anchors, AnchorTag::Text)?)
    }

    /// Byte image of names and anchor values, for immutability checks.
    pub fn fingerprint(&self) -> Vec<u8> {
        let mut out = self.anchors.to_le_bytes();
        for name in &self.class_names {
            out.extend(name.as_bytes());
            out.push(0);
        }
        out
    }
}

/// Anchors for `n_classes` classes whose pairwise cosines follow `structure`.
pub fn synth_text_anchors(
    n_classes: usize,
    dim: usize,
    structure: &GroupStructure,
    seed: u64,
) -> Result<TextAnchorSet, AnchorError> {
    if structure.groups.len() != n_classes {
        return Err(AnchorError::Generation(format!(
            "group structure covers {} classes, expected {n_classes}",
            structure.groups.len()
        )));
    }
    let vectors = synth_unit_vectors(structure, dim, seed)?;
    let names = (0..n_classes).map(|c| format!("class_{c:02}")).collect();
    TextAnchorSet::new(vectors, names, AnchorSource::Synthetic { seed })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnchorHeader {
    dim: usize,
    count: usize,
    encoder: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AnchorLine {
    class: String,
    embedding: Vec<f64>,
}

/// Reads an anchor JSON Lines file: a header `{"dim","count","encoder"}`
/// followed by `count` lines of `{"class","embedding"}`.
pub fn load_text_anchors(path: impl AsRef<Path>) -> Result<TextAnchorSet, AnchorError> {
    let text = fs::read_to_string(path)?;
    parse_text_anchors(&text)
}

pub fn parse_text_anchors(text: &str) -> Result<TextAnchorSet, AnchorError> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.trim().is_empty());
    let (_, header_line) = lines
        .next()
        .ok_or_else(|| AnchorError::Format("empty anchor file".into()))?;
    let header: AnchorHeader = serde_json::from_str(header_line).map_err(|e| AnchorError::Parse {
        line: 1,
        message: format!("header: {e}"),
    })?;
    if header.dim == 0 || header.count == 0 {
        return Err(AnchorError::Format("header dim and count must be positive".into()));
    }
    let mut names = Vec::with_capacity(header.count);
    let mut values = Vec::with_capacity(header.count * header.dim);
    for (line, raw) in lines {
        let entry: AnchorLine = serde_json::from_str(raw).map_err(|e| AnchorError::Parse {
            line,
            message: e.to_string(),
        })?;
        if entry.embedding.len() != header.dim {
            return Err(AnchorError::Format(format!(
                "line {line}: embedding has {} values, header says {}",
                entry.embedding.len(),
                header.dim
            )));
        }
        names.push(entry.class);
        values.extend(entry.embedding);
    }
    if names.len() != header.count {
        return Err(AnchorError::Format(format!(
            "header announces {} classes, file has {}",
            header.count,
            names.len()
        )));
    }
    let embeddings = Matrix::from_vec(names.len(), header.dim, values)?;
    TextAnchorSet::new(
        embeddings,
        names,
        AnchorSource::File {
            encoder: header.encoder,
        },
    )
}

/// Writes embeddings in the anchor file format. Numbers use shortest
/// round-trip formatting.
pub fn write_text_anchors(
    path: impl AsRef<Path>,
    encoder: &str,
    class_names: &[String],
    embeddings: &Matrix,
) -> Result<(), AnchorError> {
    if class_names.len() != embeddings.rows() {
        return Err(AnchorError::Format("one embedding per class name required".into()));
    }
    let mut out = Vec::new();
    let header = AnchorHeader {
        dim: embeddings.cols(),
        count: embeddings.rows(),
        encoder: encoder.to_string(),
    };
    writeln!(out, "{}", serde_json::to_string(&header).expect("serialisable"))?;
    for (name, row) in class_names.iter().zip(embeddings.row_iter()) {
        let line = AnchorLine {
            class: name.clone(),
            embedding: row.to_vec(),
        };
        writeln!(out, "{}", serde_json::to_string(&line).expect("serialisable"))?;
    }
    fs::write(path, out)?;
    Ok(())
}
