//! Inference-time domain identification.
//!
//! Every strategy reduces to a bank of prototype vectors tagged with their
//! domain; a test sample goes to the domain of the most cosine-similar
//! prototype. Features come from the unprompted encoder pass, since no
//! domain-specific prompt can be chosen before the domain is known.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::patch_shuffle;
use crate::datagen::Sample;
use crate::model::{FeatureEncoder, ModelError};
use crate::numerics::{cosine_similarity_flagged, NumericsError};

#[derive(Debug, Error)]
pub enum IdError {
    #[error("invalid identification configuration: {0}")]
    Config(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("identification state: {0}")]
    State(String),
    #[error("clustering failed: {0}")]
    Clustering(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Sorted, deduplicated, non-empty set of 1-based tap layers.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct LayerSet(Vec<usize>);

impl LayerSet {
    pub fn new(mut layers: Vec<usize>) -> Result<Self, IdError> {
        layers.sort_unstable();
        layers.dedup();
        if layers.is_empty() || layers[0] == 0 {
            return Err(IdError::Config(format!("invalid layer set {layers:?}")));
        }
        Ok(Self(layers))
    }

    pub fn single(layer: usize) -> Result<Self, IdError> {
        Self::new(vec![layer])
    }

    pub fn layers(&self) -> &[usize] {
        &self.0
    }

    pub fn check_depth(&self, depth: usize) -> Result<(), IdError> {
        match self.0.last() {
            Some(&l) if l <= depth => Ok(()),
            _ => Err(IdError::Config(format!(
                "layer set {:?} exceeds encoder depth {depth}",
                self.0
            ))),
        }
    }
}

impl TryFrom<Vec<usize>> for LayerSet {
    type Error = IdError;
    fn try_from(v: Vec<usize>) -> Result<Self, IdError> {
        Self::new(v)
    }
}

impl From<LayerSet> for Vec<usize> {
    fn from(s: LayerSet) -> Self {
        s.0
    }
}

/// Unprompted per-layer features of a sample list, `taps[i][l - 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureCache {
    taps: Vec<Vec<Vec<f64>>>,
    depth: usize,
}

impl FeatureCache {
    pub fn build(encoder: &FeatureEncoder, samples: &[Sample]) -> Result<Self, IdError> {
        let taps = samples
            .par_iter()
            .map(|s| encoder.unprompted_taps(&s.tokens))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            taps,
            depth: encoder.depth(),
        })
    }

    /// Final-layer features of patch-shuffled copies; sample `i` uses seed
    /// `seed + i`.
    pub fn build_shuffled(encoder: &FeatureEncoder, samples: &[Sample], seed: u64) -> Result<Self, IdError> {
        let taps = samples
            .par_iter()
            .enumerate()
            .map(|(i, s)| encoder.unprompted_taps(&patch_shuffle(&s.tokens, seed.wrapping_add(i as u64))))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self {
            taps,
            depth: encoder.depth(),
        })
    }

    pub fn from_taps(taps: Vec<Vec<Vec<f64>>>) -> Result<Self, IdError> {
        let depth = taps.first().map_or(0, Vec::len);
        if taps.iter().any(|t| t.len() != depth) {
            return Err(IdError::Contract("samples expose different numbers of layers".into()));
        }
        Ok(Self { taps, depth })
    }

    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            taps: indices.iter().map(|&i| self.taps[i].clone()).collect(),
            depth: self.depth,
        }
    }

    /// Concatenated features of sample `i` at `layers`, ascending.
    pub fn multi_level(&self, i: usize, layers: &LayerSet) -> Vec<f64> {
        multi_level_feature(&self.taps[i], layers)
    }
}

/// Concatenation of the per-layer features in ascending layer order.
pub fn multi_level_feature(taps: &[Vec<f64>], layers: &LayerSet) -> Vec<f64> {
    layers
        .layers()
        .iter()
        .flat_map(|&l| taps[l - 1].iter().copied())
        .collect()
}

/// A prototype vector of one domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainPrototype {
    pub domain: usize,
    pub mean: Vec<f64>,
    /// Samples averaged into `mean`.
    pub count: usize,
}

fn mean_of<'a>(rows: impl Iterator<Item = &'a [f64]>) -> (Vec<f64>, usize) {
    let mut sum: Vec<f64> = Vec::new();
    let mut n = 0;
    for r in rows {
        if sum.is_empty() {
            sum = vec![0.0; r.len()];
        }
        sum.iter_mut().zip(r).for_each(|(s, v)| *s += v);
        n += 1;
    }
    let inv = 1.0 / n.max(1) as f64;
    (sum.into_iter().map(|s| s * inv).collect(), n)
}

/// Label-agnostic mean of the multi-level features of a domain's samples.
pub fn build_prototype(domain: usize, cache: &FeatureCache, layers: &LayerSet) -> Result<DomainPrototype, IdError> {
    if cache.is_empty() {
        return Err(IdError::Contract(format!("domain {domain} has no samples")));
    }
    layers.check_depth(cache.depth())?;
    let features: Vec<Vec<f64>> = (0..cache.len()).map(|i| cache.multi_level(i, layers)).collect();
    let (mean, count) = mean_of(features.iter().map(Vec::as_slice));
    Ok(DomainPrototype { domain, mean, count })
}

/// How a bank is built.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum IdStrategy {
    /// Mean multi-level feature per domain over a layer set.
    Mlfi,
    /// Mean final-layer feature per domain.
    Nmc,
    /// K-means centroids of final-layer features.
    Knn { k: usize, seed: u64 },
    /// Mean final-layer feature of patch-shuffled training samples.
    Pss { seed: u64 },
}

impl IdStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            IdStrategy::Mlfi => "mlfi",
            IdStrategy::Nmc => "nmc",
            IdStrategy::Knn { .. } => "knn",
            IdStrategy::Pss { .. } => "pss",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeBank {
    pub layers: LayerSet,
    /// Ordered by domain; a domain may own several entries.
    pub entries: Vec<DomainPrototype>,
}

impl PrototypeBank {
    pub fn new(layers: LayerSet) -> Self {
        Self {
            layers,
            entries: Vec::new(),
        }
    }

    pub fn push(&mut self, prototype: DomainPrototype) -> Result<(), IdError> {
        let width = self.entries.first().map(|e| e.mean.len());
        if width.is_some_and(|w| w != prototype.mean.len()) {
            return Err(IdError::Contract("prototype width differs from the bank".into()));
        }
        if self.entries.last().is_some_and(|e| e.domain > prototype.domain) {
            return Err(IdError::Contract("prototypes must be added in domain order".into()));
        }
        self.entries.push(prototype);
        Ok(())
    }

    pub fn domains(&self) -> usize {
        self.entries.last().map_or(0, |e| e.domain + 1)
    }

    /// Domain of the most cosine-similar entry; the first entry (lowest
    /// domain) wins ties.
    pub fn identify(&self, feature: &[f64]) -> Result<usize, IdError> {
        let mut best: Option<(usize, f64)> = None;
        for e in &self.entries {
            let (c, _) = cosine_similarity_flagged(feature, &e.mean)?;
            if best.is_none_or(|(_, b)| c > b) {
                best = Some((e.domain, c));
            }
        }
        best.map(|(d, _)| d)
            .ok_or_else(|| IdError::State("empty prototype bank".into()))
    }

    /// The bank as it stood once domains `0..domains` had been added.
    pub fn restricted(&self, domains: usize) -> Self {
        Self {
            layers: self.layers.clone(),
            entries: self.entries.iter().filter(|e| e.domain < domains).cloned().collect(),
        }
    }

    /// Routes sample `i` of a cache by this bank's layer set.
    pub fn identify_cached(&self, cache: &FeatureCache, i: usize) -> Result<usize, IdError> {
        self.identify(&cache.multi_level(i, &self.layers))
    }
}

pub fn mlfi_bank(train: &[FeatureCache], layers: &LayerSet) -> Result<PrototypeBank, IdError> {
    let mut bank = PrototypeBank::new(layers.clone());
    for (t, cache) in train.iter().enumerate() {
        bank.push(build_prototype(t, cache, layers)?)?;
    }
    Ok(bank)
}

pub fn nmc_bank(train: &[FeatureCache]) -> Result<PrototypeBank, IdError> {
    let depth = train
        .first()
        .ok_or_else(|| IdError::Config("no domains".into()))?
        .depth();
    mlfi_bank(train, &LayerSet::single(depth)?)
}

pub fn knn_bank(train: &[FeatureCache], k: usize, seed: u64) -> Result<PrototypeBank, IdError> {
    let depth = train
        .first()
        .ok_or_else(|| IdError::Config("no domains".into()))?
        .depth();
    let layers = LayerSet::single(depth)?;
    let mut bank = PrototypeBank::new(layers.clone());
    for (t, cache) in train.iter().enumerate() {
        let features: Vec<Vec<f64>> = (0..cache.len()).map(|i| cache.multi_level(i, &layers)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(t as u64);
        for (mean, count) in kmeans(&features, k, &mut rng)? {
            bank.push(DomainPrototype { domain: t, mean, count })?;
        }
    }
    Ok(bank)
}

/// PSS prototypes from shuffled training features (see
/// [`FeatureCache::build_shuffled`]).
pub fn pss_bank(shuffled_train: &[FeatureCache]) -> Result<PrototypeBank, IdError> {
    nmc_bank(shuffled_train)
}

const KMEANS_MAX_ITERS: usize = 100;

/// K-means with cosine assignment and mean-of-members centroids. Seeding
/// picks the first centroid uniformly and each further one with probability
/// proportional to its cosine distance from the nearest chosen centroid.
/// Returns `(centroid, member count)` for every cluster. With `k = 1` the
/// single centroid is exactly the plain mean.
pub fn kmeans<R: Rng + ?Sized>(
    features: &[Vec<f64>],
    k: usize,
    rng: &mut R,
) -> Result<Vec<(Vec<f64>, usize)>, IdError> {
    if k == 0 {
        return Err(IdError::Config("k must be at least 1".into()));
    }
    if k > features.len() {
        return Err(IdError::Clustering(format!(
            "{k} clusters requested from {} samples",
            features.len()
        )));
    }
    let cos = |a: &[f64], b: &[f64]| cosine_similarity_flagged(a, b).map(|(c, _)| c);
    let mut centroids: Vec<Vec<f64>> = vec![features[rng.random_range(0..features.len())].clone()];
    while centroids.len() < k {
        let dist = features
            .iter()
            .map(|f| {
                centroids
                    .iter()
                    .map(|c| cos(f, c).map(|s| 1.0 - s))
                    .try_fold(f64::INFINITY, |m, d| d.map(|d| m.min(d)))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            dist.iter()
                .position(|&d| {
                    u -= d;
                    u < 0.0
                })
                .unwrap_or(features.len() - 1)
        } else {
            rng.random_range(0..features.len())
        };
        centroids.push(features[pick].clone());
    }

    let mut assignment = vec![usize::MAX; features.len()];
    for _ in 0..KMEANS_MAX_ITERS {
        let mut changed = false;
        for (f, a) in features.iter().zip(assignment.iter_mut()) {
            let mut best = (0, f64::NEG_INFINITY);
            for (j, c) in centroids.iter().enumerate() {
                let s = cos(f, c)?;
                if s > best.1 {
                    best = (j, s);
                }
            }
            changed |= *a != best.0;
            *a = best.0;
        }
        for (j, c) in centroids.iter_mut().enumerate() {
            let members = features
                .iter()
                .zip(&assignment)
                .filter(|(_, &a)| a == j)
                .map(|(f, _)| f.as_slice());
            let (mean, n) = mean_of(members);
            if n > 0 {
                *c = mean;
            }
        }
        if !changed {
            break;
        }
    }
    Ok(centroids
        .into_iter()
        .enumerate()
        .map(|(j, c)| (c, assignment.iter().filter(|&&a| a == j).count()))
        .collect())
}

/// Fraction of samples routed to their own domain; `test[t]` holds domain
/// `t`'s samples.
pub fn identification_accuracy(bank: &PrototypeBank, test: &[FeatureCache]) -> Result<f64, IdError> {
    let (mut hit, mut total) = (0usize, 0usize);
    for (t, cache) in test.iter().enumerate() {
        let routed = (0..cache.len())
            .into_par_iter()
            .map(|i| bank.identify_cached(cache, i))
            .collect::<Result<Vec<_>, _>>()?;
        hit += routed.iter().filter(|&&d| d == t).count();
        total += cache.len();
    }
    if total == 0 {
        return Err(IdError::Config("no samples to identify".into()));
    }
    Ok(hit as f64 / total as f64)
}

/// Layer-set candidates tried by the greedy search with their accuracies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSearchReport {
    /// Validation accuracy of every single layer, in layer order.
    pub single_layer: Vec<(usize, f64)>,
    /// Every combination evaluated while growing, in evaluation order.
    pub candidates: Vec<(Vec<usize>, f64)>,
    pub best: LayerSet,
    pub best_accuracy: f64,
}

pub const SEARCH_POOL: usize = 5;
pub const SEARCH_MAX_SIZE: usize = 3;

/// Ranks single layers by validation identification accuracy, then grows
/// the best set one layer at a time from the top-ranked layers, accepting an
/// addition only if it strictly improves accuracy.
pub fn greedy_layer_search(train: &[FeatureCache], validation: &[FeatureCache]) -> Result<LayerSearchReport, IdError> {
    if validation.is_empty() || validation.iter().all(FeatureCache::is_empty) {
        return Err(IdError::Config("layer search needs validation samples".into()));
    }
    if train.len() != validation.len() {
        return Err(IdError::Config(format!(
            "{} training domains but {} validation domains",
            train.len(),
            validation.len()
        )));
    }
    let depth = train[0].depth();
    let score = |layers: &LayerSet| -> Result<f64, IdError> {
        identification_accuracy(&mlfi_bank(train, layers)?, validation)
    };
    let single_layer = (1..=depth)
        .map(|l| Ok((l, score(&LayerSet::single(l)?)?)))
        .collect::<Result<Vec<_>, IdError>>()?;
    let mut ranked = single_layer.clone();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let pool: Vec<usize> = ranked.iter().take(SEARCH_POOL).map(|&(l, _)| l).collect();

    let mut best = vec![ranked[0].0];
    let mut best_accuracy = ranked[0].1;
    let mut candidates = Vec::new();
    while best.len() < SEARCH_MAX_SIZE {
        let mut round: Option<(Vec<usize>, f64)> = None;
        for &l in pool.iter().filter(|l| !best.contains(l)) {
            let mut set = best.clone();
            set.push(l);
            let layers = LayerSet::new(set)?;
            let acc = score(&layers)?;
            candidates.push((layers.layers().to_vec(), acc));
            if round.as_ref().is_none_or(|(_, a)| acc > *a) {
                round = Some((layers.layers().to_vec(), acc));
            }
        }
        match round {
            Some((set, acc)) if acc > best_accuracy => {
                best = set;
                best_accuracy = acc;
            }
            _ => break,
        }
    }
    Ok(LayerSearchReport {
        single_layer,
        candidates,
        best: LayerSet::new(best)?,
        best_accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::datagen::{generate_benchmark, BenchmarkConfig};

    fn cache(rows: Vec<Vec<f64>>) -> FeatureCache {
        FeatureCache::from_taps(rows.into_iter().map(|r| vec![r]).collect()).unwrap()
    }

    #[test]
    fn layer_sets_are_sorted_and_validated() {
        assert_eq!(LayerSet::new(vec![5, 2, 5]).unwrap().layers(), &[2, 5]);
        assert!(LayerSet::new(vec![]).is_err());
        assert!(LayerSet::new(vec![0]).is_err());
        assert!(LayerSet::new(vec![7]).unwrap().check_depth(6).is_err());
        let parsed: LayerSet = serde_json::from_str("[3,1]").unwrap();
        assert_eq!(parsed.layers(), &[1, 3]);
        assert!(serde_json::from_str::<LayerSet>("[]").is_err());
    }

    #[test]
    fn multi_level_features_concatenate_in_layer_order() {
        let taps = vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]];
        assert_eq!(multi_level_feature(&taps, &LayerSet::single(2).unwrap()), vec![3.0, 4.0]);
        let a = multi_level_feature(&taps, &LayerSet::new(vec![3, 1]).unwrap());
        let b = multi_level_feature(&taps, &LayerSet::new(vec![1, 3]).unwrap());
        assert_eq!(a, b);
        assert_eq!(a, vec![1.0, 2.0, 5.0, 6.0]);
    }

    #[test]
    fn prototype_means() {
        let one = layer1();
        let c = cache(vec![vec![1.0, 2.0], vec![3.0, 0.0], vec![-1.0, 4.0]]);
        let p = build_prototype(0, &c, &one).unwrap();
        assert_eq!(p.mean, vec![1.0, 2.0]);
        assert_eq!(p.count, 3);
        let single = build_prototype(0, &cache(vec![vec![0.3, 0.7]]), &one).unwrap();
        assert_eq!(single.mean, vec![0.3, 0.7]);
        let doubled = cache(vec![
            vec![1.0, 2.0],
            vec![3.0, 0.0],
            vec![-1.0, 4.0],
            vec![1.0, 2.0],
            vec![3.0, 0.0],
            vec![-1.0, 4.0],
        ]);
        assert_eq!(build_prototype(0, &doubled, &one).unwrap().mean, p.mean);
        assert!(build_prototype(0, &cache(vec![]), &one).is_err());
    }

    fn layer1() -> LayerSet {
        LayerSet::single(1).unwrap()
    }

    fn bank(means: &[Vec<f64>]) -> PrototypeBank {
        let mut b = PrototypeBank::new(layer1());
        for (t, m) in means.iter().enumerate() {
            b.push(DomainPrototype { domain: t, mean: m.clone(), count: 1 }).unwrap();
        }
        b
    }

    #[test]
    fn identification_examples() {
        assert_eq!(bank(&[vec![1.0, 0.0]]).identify(&[-3.0, 1.0]).unwrap(), 0);
        let two = bank(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(two.identify(&[0.0, 1.0]).unwrap(), 1);
        assert_eq!(two.identify(&[1.0, 1.0]).unwrap(), 0);
        assert!(matches!(bank(&[]).identify(&[1.0]), Err(IdError::State(_))));

        let means = vec![vec![1.0, 0.2, 0.0], vec![0.1, 1.0, 0.3], vec![-0.5, 0.4, 1.0]];
        let probe = [0.2, 0.9, 0.8];
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let cosines: Vec<f64> = means
            .iter()
            .map(|m| dot(m, &probe) / (dot(m, m).sqrt() * dot(&probe, &probe).sqrt()))
            .collect();
        let expected = (0..3).max_by(|&a, &b| cosines[a].total_cmp(&cosines[b])).unwrap();
        assert_eq!(bank(&means).identify(&probe).unwrap(), expected);
    }

    #[test]
    fn kmeans_errors_and_single_cluster() {
        let f = vec![vec![1.0, 0.0], vec![0.5, 0.5], vec![0.0, 2.0]];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(kmeans(&f, 4, &mut rng), Err(IdError::Clustering(_))));
        assert!(matches!(kmeans(&f, 0, &mut rng), Err(IdError::Config(_))));
        let one = kmeans(&f, 1, &mut rng).unwrap();
        assert_eq!(one, vec![(mean_of(f.iter().map(Vec::as_slice)).0, 3)]);
    }

    #[test]
    fn kmeans_separates_clear_clusters() {
        let f = vec![
            vec![1.0, 0.05],
            vec![1.0, -0.05],
            vec![0.05, 1.0],
            vec![-0.05, 1.0],
        ];
        let out = kmeans(&f, 2, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let mut counts: Vec<usize> = out.iter().map(|(_, n)| *n).collect();
        counts.sort();
        assert_eq!(counts, vec![2, 2]);
    }

    fn small_setup() -> (FeatureEncoder, Vec<crate::datagen::DomainDataset>) {
        let encoder = FeatureEncoder::transformer(BackboneConfig {
            depth: 3,
            hidden_dim: 8,
            heads: 2,
            mlp_ratio: 2.0,
            patch_count: 4,
            seed: 2,
            ..BackboneConfig::default()
        })
        .unwrap();
        let data = generate_benchmark(&BenchmarkConfig {
            domains: 3,
            classes: 3,
            train_per_class: 4,
            test_per_class: 3,
            patch_count: 4,
            dim: 8,
            class_groups: 3,
            ..BenchmarkConfig::default()
        })
        .unwrap();
        (encoder, data)
    }

    #[test]
    fn strategy_degeneracies() {
        let (encoder, data) = small_setup();
        let train: Vec<FeatureCache> = data
            .iter()
            .map(|d| FeatureCache::build(&encoder, &d.train).unwrap())
            .collect();
        let test: Vec<FeatureCache> = data
            .iter()
            .map(|d| FeatureCache::build(&encoder, &d.test).unwrap())
            .collect();
        let nmc = nmc_bank(&train).unwrap();
        let mlfi_final = mlfi_bank(&train, &LayerSet::single(3).unwrap()).unwrap();
        assert_eq!(nmc, mlfi_final);
        let knn1 = knn_bank(&train, 1, 99).unwrap();
        assert_eq!(knn1.entries, nmc.entries);
        for cache in &test {
            for i in 0..cache.len() {
                assert_eq!(knn1.identify_cached(cache, i).unwrap(), nmc.identify_cached(cache, i).unwrap());
            }
        }
        let shuffled: Vec<FeatureCache> = data
            .iter()
            .map(|d| FeatureCache::build_shuffled(&encoder, &d.train, 5).unwrap())
            .collect();
        let pss = pss_bank(&shuffled).unwrap();
        for (a, b) in pss.entries.iter().zip(&nmc.entries) {
            assert_ne!(a.mean, b.mean);
        }
        let knn = knn_bank(&train, 2, 1).unwrap();
        assert_eq!(knn.entries.len(), 6);
        assert!(knn_bank(&train, 13, 1).is_err());
    }

    #[test]
    fn greedy_search_never_loses_to_the_best_single_layer() {
        let (encoder, data) = small_setup();
        let train: Vec<FeatureCache> = data
            .iter()
            .map(|d| FeatureCache::build(&encoder, &d.train).unwrap())
            .collect();
        let val: Vec<FeatureCache> = data
            .iter()
            .map(|d| FeatureCache::build(&encoder, &d.test).unwrap())
            .collect();
        let report = greedy_layer_search(&train, &val).unwrap();
        let best_single = report.single_layer.iter().map(|x| x.1).fold(0.0, f64::max);
        assert!(report.best_accuracy >= best_single);
        let direct = identification_accuracy(&mlfi_bank(&train, &report.best).unwrap(), &val).unwrap();
        assert_eq!(direct, report.best_accuracy);
        assert!(report.best.layers().len() <= SEARCH_MAX_SIZE);
        assert!(greedy_layer_search(&train, &[]).is_err());
    }

    #[test]
    fn dominant_layer_is_returned_alone() {
        // Layer 1 separates the domains perfectly, layer 2 is pure noise
        // that only hurts when concatenated.
        let domain = |sign: f64, noise: &[f64]| {
            FeatureCache::from_taps(vec![
                vec![vec![sign, 0.1], noise.to_vec()],
                vec![vec![sign, -0.1], noise.iter().map(|v| -v).collect()],
            ])
            .unwrap()
        };
        let train = vec![domain(1.0, &[5.0, 0.0]), domain(-1.0, &[0.0, 5.0])];
        let val = vec![domain(1.0, &[0.0, 5.0]), domain(-1.0, &[5.0, 0.0])];
        let report = greedy_layer_search(&train, &val).unwrap();
        assert_eq!(report.best.layers(), &[1]);
        assert_eq!(report.best_accuracy, 1.0);
    }
}
