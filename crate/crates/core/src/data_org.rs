//! Weakly supervised organization of samples into category IDs, and the
//! synthetic skewed dataset generator used for every experiment.
//!
//! Every query image and every doc is a sample. Each starts as its own ID;
//! clicked (query, doc) pairs are merged with union-find, then ID
//! representatives (mean raw features) may be merged again by clustering.

use std::collections::{BTreeMap, BTreeSet};

use petgraph::unionfind::UnionFind;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{MixerError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleKind {
    Query,
    Doc,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: u64,
    pub kind: SampleKind,
    pub raw: Vec<f64>,
    #[serde(default)]
    pub tokens: Vec<usize>,
    pub category: u64,
}

impl Sample {
    pub fn validate(&self, n_raw: usize, max_text_len: usize) -> Result<()> {
        if self.raw.len() != n_raw {
            return Err(MixerError::shape("sample raw", &[self.raw.len()], &[n_raw]));
        }
        match self.kind {
            SampleKind::Query if !self.tokens.is_empty() => Err(MixerError::InvalidTokens(format!(
                "query sample {} carries tokens",
                self.id
            ))),
            SampleKind::Doc if self.tokens.is_empty() || self.tokens.len() > max_text_len => {
                Err(MixerError::InvalidTokens(format!(
                    "doc sample {} has {} tokens (allowed 1..={max_text_len})",
                    self.id,
                    self.tokens.len()
                )))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClickRecord {
    pub q: u64,
    pub d: u64,
    pub clicked: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClickLog {
    pub records: Vec<ClickRecord>,
}

impl ClickLog {
    pub fn validate(&self, samples: &[Sample]) -> Result<()> {
        let kinds: BTreeMap<u64, SampleKind> = samples.iter().map(|s| (s.id, s.kind)).collect();
        for r in &self.records {
            match kinds.get(&r.q) {
                Some(SampleKind::Query) => {}
                _ => return Err(MixerError::DanglingReference(r.q)),
            }
            match kinds.get(&r.d) {
                Some(SampleKind::Doc) => {}
                _ => return Err(MixerError::DanglingReference(r.d)),
            }
        }
        Ok(())
    }
}

/// Latent truth behind a synthetic dataset.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// sample id → latent product id
    pub product_of: BTreeMap<u64, u64>,
    /// product id → relevance family id
    pub family_of: BTreeMap<u64, u64>,
}

impl GroundTruth {
    pub fn product(&self, sample: u64) -> Result<u64> {
        self.product_of
            .get(&sample)
            .copied()
            .ok_or(MixerError::DanglingReference(sample))
    }

    pub fn family(&self, sample: u64) -> Result<u64> {
        let p = self.product(sample)?;
        self.family_of
            .get(&p)
            .copied()
            .ok_or(MixerError::DanglingReference(sample))
    }
}

/// Sample id → category id. Category ids are the smallest member sample id.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryAssignment {
    pub of: BTreeMap<u64, u64>,
}

impl CategoryAssignment {
    pub fn category(&self, sample: u64) -> Option<u64> {
        self.of.get(&sample).copied()
    }

    pub fn num_categories(&self) -> usize {
        self.of.values().collect::<BTreeSet<_>>().len()
    }

    /// Category id → ascending member sample ids.
    pub fn groups(&self) -> BTreeMap<u64, Vec<u64>> {
        let mut g: BTreeMap<u64, Vec<u64>> = BTreeMap::new();
        for (&s, &c) in &self.of {
            g.entry(c).or_default().push(s);
        }
        g
    }

    pub fn apply(&self, samples: &mut [Sample]) {
        for s in samples {
            if let Some(c) = self.category(s.id) {
                s.category = c;
            }
        }
    }

    /// Merges the given groups of categories; the new id of each merged
    /// group is its smallest member sample id.
    fn merge_categories(&self, clusters: &[Vec<u64>]) -> CategoryAssignment {
        let groups = self.groups();
        let mut rename = BTreeMap::new();
        for cluster in clusters {
            let members: Vec<u64> = cluster
                .iter()
                .flat_map(|c| groups.get(c).into_iter().flatten().copied())
                .collect();
            if let Some(&canon) = members.iter().min() {
                for c in cluster {
                    rename.insert(*c, canon);
                }
            }
        }
        CategoryAssignment {
            of: self
                .of
                .iter()
                .map(|(&s, c)| (s, rename.get(c).copied().unwrap_or(*c)))
                .collect(),
        }
    }
}

/// Every sample becomes its own singleton ID.
pub fn assign_initial_ids(samples: &[Sample]) -> Result<CategoryAssignment> {
    if samples.is_empty() {
        return Err(MixerError::InvalidParams("no samples to organize".into()));
    }
    Ok(CategoryAssignment {
        of: samples.iter().map(|s| (s.id, s.id)).collect(),
    })
}

/// Union-find over clicked pairs on top of the existing grouping.
pub fn merge_by_clicks(assignment: &CategoryAssignment, clicks: &ClickLog) -> Result<CategoryAssignment> {
    let ids: Vec<u64> = assignment.of.keys().copied().collect();
    let index: BTreeMap<u64, usize> = ids.iter().enumerate().map(|(i, &s)| (s, i)).collect();
    let mut uf = UnionFind::<usize>::new(ids.len());
    for members in assignment.groups().values() {
        let first = index[&members[0]];
        for m in &members[1..] {
            uf.union(first, index[m]);
        }
    }
    for r in &clicks.records {
        let q = *index.get(&r.q).ok_or(MixerError::DanglingReference(r.q))?;
        let d = *index.get(&r.d).ok_or(MixerError::DanglingReference(r.d))?;
        if r.clicked {
            uf.union(q, d);
        }
    }
    let mut canon: BTreeMap<usize, u64> = BTreeMap::new();
    for (i, &s) in ids.iter().enumerate() {
        let root = uf.find(i);
        let e = canon.entry(root).or_insert(s);
        *e = (*e).min(s);
    }
    Ok(CategoryAssignment {
        of: ids
            .iter()
            .enumerate()
            .map(|(i, &s)| (s, canon[&uf.find(i)]))
            .collect(),
    })
}

/// Mean raw features of each category's members.
pub fn representative_features(
    samples: &[Sample],
    assignment: &CategoryAssignment,
) -> Result<BTreeMap<u64, Vec<f64>>> {
    let mut sums: BTreeMap<u64, (Vec<f64>, usize)> = BTreeMap::new();
    for s in samples {
        let c = assignment
            .category(s.id)
            .ok_or(MixerError::DanglingReference(s.id))?;
        let e = sums.entry(c).or_insert_with(|| (vec![0.0; s.raw.len()], 0));
        if e.0.len() != s.raw.len() {
            return Err(MixerError::shape("representative_features", &[e.0.len()], &[s.raw.len()]));
        }
        e.0.iter_mut().zip(&s.raw).for_each(|(a, b)| *a += b);
        e.1 += 1;
    }
    Ok(sums
        .into_iter()
        .map(|(c, (v, n))| (c, v.into_iter().map(|x| x / n as f64).collect()))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase", deny_unknown_fields)]
pub enum ClusterMethod {
    KMeans { k: usize, max_iter: usize, seed: u64 },
    Density { eps: f64, min_points: usize },
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Cluster label per point; `None` marks density noise.
pub fn dbscan(points: &[&[f64]], eps: f64, min_points: usize) -> Vec<Option<usize>> {
    let n = points.len();
    let eps2 = eps * eps;
    let neighbors: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| sq_dist(points[i], points[j]) <= eps2).collect())
        .collect();
    let core: Vec<bool> = neighbors.iter().map(|nb| nb.len() >= min_points).collect();
    let mut label = vec![None; n];
    let mut next = 0;
    for start in 0..n {
        if !core[start] || label[start].is_some() {
            continue;
        }
        label[start] = Some(next);
        let mut queue = vec![start];
        while let Some(p) = queue.pop() {
            for &q in &neighbors[p] {
                if label[q].is_none() {
                    label[q] = Some(next);
                    if core[q] {
                        queue.push(q);
                    }
                }
            }
        }
        next += 1;
    }
    label
}

/// Lloyd's algorithm with k-means++ seeding; ties go to the lower center.
pub fn kmeans(points: &[&[f64]], k: usize, max_iter: usize, seed: u64) -> Vec<usize> {
    let n = points.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers: Vec<Vec<f64>> = vec![points[rng.random_range(0..n)].to_vec()];
    while centers.len() < k {
        let d2: Vec<f64> = points
            .iter()
            .map(|p| centers.iter().map(|c| sq_dist(p, c)).fold(f64::INFINITY, f64::min))
            .collect();
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if r < w {
                    idx = i;
                    break;
                }
                r -= w;
            }
            idx
        } else {
            rng.random_range(0..n)
        };
        centers.push(points[pick].to_vec());
    }
    let nearest = |p: &[f64], centers: &[Vec<f64>]| -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (j, c) in centers.iter().enumerate() {
            let d = sq_dist(p, c);
            if d < best_d {
                best_d = d;
                best = j;
            }
        }
        best
    };
    let mut assign: Vec<usize> = points.iter().map(|p| nearest(p, &centers)).collect();
    for _ in 0..max_iter {
        let dim = points[0].len();
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assign) {
            sums[a].iter_mut().zip(p.iter()).for_each(|(s, x)| *s += x);
            counts[a] += 1;
        }
        for j in 0..k {
            if counts[j] > 0 {
                centers[j] = sums[j].iter().map(|s| s / counts[j] as f64).collect();
            }
        }
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centers)).collect();
        if next == assign {
            break;
        }
        assign = next;
    }
    assign
}

/// Merges IDs whose representatives fall in the same cluster.
pub fn merge_by_clustering(
    assignment: &CategoryAssignment,
    features: &BTreeMap<u64, Vec<f64>>,
    method: &ClusterMethod,
) -> Result<CategoryAssignment> {
    let cats: Vec<u64> = features.keys().copied().collect();
    let points: Vec<&[f64]> = features.values().map(Vec::as_slice).collect();
    let labels: Vec<Option<usize>> = match *method {
        ClusterMethod::Density { eps, min_points } => {
            if !(eps > 0.0) || min_points == 0 {
                return Err(MixerError::InvalidParams(format!(
                    "density clustering needs eps > 0 and min_points ≥ 1 (got {eps}, {min_points})"
                )));
            }
            dbscan(&points, eps, min_points)
        }
        ClusterMethod::KMeans { k, max_iter, seed } => {
            if k == 0 || k > cats.len() {
                return Err(MixerError::InvalidParams(format!(
                    "k-means needs 1 ≤ k ≤ {} IDs, got {k}",
                    cats.len()
                )));
            }
            kmeans(&points, k, max_iter, seed).into_iter().map(Some).collect()
        }
    };
    let mut clusters: BTreeMap<usize, Vec<u64>> = BTreeMap::new();
    for (c, l) in cats.iter().zip(&labels) {
        if let Some(l) = l {
            clusters.entry(*l).or_default().push(*c);
        }
    }
    let clusters: Vec<Vec<u64>> = clusters.into_values().filter(|c| c.len() > 1).collect();
    Ok(assignment.merge_categories(&clusters))
}

/// How the density radius is chosen for a dataset.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case", deny_unknown_fields)]
pub enum EpsRule {
    Fixed { eps: f64 },
    /// Percentile (0–100) of all pairwise representative distances.
    PairwisePercentile { percentile: f64 },
    /// `factor` times the median nearest-neighbor distance between representatives.
    NearestNeighborMedian { factor: f64 },
}

impl EpsRule {
    pub fn resolve(&self, features: &BTreeMap<u64, Vec<f64>>) -> Result<f64> {
        match *self {
            EpsRule::Fixed { eps } => Ok(eps),
            EpsRule::PairwisePercentile { percentile } => {
                if !(0.0..=100.0).contains(&percentile) {
                    return Err(MixerError::InvalidParams(format!("percentile {percentile} outside [0, 100]")));
                }
                let pts: Vec<&Vec<f64>> = features.values().collect();
                let mut d = Vec::with_capacity(pts.len() * pts.len().saturating_sub(1) / 2);
                for i in 0..pts.len() {
                    for j in i + 1..pts.len() {
                        d.push(sq_dist(pts[i], pts[j]).sqrt());
                    }
                }
                if d.is_empty() {
                    return Err(MixerError::InvalidParams("need at least two IDs for a percentile radius".into()));
                }
                d.sort_by(f64::total_cmp);
                let pos = ((percentile / 100.0) * (d.len() - 1) as f64).round() as usize;
                Ok(d[pos])
            }
            EpsRule::NearestNeighborMedian { factor } => {
                if !(factor > 0.0) {
                    return Err(MixerError::InvalidParams(format!("radius factor {factor} must be positive")));
                }
                let pts: Vec<&Vec<f64>> = features.values().collect();
                if pts.len() < 2 {
                    return Err(MixerError::InvalidParams("need at least two IDs for a neighbor radius".into()));
                }
                let mut nn: Vec<f64> = (0..pts.len())
                    .map(|i| {
                        (0..pts.len())
                            .filter(|&j| j != i)
                            .map(|j| sq_dist(pts[i], pts[j]))
                            .fold(f64::INFINITY, f64::min)
                            .sqrt()
                    })
                    .collect();
                nn.sort_by(f64::total_cmp);
                Ok(factor * nn[nn.len() / 2])
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase", deny_unknown_fields)]
pub enum ClusteringConfig {
    None,
    Density { eps: EpsRule, min_points: usize },
    KMeans { k: usize, max_iter: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeOrder {
    ClicksFirst,
    ClusteringFirst,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OrganizeConfig {
    pub use_clicks: bool,
    pub clustering: ClusteringConfig,
    pub order: MergeOrder,
}

impl Default for OrganizeConfig {
    fn default() -> Self {
        OrganizeConfig {
            use_clicks: true,
            clustering: ClusteringConfig::Density {
                eps: EpsRule::NearestNeighborMedian { factor: 1.4 },
                min_points: 2,
            },
            order: MergeOrder::ClicksFirst,
        }
    }
}

/// ID counts through the organization pipeline.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OrganizationReport {
    pub samples: usize,
    pub initial_ids: usize,
    pub after_clicks: Option<usize>,
    pub after_clustering: Option<usize>,
    pub final_ids: usize,
    pub eps: Option<f64>,
}

pub fn organize(
    samples: &[Sample],
    clicks: &ClickLog,
    cfg: &OrganizeConfig,
    seed: u64,
) -> Result<(CategoryAssignment, OrganizationReport)> {
    clicks.validate(samples)?;
    let mut a = assign_initial_ids(samples)?;
    let mut report = OrganizationReport {
        samples: samples.len(),
        initial_ids: a.num_categories(),
        ..Default::default()
    };
    let cluster_stage = |a: &CategoryAssignment, report: &mut OrganizationReport| -> Result<CategoryAssignment> {
        let method = match cfg.clustering {
            ClusteringConfig::None => return Ok(a.clone()),
            ClusteringConfig::Density { eps, min_points } => {
                let feats = representative_features(samples, a)?;
                let eps = eps.resolve(&feats)?;
                report.eps = Some(eps);
                ClusterMethod::Density { eps, min_points }
            }
            ClusteringConfig::KMeans { k, max_iter } => ClusterMethod::KMeans { k, max_iter, seed },
        };
        let feats = representative_features(samples, a)?;
        let out = merge_by_clustering(a, &feats, &method)?;
        report.after_clustering = Some(out.num_categories());
        Ok(out)
    };
    match cfg.order {
        MergeOrder::ClicksFirst => {
            if cfg.use_clicks {
                a = merge_by_clicks(&a, clicks)?;
                report.after_clicks = Some(a.num_categories());
            }
            a = cluster_stage(&a, &mut report)?;
        }
        MergeOrder::ClusteringFirst => {
            a = cluster_stage(&a, &mut report)?;
            if cfg.use_clicks {
                a = merge_by_clicks(&a, clicks)?;
                report.after_clicks = Some(a.num_categories());
            }
        }
    }
    report.final_ids = a.num_categories();
    Ok((a, report))
}

/// Spatial arrangement of doc images.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DocLayout {
    /// The product fills every image position.
    Full,
    /// The product fills one random position; the others show products
    /// from different families.
    Distractors,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub num_products: usize,
    /// Relevance families; products are dealt round-robin into families.
    pub relevance_groups: usize,
    pub exposure_exponent: f64,
    pub min_samples_per_product: usize,
    pub mean_samples_per_product: usize,
    pub query_fraction: f64,
    pub test_queries_per_product: usize,
    pub test_docs_per_product: usize,
    pub click_noise_rate: f64,
    pub clicks_per_query: usize,
    /// Shown-but-not-clicked docs per query in the log.
    pub skips_per_query: usize,
    pub vocab_size: usize,
    pub n_raw: usize,
    pub positions: usize,
    pub family_scale: f64,
    pub product_scale: f64,
    pub doc_noise: f64,
    pub query_noise: f64,
    /// Scale of the fixed offset separating query photos from doc photos.
    pub query_shift: f64,
    pub family_tokens: usize,
    pub product_tokens: usize,
    pub min_tokens: usize,
    pub max_tokens: usize,
    /// Probability each doc token is replaced by a noise token.
    pub text_noise_rate: f64,
    pub doc_layout: DocLayout,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_products: 200,
            relevance_groups: 40,
            exposure_exponent: 1.2,
            min_samples_per_product: 8,
            mean_samples_per_product: 30,
            query_fraction: 0.5,
            test_queries_per_product: 1,
            test_docs_per_product: 1,
            click_noise_rate: 0.0,
            clicks_per_query: 2,
            skips_per_query: 1,
            vocab_size: 512,
            n_raw: 64,
            positions: 4,
            family_scale: 1.0,
            product_scale: 0.6,
            doc_noise: 0.3,
            query_noise: 0.4,
            query_shift: 0.3,
            family_tokens: 2,
            product_tokens: 1,
            min_tokens: 3,
            max_tokens: 8,
            text_noise_rate: 0.2,
            doc_layout: DocLayout::Full,
            seed: 1,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(MixerError::Config(format!("synthetic: {m}")));
        for (name, r) in [
            ("click_noise_rate", self.click_noise_rate),
            ("query_fraction", self.query_fraction),
            ("text_noise_rate", self.text_noise_rate),
        ] {
            if !(0.0..=1.0).contains(&r) {
                return bad(format!("{name} must lie in [0, 1]"));
            }
        }
        if self.num_products == 0
            || self.relevance_groups == 0
            || self.n_raw == 0
            || self.positions == 0
            || self.vocab_size == 0
            || self.min_tokens == 0
            || self.test_queries_per_product == 0
            || self.test_docs_per_product == 0
            || self.clicks_per_query == 0
        {
            return bad("counts must be positive".into());
        }
        if self.min_samples_per_product < 2 {
            return bad("every product needs at least one training query and one training doc".into());
        }
        if self.mean_samples_per_product < self.min_samples_per_product {
            return bad("mean_samples_per_product is below min_samples_per_product".into());
        }
        if self.max_tokens < self.min_tokens {
            return bad("max_tokens is below min_tokens".into());
        }
        if self.n_raw % self.positions != 0 {
            return bad(format!("n_raw {} is not divisible by {} positions", self.n_raw, self.positions));
        }
        if self.exposure_exponent < 0.0 || self.family_scale < 0.0 || self.product_scale < 0.0 {
            return bad("scales and exponent must be non-negative".into());
        }
        if self.doc_noise < 0.0 || self.query_noise < 0.0 || self.query_shift < 0.0 {
            return bad("noise levels must be non-negative".into());
        }
        if self.doc_layout == DocLayout::Distractors && self.relevance_groups < 2 {
            return bad("distractor layout needs at least two families".into());
        }
        if self.reserved_tokens() >= self.vocab_size {
            return bad(format!(
                "{} family/product tokens leave no noise tokens in a vocabulary of {}",
                self.reserved_tokens(),
                self.vocab_size
            ));
        }
        Ok(())
    }

    fn reserved_tokens(&self) -> usize {
        self.relevance_groups * self.family_tokens + self.num_products * self.product_tokens
    }

    pub fn family_of_product(&self, p: usize) -> usize {
        p % self.relevance_groups
    }
}

/// Generated dataset: organizable training samples plus a held-out split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticData {
    pub samples: Vec<Sample>,
    pub test_samples: Vec<Sample>,
    pub clicks: ClickLog,
    pub truth: GroundTruth,
}

/// Per-product sample counts: a floor plus a power-law share of the rest.
/// Popularity ranks are a seeded permutation of products.
pub fn exposure_counts(spec: &SyntheticSpec, rng: &mut impl Rng) -> Vec<usize> {
    let p = spec.num_products;
    let mut rank: Vec<usize> = (0..p).collect();
    rank.shuffle(rng);
    let weights: Vec<f64> = rank
        .iter()
        .map(|&r| ((r + 1) as f64).powf(-spec.exposure_exponent))
        .collect();
    let total_w: f64 = weights.iter().sum();
    let extra = (spec.mean_samples_per_product - spec.min_samples_per_product) * p;
    let mut counts = vec![spec.min_samples_per_product; p];
    let cdf: Vec<f64> = weights
        .iter()
        .scan(0.0, |acc, w| {
            *acc += w / total_w;
            Some(*acc)
        })
        .collect();
    for _ in 0..extra {
        let u: f64 = rng.random();
        let idx = cdf.partition_point(|&c| c <= u).min(p - 1);
        counts[idx] += 1;
    }
    counts
}

fn gaussian_vec(rng: &mut impl Rng, len: usize, scale: f64) -> Vec<f64> {
    (0..len)
        .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect()
}

struct Generator<'a> {
    spec: &'a SyntheticSpec,
    rng: ChaCha8Rng,
    prototypes: Vec<Vec<f64>>,
    shift: Vec<f64>,
    next_id: u64,
    truth: GroundTruth,
}

impl Generator<'_> {
    fn noisy(&mut self, base: &[f64], sigma: f64) -> Vec<f64> {
        let normal = Normal::new(0.0, sigma.max(0.0)).expect("sigma is non-negative");
        base.iter().map(|b| b + normal.sample(&mut self.rng)).collect()
    }

    fn query(&mut self, product: usize) -> Sample {
        let base: Vec<f64> = self.prototypes[product]
            .iter()
            .zip(&self.shift)
            .map(|(p, s)| p + s)
            .collect();
        let raw = self.noisy(&base, self.spec.query_noise);
        self.emit(product, SampleKind::Query, raw, Vec::new())
    }

    fn doc(&mut self, product: usize) -> Sample {
        let spec = self.spec;
        let raw = match spec.doc_layout {
            DocLayout::Full => self.noisy(&self.prototypes[product].clone(), spec.doc_noise),
            DocLayout::Distractors => {
                let block = spec.n_raw / spec.positions;
                let main = self.rng.random_range(0..spec.positions);
                let fam = spec.family_of_product(product);
                let mut base = Vec::with_capacity(spec.n_raw);
                for pos in 0..spec.positions {
                    let src = if pos == main {
                        product
                    } else {
                        loop {
                            let other = self.rng.random_range(0..spec.num_products);
                            if spec.family_of_product(other) != fam {
                                break other;
                            }
                        }
                    };
                    base.extend_from_slice(&self.prototypes[src][pos * block..(pos + 1) * block]);
                }
                self.noisy(&base, spec.doc_noise)
            }
        };
        let tokens = self.tokens(product);
        self.emit(product, SampleKind::Doc, raw, tokens)
    }

    fn tokens(&mut self, product: usize) -> Vec<usize> {
        let spec = self.spec;
        let fam = spec.family_of_product(product);
        let mut bag: Vec<usize> = (0..spec.family_tokens).map(|k| fam * spec.family_tokens + k).collect();
        let product_base = spec.relevance_groups * spec.family_tokens;
        bag.extend((0..spec.product_tokens).map(|k| product_base + product * spec.product_tokens + k));
        let noise_base = spec.reserved_tokens();
        let len = self.rng.random_range(spec.min_tokens..=spec.max_tokens);
        (0..len)
            .map(|_| {
                if bag.is_empty() || self.rng.random::<f64>() < spec.text_noise_rate {
                    self.rng.random_range(noise_base..spec.vocab_size)
                } else {
                    bag[self.rng.random_range(0..bag.len())]
                }
            })
            .collect()
    }

    fn emit(&mut self, product: usize, kind: SampleKind, raw: Vec<f64>, tokens: Vec<usize>) -> Sample {
        let id = self.next_id;
        self.next_id += 1;
        self.truth.product_of.insert(id, product as u64);
        Sample {
            id,
            kind,
            raw,
            tokens,
            category: id,
        }
    }
}

/// Samples, click log and ground truth for a synthetic catalogue.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    // a product looks the same at every position: one patch, tiled
    let patch = spec.n_raw / spec.positions;
    let families: Vec<Vec<f64>> = (0..spec.relevance_groups)
        .map(|_| gaussian_vec(&mut rng, patch, spec.family_scale))
        .collect();
    let prototypes: Vec<Vec<f64>> = (0..spec.num_products)
        .map(|p| {
            let off = gaussian_vec(&mut rng, patch, spec.product_scale);
            let one: Vec<f64> = families[spec.family_of_product(p)]
                .iter()
                .zip(off)
                .map(|(f, o)| f + o)
                .collect();
            one.repeat(spec.positions)
        })
        .collect();
    let shift = gaussian_vec(&mut rng, spec.n_raw, spec.query_shift);
    let counts = exposure_counts(spec, &mut rng);
    let mut truth = GroundTruth::default();
    for p in 0..spec.num_products {
        truth
            .family_of
            .insert(p as u64, spec.family_of_product(p) as u64);
    }
    let mut g = Generator {
        spec,
        rng,
        prototypes,
        shift,
        next_id: 0,
        truth,
    };

    let mut samples = Vec::new();
    let mut test_samples = Vec::new();
    let mut queries_of: Vec<Vec<u64>> = vec![Vec::new(); spec.num_products];
    let mut docs_of: Vec<Vec<u64>> = vec![Vec::new(); spec.num_products];
    for (p, &n) in counts.iter().enumerate() {
        let nq = ((n as f64 * spec.query_fraction).round() as usize).clamp(1, n - 1);
        for _ in 0..nq {
            let s = g.query(p);
            queries_of[p].push(s.id);
            samples.push(s);
        }
        for _ in nq..n {
            let s = g.doc(p);
            docs_of[p].push(s.id);
            samples.push(s);
        }
        for _ in 0..spec.test_queries_per_product {
            let s = g.query(p);
            test_samples.push(s);
        }
        for _ in 0..spec.test_docs_per_product {
            let s = g.doc(p);
            test_samples.push(s);
        }
    }

    let all_docs: Vec<(usize, u64)> = docs_of
        .iter()
        .enumerate()
        .flat_map(|(p, ds)| ds.iter().map(move |&d| (p, d)))
        .collect();
    let mut records = Vec::new();
    for p in 0..spec.num_products {
        for &q in &queries_of[p] {
            for _ in 0..spec.clicks_per_query {
                let d = if g.rng.random::<f64>() < spec.click_noise_rate {
                    loop {
                        let (op, d) = all_docs[g.rng.random_range(0..all_docs.len())];
                        if op != p || spec.num_products == 1 {
                            break d;
                        }
                    }
                } else {
                    docs_of[p][g.rng.random_range(0..docs_of[p].len())]
                };
                records.push(ClickRecord { q, d, clicked: true });
            }
            for _ in 0..spec.skips_per_query {
                let (_, d) = all_docs[g.rng.random_range(0..all_docs.len())];
                records.push(ClickRecord { q, d, clicked: false });
            }
        }
    }
    records.shuffle(&mut g.rng);

    Ok(SyntheticData {
        samples,
        test_samples,
        clicks: ClickLog { records },
        truth: g.truth,
    })
}

/// Share of doc samples held by the most exposed tenth of products.
pub fn top_decile_doc_share(samples: &[Sample], truth: &GroundTruth) -> Result<f64> {
    let mut per: BTreeMap<u64, usize> = truth.family_of.keys().map(|&p| (p, 0)).collect();
    let mut total = 0;
    for s in samples.iter().filter(|s| s.kind == SampleKind::Doc) {
        *per.entry(truth.product(s.id)?).or_default() += 1;
        total += 1;
    }
    let mut counts: Vec<usize> = per.into_values().collect();
    counts.sort_unstable_by(|a, b| b.cmp(a));
    let top = counts.len().div_ceil(10);
    Ok(counts[..top].iter().sum::<usize>() as f64 / total.max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::VecDeque;

    fn sample(id: u64, kind: SampleKind, raw: Vec<f64>) -> Sample {
        let tokens = if kind == SampleKind::Doc { vec![0] } else { vec![] };
        Sample {
            id,
            kind,
            raw,
            tokens,
            category: id,
        }
    }

    fn bfs_components(n: usize, edges: &[(usize, usize)]) -> Vec<usize> {
        let mut adj = vec![Vec::new(); n];
        for &(a, b) in edges {
            adj[a].push(b);
            adj[b].push(a);
        }
        let mut comp = vec![usize::MAX; n];
        for s in 0..n {
            if comp[s] != usize::MAX {
                continue;
            }
            let mut members = vec![s];
            comp[s] = s;
            let mut q = VecDeque::from([s]);
            while let Some(u) = q.pop_front() {
                for &v in &adj[u] {
                    if comp[v] == usize::MAX {
                        comp[v] = s;
                        members.push(v);
                        q.push_back(v);
                    }
                }
            }
            let canon = *members.iter().min().unwrap();
            for m in members {
                comp[m] = canon;
            }
        }
        comp
    }

    #[test]
    fn initial_ids_are_singletons() {
        let s: Vec<Sample> = (0..3).map(|i| sample(i * 10, SampleKind::Query, vec![0.0])).collect();
        let a = assign_initial_ids(&s).unwrap();
        assert_eq!(a.num_categories(), 3);
        assert_eq!(a, assign_initial_ids(&s).unwrap());
        assert_eq!(assign_initial_ids(&s[..1]).unwrap().num_categories(), 1);
        assert!(assign_initial_ids(&[]).is_err());
    }

    #[test]
    fn click_merging_cases() {
        let s = vec![
            sample(1, SampleKind::Query, vec![0.0]),
            sample(2, SampleKind::Doc, vec![0.0]),
            sample(3, SampleKind::Doc, vec![0.0]),
            sample(4, SampleKind::Doc, vec![0.0]),
        ];
        let a = assign_initial_ids(&s).unwrap();
        assert_eq!(merge_by_clicks(&a, &ClickLog::default()).unwrap(), a);
        let log = ClickLog {
            records: vec![
                ClickRecord { q: 1, d: 2, clicked: true },
                ClickRecord { q: 1, d: 3, clicked: true },
                ClickRecord { q: 1, d: 4, clicked: false },
            ],
        };
        let m = merge_by_clicks(&a, &log).unwrap();
        assert_eq!(m.category(1), Some(1));
        assert_eq!(m.category(2), Some(1));
        assert_eq!(m.category(3), Some(1));
        assert_eq!(m.category(4), Some(4));
        let dangling = ClickLog {
            records: vec![ClickRecord { q: 1, d: 9, clicked: true }],
        };
        assert!(matches!(merge_by_clicks(&a, &dangling), Err(MixerError::DanglingReference(9))));
    }

    #[test]
    fn click_merging_matches_bfs_oracle() {
        for (seed, n) in [(0u64, 10usize), (1, 100), (2, 1000), (3, 10_000)] {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s: Vec<Sample> = (0..n as u64)
                .map(|i| sample(i, if i % 2 == 0 { SampleKind::Query } else { SampleKind::Doc }, vec![]))
                .collect();
            let m = rng.random_range(0..n);
            let mut edges = Vec::new();
            let mut records = Vec::new();
            for _ in 0..m {
                let q = 2 * rng.random_range(0..n / 2);
                let d = 2 * rng.random_range(0..n / 2) + 1;
                records.push(ClickRecord { q: q as u64, d: d as u64, clicked: true });
                edges.push((q, d));
            }
            let a = merge_by_clicks(&assign_initial_ids(&s).unwrap(), &ClickLog { records: records.clone() }).unwrap();
            let oracle = bfs_components(n, &edges);
            for i in 0..n {
                assert_eq!(a.category(i as u64), Some(oracle[i] as u64), "seed {seed} node {i}");
            }
            records.reverse();
            let b = merge_by_clicks(&assign_initial_ids(&s).unwrap(), &ClickLog { records }).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn clustering_edge_cases() {
        let s = vec![
            sample(0, SampleKind::Doc, vec![0.0, 0.0]),
            sample(1, SampleKind::Doc, vec![0.0, 0.0]),
            sample(2, SampleKind::Doc, vec![5.0, 0.0]),
        ];
        let a = assign_initial_ids(&s).unwrap();
        let f = representative_features(&s, &a).unwrap();
        let tiny = merge_by_clustering(&a, &f, &ClusterMethod::Density { eps: 1e-3, min_points: 3 }).unwrap();
        assert_eq!(tiny, a);
        let dup = merge_by_clustering(&a, &f, &ClusterMethod::Density { eps: 0.1, min_points: 2 }).unwrap();
        assert_eq!(dup.category(1), Some(0));
        assert_eq!(dup.category(2), Some(2));
        assert!(merge_by_clustering(&a, &f, &ClusterMethod::Density { eps: 0.0, min_points: 2 }).is_err());
        assert!(merge_by_clustering(&a, &f, &ClusterMethod::KMeans { k: 4, max_iter: 10, seed: 0 }).is_err());
    }

    fn blobs(seed: u64, per: usize) -> (Vec<Sample>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centers = [[0.0, 0.0], [6.0, 0.0], [0.0, 6.0]];
        let mut out = Vec::new();
        let mut truth = Vec::new();
        for (b, c) in centers.iter().enumerate() {
            for _ in 0..per {
                let raw = vec![c[0] + gaussian_vec(&mut rng, 1, 0.5)[0], c[1] + gaussian_vec(&mut rng, 1, 0.5)[0]];
                out.push(sample(out.len() as u64, SampleKind::Doc, raw));
                truth.push(b);
            }
        }
        (out, truth)
    }

    fn same_partition(a: &CategoryAssignment, truth: &[usize]) -> bool {
        (0..truth.len()).all(|i| {
            (0..truth.len()).all(|j| (truth[i] == truth[j]) == (a.category(i as u64) == a.category(j as u64)))
        })
    }

    #[test]
    fn kmeans_recovers_planted_blobs() {
        for seed in 0..5 {
            // separation 6 with σ = 0.5 is 12σ
            let (s, truth) = blobs(seed, 30);
            let a = assign_initial_ids(&s).unwrap();
            let f = representative_features(&s, &a).unwrap();
            let m = merge_by_clustering(&a, &f, &ClusterMethod::KMeans { k: 3, max_iter: 50, seed }).unwrap();
            assert!(same_partition(&m, &truth), "seed {seed}");
        }
    }

    #[test]
    fn density_recovers_planted_blobs() {
        for seed in 0..5 {
            let (s, truth) = blobs(seed, 30);
            let a = assign_initial_ids(&s).unwrap();
            let f = representative_features(&s, &a).unwrap();
            let m = merge_by_clustering(&a, &f, &ClusterMethod::Density { eps: 1.5, min_points: 2 }).unwrap();
            assert!(same_partition(&m, &truth), "seed {seed}");
        }
    }

    #[test]
    fn synthetic_clean_clicks_stay_within_products() {
        let spec = SyntheticSpec {
            num_products: 30,
            relevance_groups: 6,
            ..SyntheticSpec::default()
        };
        let data = generate_synthetic(&spec).unwrap();
        data.clicks.validate(&data.samples).unwrap();
        for r in data.clicks.records.iter().filter(|r| r.clicked) {
            assert_eq!(data.truth.product(r.q).unwrap(), data.truth.product(r.d).unwrap());
        }
        for s in data.samples.iter().chain(&data.test_samples) {
            s.validate(spec.n_raw, spec.max_tokens).unwrap();
        }
        let again = generate_synthetic(&spec).unwrap();
        assert_eq!(data, again);
    }

    #[test]
    fn flat_exposure_is_near_uniform() {
        let spec = SyntheticSpec {
            num_products: 50,
            exposure_exponent: 0.0,
            min_samples_per_product: 10,
            mean_samples_per_product: 110,
            ..SyntheticSpec::default()
        };
        let counts = exposure_counts(&spec, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(counts.iter().sum::<usize>(), 50 * 110);
        // 100 extra draws per product: binomial sd ≈ 10
        assert!(counts.iter().all(|&c| (60..=160).contains(&c)), "{counts:?}");
    }

    #[test]
    fn pinned_exposure_skew() {
        let spec = SyntheticSpec {
            num_products: 200,
            exposure_exponent: 1.2,
            seed: 1,
            ..SyntheticSpec::default()
        };
        let data = generate_synthetic(&spec).unwrap();
        let share = top_decile_doc_share(&data.samples, &data.truth).unwrap();
        assert!(share >= 0.40, "{share}");
        assert!((share - PINNED_TOP_DECILE_SHARE).abs() < 1e-12, "{share}");
    }

    const PINNED_TOP_DECILE_SHARE: f64 = 0.5820338983050848;

    #[test]
    fn clean_pipeline_recovers_products_on_clicked_components() {
        let spec = SyntheticSpec {
            num_products: 40,
            relevance_groups: 8,
            ..SyntheticSpec::default()
        };
        let data = generate_synthetic(&spec).unwrap();
        let cfg = OrganizeConfig {
            clustering: ClusteringConfig::None,
            ..OrganizeConfig::default()
        };
        let (a, _) = organize(&data.samples, &data.clicks, &cfg, 0).unwrap();
        for (_, members) in a.groups() {
            let p = data.truth.product(members[0]).unwrap();
            assert!(members.iter().all(|&m| data.truth.product(m).unwrap() == p));
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn click_merging_only_merges_and_ignores_order(
                edges in proptest::collection::vec((0u64..20, 0u64..20, any::<bool>()), 0..40),
                pre in proptest::collection::vec((0u64..20, 0u64..20), 0..5),
            ) {
                let s: Vec<Sample> = (0..40u64)
                    .map(|i| sample(i, if i < 20 { SampleKind::Query } else { SampleKind::Doc }, vec![]))
                    .collect();
                let records: Vec<ClickRecord> = edges.iter().map(|&(q, d, c)| ClickRecord { q, d: d + 20, clicked: c }).collect();
                let seed_log = ClickLog { records: pre.iter().map(|&(q, d)| ClickRecord { q, d: d + 20, clicked: true }).collect() };
                let start = merge_by_clicks(&assign_initial_ids(&s).unwrap(), &seed_log).unwrap();
                let merged = merge_by_clicks(&start, &ClickLog { records: records.clone() }).unwrap();
                for a in 0..40u64 {
                    for b in 0..40u64 {
                        if start.category(a) == start.category(b) {
                            prop_assert_eq!(merged.category(a), merged.category(b));
                        }
                    }
                }
                for (_, m) in merged.groups() {
                    prop_assert!(m.iter().all(|&x| merged.category(x) == Some(m[0])));
                }
                let mut rev = records;
                rev.reverse();
                prop_assert_eq!(merge_by_clicks(&start, &ClickLog { records: rev }).unwrap(), merged);
            }
        }
    }
}
