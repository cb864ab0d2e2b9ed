//! Proxy classification loss with an additive angular margin.
//!
//! For sample `i` with label `y`, logits are `s·cos(θ_y + m)` for the label
//! proxy and `s·cos θ_c` for every other candidate `c`; the loss is the
//! mean negative log-softmax of the label logit. Candidates are either all
//! categories or, with KNN pruning, the cached top-K neighbors of the label
//! proxy. Proxy rows live in contiguous virtual shards; logits are computed
//! shard by shard and gathered in ascending category order.

use std::ops::Range;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{MixerError, Result};
use crate::numerics::tape::CosineGrad;
use crate::numerics::{dot, DenseTensor, ParamNode, Tape, Var};

/// Allowed deviation from unit norm for embeddings and proxies.
pub const NORM_TOLERANCE: f64 = 1e-6;

/// Floor on `sin θ` in the margin derivative, which diverges as `θ → 0`.
pub const SIN_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    /// Temperature `s`.
    pub scale: f64,
    /// Additive angular margin `m` in radians.
    pub margin: f64,
    pub knn_fraction: f64,
    pub refresh_interval: u64,
    pub knn_enabled: bool,
    pub shards: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            scale: 64.0,
            margin: 0.5,
            knn_fraction: 0.1,
            refresh_interval: 1000,
            knn_enabled: true,
            shards: 4,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale > 0.0) {
            return Err(MixerError::Config("loss.scale must be positive".into()));
        }
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&self.margin) {
            return Err(MixerError::Config("loss.margin must lie in [0, π/2)".into()));
        }
        if !(self.knn_fraction > 0.0 && self.knn_fraction <= 1.0) {
            return Err(MixerError::Config("loss.knn_fraction must lie in (0, 1]".into()));
        }
        if self.refresh_interval == 0 || self.shards == 0 {
            return Err(MixerError::Config(
                "loss.refresh_interval and loss.shards must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Contiguous row ranges, one per virtual shard, partitioning `[0, C)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardLayout {
    ranges: Vec<Range<usize>>,
    categories: usize,
}

impl ShardLayout {
    /// Near-equal contiguous split; never more shards than categories.
    pub fn even(categories: usize, shards: usize) -> Result<Self> {
        if categories == 0 || shards == 0 {
            return Err(MixerError::InvalidShardLayout(format!(
                "{categories} categories over {shards} shards"
            )));
        }
        let shards = shards.min(categories);
        let base = categories / shards;
        let extra = categories % shards;
        let mut ranges = Vec::with_capacity(shards);
        let mut start = 0;
        for s in 0..shards {
            let len = base + usize::from(s < extra);
            ranges.push(start..start + len);
            start += len;
        }
        Ok(ShardLayout { ranges, categories })
    }

    pub fn from_ranges(ranges: Vec<Range<usize>>, categories: usize) -> Result<Self> {
        let mut next = 0;
        for r in &ranges {
            if r.start != next || r.end <= r.start {
                return Err(MixerError::InvalidShardLayout(format!(
                    "ranges {ranges:?} do not partition [0, {categories})"
                )));
            }
            next = r.end;
        }
        if next != categories {
            return Err(MixerError::InvalidShardLayout(format!(
                "ranges {ranges:?} do not partition [0, {categories})"
            )));
        }
        Ok(ShardLayout { ranges, categories })
    }

    pub fn ranges(&self) -> &[Range<usize>] {
        &self.ranges
    }

    pub fn num_shards(&self) -> usize {
        self.ranges.len()
    }

    pub fn categories(&self) -> usize {
        self.categories
    }

    pub fn owner(&self, category: usize) -> Option<usize> {
        self.ranges.iter().position(|r| r.contains(&category))
    }

    /// Splits a candidate set by owning shard; each part is sorted ascending.
    pub fn partition(&self, candidates: &[usize]) -> Result<Vec<Vec<usize>>> {
        let mut parts = vec![Vec::new(); self.ranges.len()];
        for &c in candidates {
            let s = self.owner(c).ok_or(MixerError::UnownedCategory(c))?;
            parts[s].push(c);
        }
        for p in &mut parts {
            p.sort_unstable();
            p.dedup();
        }
        Ok(parts)
    }
}

/// Dot-product tallies for the pruning-savings report.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComputeCounters {
    pub dot_products: u64,
    pub per_shard: Vec<u64>,
}

impl ComputeCounters {
    pub fn new(shards: usize) -> Self {
        ComputeCounters {
            dot_products: 0,
            per_shard: vec![0; shards],
        }
    }

    pub fn merge(&mut self, other: &ComputeCounters) {
        self.dot_products += other.dot_products;
        if self.per_shard.len() < other.per_shard.len() {
            self.per_shard.resize(other.per_shard.len(), 0);
        }
        for (a, b) in self.per_shard.iter_mut().zip(&other.per_shard) {
            *a += b;
        }
    }
}

/// Category centers `W: C×d` (one unit-norm row per category) and their shard layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxyStore {
    pub weights: ParamNode,
    pub layout: ShardLayout,
}

pub const PROXY_PARAM: &str = "proxies";

fn random_unit_row(rng: &mut impl Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

impl ProxyStore {
    pub fn random(categories: usize, d: usize, shards: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut data = Vec::with_capacity(categories * d);
        for _ in 0..categories {
            data.extend(random_unit_row(rng, d));
        }
        let w = DenseTensor::matrix(categories, d, data)?;
        Ok(ProxyStore {
            weights: ParamNode::new(PROXY_PARAM, w, true),
            layout: ShardLayout::even(categories, shards)?,
        })
    }

    /// Wraps explicit rows, normalizing each to unit length.
    pub fn from_rows(w: DenseTensor, shards: usize) -> Result<Self> {
        let mut store = ProxyStore {
            layout: ShardLayout::even(w.rows(), shards)?,
            weights: ParamNode::new(PROXY_PARAM, w, true),
        };
        store.renormalize()?;
        Ok(store)
    }

    pub fn with_layout(mut self, layout: ShardLayout) -> Result<Self> {
        if layout.categories() != self.categories() {
            return Err(MixerError::InvalidShardLayout(format!(
                "layout covers {} categories, store has {}",
                layout.categories(),
                self.categories()
            )));
        }
        self.layout = layout;
        Ok(self)
    }

    pub fn categories(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn row(&self, c: usize) -> &[f64] {
        self.weights.value.row(c)
    }

    pub fn renormalize(&mut self) -> Result<()> {
        for i in 0..self.categories() {
            let row = self.weights.value.row_mut(i);
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !(n > crate::numerics::EPS_NORM) {
                return Err(MixerError::DegenerateNorm {
                    norm: n,
                    eps: crate::numerics::EPS_NORM,
                });
            }
            row.iter_mut().for_each(|x| *x /= n);
        }
        Ok(())
    }

    /// Appends `extra` freshly random unit rows and re-splits the shards.
    pub fn grow(&mut self, extra: usize, rng: &mut impl Rng) -> Result<()> {
        if extra == 0 {
            return Ok(());
        }
        let d = self.dim();
        let c = self.categories() + extra;
        let mut data = self.weights.value.data().to_vec();
        for _ in 0..extra {
            data.extend(random_unit_row(rng, d));
        }
        let trainable = self.weights.trainable;
        self.weights = ParamNode::new(PROXY_PARAM, DenseTensor::matrix(c, d, data)?, trainable);
        self.layout = ShardLayout::even(c, self.layout.num_shards())?;
        Ok(())
    }
}

/// `K = max(1, round(fraction·C))`, capped at `C`.
pub fn knn_size(categories: usize, fraction: f64) -> usize {
    ((fraction * categories as f64).round() as usize).clamp(1, categories.max(1))
}

/// Top-K most similar proxies per proxy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxySimCache {
    pub topk: Vec<Vec<usize>>,
    pub built_at_iter: u64,
    pub refresh_interval: u64,
    /// Dot products spent building the similarity table.
    pub build_cost: u64,
}

impl ProxySimCache {
    pub fn k(&self) -> usize {
        self.topk.first().map_or(0, Vec::len)
    }

    pub fn is_stale(&self, iteration: u64) -> bool {
        iteration >= self.built_at_iter + self.refresh_interval
    }
}

/// Rebuilds the neighbor lists from cosine similarity between proxies.
/// Each list starts with the proxy itself; the rest are ordered by
/// descending similarity with ties going to the lower category id.
pub fn refresh_cache(store: &ProxyStore, cfg: &LossConfig, iteration: u64) -> ProxySimCache {
    let c = store.categories();
    let k = knn_size(c, cfg.knn_fraction);
    let w = &store.weights.value;
    let mut sims = vec![0.0; c * c];
    for a in 0..c {
        for b in a..c {
            let s = dot(w.row(a), w.row(b));
            sims[a * c + b] = s;
            sims[b * c + a] = s;
        }
    }
    let topk = (0..c)
        .map(|a| {
            let mut others: Vec<usize> = (0..c).filter(|&b| b != a).collect();
            others.sort_by(|&x, &y| {
                sims[a * c + y]
                    .total_cmp(&sims[a * c + x])
                    .then(x.cmp(&y))
            });
            let mut list = Vec::with_capacity(k);
            list.push(a);
            list.extend(others.into_iter().take(k - 1));
            list
        })
        .collect();
    ProxySimCache {
        topk,
        built_at_iter: iteration,
        refresh_interval: cfg.refresh_interval,
        build_cost: (c * (c + 1) / 2) as u64,
    }
}

/// `w_c · z` for every candidate, computed by the shard that owns `c` and
/// gathered in ascending category order.
pub fn sharded_logits(
    z: &[f64],
    weights: &DenseTensor,
    layout: &ShardLayout,
    candidates: &[usize],
    counters: &mut ComputeCounters,
) -> Result<Vec<(usize, f64)>> {
    if weights.rows() != layout.categories() {
        return Err(MixerError::InvalidShardLayout(format!(
            "layout covers {} categories, weights have {} rows",
            layout.categories(),
            weights.rows()
        )));
    }
    if counters.per_shard.len() < layout.num_shards() {
        counters.per_shard.resize(layout.num_shards(), 0);
    }
    let parts = layout.partition(candidates)?;
    let mut out = Vec::with_capacity(candidates.len());
    for (s, owned) in parts.iter().enumerate() {
        for &c in owned {
            out.push((c, dot(weights.row(c), z)));
        }
        counters.per_shard[s] += owned.len() as u64;
        counters.dot_products += owned.len() as u64;
    }
    Ok(out)
}

/// Candidate categories for a sample labeled `label`, ascending.
pub fn candidates_for(
    label: usize,
    categories: usize,
    cfg: &LossConfig,
    cache: Option<&ProxySimCache>,
) -> Result<Vec<usize>> {
    if !cfg.knn_enabled {
        return Ok((0..categories).collect());
    }
    let cache = cache.ok_or_else(|| MixerError::InvalidParams("KNN pruning enabled without a cache".into()))?;
    let list = cache
        .topk
        .get(label)
        .ok_or(MixerError::LabelOutOfRange { label, classes: cache.topk.len() })?;
    let mut c = list.clone();
    c.sort_unstable();
    Ok(c)
}

fn check_unit_rows(t: &DenseTensor) -> Result<()> {
    for i in 0..t.rows() {
        let n = t.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
        if (n - 1.0).abs() > NORM_TOLERANCE {
            return Err(MixerError::Unnormalized { row: i, norm: n });
        }
    }
    Ok(())
}

/// Margin loss over a batch of unit embeddings `z: [N × d]` against the
/// proxy matrix `w: [C × d]` (both tape values), returning the scalar loss
/// node and the logit dot-product counts.
pub fn margin_loss(
    tape: &mut Tape,
    z: Var,
    w: Var,
    labels: &[usize],
    layout: &ShardLayout,
    cfg: &LossConfig,
    cache: Option<&ProxySimCache>,
) -> Result<(Var, ComputeCounters)> {
    let zv = tape.value(z);
    let wv = tape.value(w);
    if zv.shape().len() != 2 || wv.shape().len() != 2 || zv.cols() != wv.cols() {
        return Err(MixerError::shape("margin_loss", zv.shape(), wv.shape()));
    }
    let n = zv.rows();
    let classes = wv.rows();
    if labels.len() != n {
        return Err(MixerError::shape("margin_loss labels", zv.shape(), &[labels.len()]));
    }
    if let Some(&label) = labels.iter().find(|&&y| y >= classes) {
        return Err(MixerError::LabelOutOfRange { label, classes });
    }
    check_unit_rows(zv)?;
    check_unit_rows(wv)?;

    let (cos_m, sin_m) = (cfg.margin.cos(), cfg.margin.sin());
    let s = cfg.scale;
    let inv_n = 1.0 / n as f64;
    let mut counters = ComputeCounters::new(layout.num_shards());
    let mut total = 0.0;
    let mut grads = Vec::new();

    for (i, &y) in labels.iter().enumerate() {
        let cand = candidates_for(y, classes, cfg, cache)?;
        let logits = sharded_logits(zv.row(i), wv, layout, &cand, &mut counters)?;
        let cos_y = logits
            .iter()
            .find(|(c, _)| *c == y)
            .map(|&(_, v)| v)
            .unwrap_or_else(|| dot(zv.row(i), wv.row(y)));
        let sin_y = (1.0 - cos_y * cos_y).max(0.0).sqrt();
        let target = s * (cos_y * cos_m - sin_y * sin_m);

        let others: Vec<(usize, f64)> = logits
            .iter()
            .filter(|(c, _)| *c != y)
            .map(|&(c, v)| (c, s * v))
            .collect();
        let max = others.iter().map(|&(_, l)| l).fold(target, f64::max);
        let mut denom = (target - max).exp();
        for &(_, l) in &others {
            denom += (l - max).exp();
        }
        let lse = max + denom.ln();
        total += lse - target;

        let p_target = (target - max).exp() / denom;
        let dtarget_dcos = s * (cos_m + sin_m * cos_y / sin_y.max(SIN_FLOOR));
        grads.push(CosineGrad {
            sample: i,
            category: y,
            coef: inv_n * (p_target - 1.0) * dtarget_dcos,
        });
        for &(c, l) in &others {
            let p = (l - max).exp() / denom;
            grads.push(CosineGrad {
                sample: i,
                category: c,
                coef: inv_n * p * s,
            });
        }
    }
    let loss = tape.cosine_loss(z, w, total * inv_n, grads)?;
    Ok((loss, counters))
}

/// Untracked convenience: loss value for given embeddings and store.
pub fn margin_loss_value(
    z: &DenseTensor,
    labels: &[usize],
    store: &ProxyStore,
    cfg: &LossConfig,
    cache: Option<&ProxySimCache>,
) -> Result<(f64, ComputeCounters)> {
    let mut tape = Tape::new();
    let zv = tape.constant(z.clone());
    let wv = tape.constant(store.weights.value.clone());
    let (l, counters) = margin_loss(&mut tape, zv, wv, labels, &store.layout, cfg, cache)?;
    Ok((tape.value(l).data()[0], counters))
}
