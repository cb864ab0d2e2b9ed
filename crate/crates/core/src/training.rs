//! Curriculum training: end-to-end on a medium subset of categories, then
//! proxy-only on the full set with every tower frozen, then end-to-end on
//! the full set. Plain SGD throughout.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data_org::{Sample, SampleKind};
use crate::error::{MixerError, Result};
use crate::model::{MixerModel, GROUPS};
use crate::numerics::{DenseTensor, Mode, ParamNode, Parameterized, Tape};
use crate::proxy_loss::{margin_loss, refresh_cache, ComputeCounters, LossConfig, ProxySimCache, ProxyStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PhaseName {
    A,
    B,
    C,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetSelector {
    Medium,
    Large,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CurriculumPhase {
    pub name: PhaseName,
    pub dataset: DatasetSelector,
    #[serde(default)]
    pub frozen: Vec<String>,
    pub iterations: u64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Stop early once the loss stops improving.
    #[serde(default)]
    pub plateau_stop: bool,
}

fn default_batch() -> usize {
    32
}

impl CurriculumPhase {
    pub fn a(iterations: u64) -> Self {
        CurriculumPhase {
            name: PhaseName::A,
            dataset: DatasetSelector::Medium,
            frozen: Vec::new(),
            iterations,
            batch_size: default_batch(),
            plateau_stop: false,
        }
    }

    pub fn b(iterations: u64) -> Self {
        CurriculumPhase {
            name: PhaseName::B,
            dataset: DatasetSelector::Large,
            frozen: GROUPS.iter().map(|g| g.to_string()).collect(),
            iterations,
            batch_size: default_batch(),
            plateau_stop: true,
        }
    }

    pub fn c(iterations: u64) -> Self {
        CurriculumPhase {
            name: PhaseName::C,
            dataset: DatasetSelector::Large,
            frozen: Vec::new(),
            iterations,
            batch_size: default_batch(),
            plateau_stop: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for g in &self.frozen {
            if !GROUPS.contains(&g.as_str()) {
                return Err(MixerError::UnknownGroup(g.clone()));
            }
        }
        if self.batch_size < 2 {
            return Err(MixerError::Config(format!("phase {:?}: batch_size must be at least 2", self.name)));
        }
        match self.name {
            PhaseName::B => {
                if let Some(g) = GROUPS.iter().find(|g| !self.frozen.iter().any(|f| f == *g)) {
                    return Err(MixerError::Config(format!("phase B must freeze `{g}`")));
                }
            }
            PhaseName::A | PhaseName::C => {
                if !self.frozen.is_empty() {
                    return Err(MixerError::Config(format!("phase {:?} must not freeze parameters", self.name)));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub loss: LossConfig,
    /// Share of categories in the medium dataset.
    pub medium_fraction: f64,
    /// Plateau rule: relative loss improvement below `plateau_tolerance`
    /// between consecutive windows of `plateau_window` iterations.
    pub plateau_window: u64,
    pub plateau_tolerance: f64,
    pub log_every: u64,
    pub plan: Vec<CurriculumPhase>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            loss: LossConfig::default(),
            medium_fraction: 0.25,
            plateau_window: 100,
            plateau_tolerance: 1e-3,
            log_every: 50,
            plan: vec![CurriculumPhase::a(2000), CurriculumPhase::b(2000), CurriculumPhase::c(15000)],
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(MixerError::Config("learning_rate must be a non-negative number".into()));
        }
        if !(self.medium_fraction > 0.0 && self.medium_fraction <= 1.0) {
            return Err(MixerError::Config("medium_fraction must lie in (0, 1]".into()));
        }
        if self.plateau_window == 0 || self.log_every == 0 {
            return Err(MixerError::Config("plateau_window and log_every must be positive".into()));
        }
        self.loss.validate()?;
        let mut last = None;
        for p in &self.plan {
            p.validate()?;
            if last.is_some_and(|l| l > p.name) {
                return Err(MixerError::Config("plan phases must be ordered A, B, C".into()));
            }
            last = Some(p.name);
        }
        Ok(())
    }
}

/// Labeled samples for one phase; `categories` lists the distinct labels ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub samples: Vec<Sample>,
    pub categories: Vec<u64>,
    queries: Vec<usize>,
    docs: Vec<usize>,
}

impl TrainingSet {
    pub fn new(samples: Vec<Sample>) -> Result<Self> {
        if samples.is_empty() {
            return Err(MixerError::InvalidParams("training set is empty".into()));
        }
        let categories: Vec<u64> = samples.iter().map(|s| s.category).collect::<BTreeSet<_>>().into_iter().collect();
        let queries = (0..samples.len()).filter(|&i| samples[i].kind == SampleKind::Query).collect();
        let docs = (0..samples.len()).filter(|&i| samples[i].kind == SampleKind::Doc).collect();
        Ok(TrainingSet {
            samples,
            categories,
            queries,
            docs,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Samples of a seeded random `fraction` of the categories.
    pub fn subset(&self, fraction: f64, seed: u64) -> Result<TrainingSet> {
        let mut cats = self.categories.clone();
        cats.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let keep = ((fraction * cats.len() as f64).ceil() as usize).clamp(1, cats.len());
        let keep: BTreeSet<u64> = cats[..keep].iter().copied().collect();
        TrainingSet::new(self.samples.iter().filter(|s| keep.contains(&s.category)).cloned().collect())
    }

    /// Keeps at most `max` samples per category, alternating queries and
    /// docs in seeded random order so both sides stay represented.
    pub fn clip_per_category(&self, max: usize, seed: u64) -> Result<TrainingSet> {
        if max == 0 {
            return Err(MixerError::InvalidParams("per-category cap must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut by_cat: BTreeMap<u64, (Vec<usize>, Vec<usize>)> = BTreeMap::new();
        for (i, s) in self.samples.iter().enumerate() {
            let e = by_cat.entry(s.category).or_default();
            match s.kind {
                SampleKind::Query => e.0.push(i),
                SampleKind::Doc => e.1.push(i),
            }
        }
        let mut keep = Vec::new();
        for (_, (mut q, mut d)) in by_cat {
            q.shuffle(&mut rng);
            d.shuffle(&mut rng);
            let (mut qi, mut di) = (q.into_iter(), d.into_iter());
            let mut taken = 0;
            let mut from_query = true;
            while taken < max {
                let next = if from_query { qi.next().or_else(|| di.next()) } else { di.next().or_else(|| qi.next()) };
                match next {
                    Some(i) => keep.push(i),
                    None => break,
                }
                taken += 1;
                from_query = !from_query;
            }
        }
        keep.sort_unstable();
        TrainingSet::new(keep.into_iter().map(|i| self.samples[i].clone()).collect())
    }

    /// Batch indices drawn uniformly without replacement, topped up so that
    /// each side has at least two rows whenever the data allows it.
    pub fn sample_batch(&self, size: usize, rng: &mut impl Rng) -> Vec<usize> {
        let n = self.samples.len();
        let size = size.min(n);
        let mut batch = index::sample(rng, n, size).into_vec();
        for (want, pool) in [(SampleKind::Query, &self.queries), (SampleKind::Doc, &self.docs)] {
            let need = 2.min(pool.len());
            loop {
                let have = batch.iter().filter(|&&i| self.samples[i].kind == want).count();
                if have >= need {
                    break;
                }
                let candidate = pool[rng.random_range(0..pool.len())];
                if batch.contains(&candidate) {
                    continue;
                }
                let victims: Vec<usize> = (0..batch.len())
                    .filter(|&j| self.samples[batch[j]].kind != want)
                    .collect();
                let other_count = victims.len();
                if other_count <= 2 {
                    batch.push(candidate);
                } else {
                    let v = victims[rng.random_range(0..victims.len())];
                    batch[v] = candidate;
                }
            }
        }
        batch
    }
}

/// One structured training-log line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub iter: u64,
    pub phase: PhaseName,
    pub loss: f64,
    pub dot_products_total: u64,
    pub per_shard: Vec<u64>,
    /// Logits an unpruned loss would have computed for the same batch.
    pub full_dot_products: u64,
}

/// Everything a training run mutates.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub iteration: u64,
    pub model: MixerModel,
    pub proxies: ProxyStore,
    /// Proxy row → category id.
    pub category_ids: Vec<u64>,
    pub cache: Option<ProxySimCache>,
    pub config: TrainConfig,
    pub seed: u64,
}

fn phase_stream(phase: PhaseName) -> u64 {
    match phase {
        PhaseName::A => 1,
        PhaseName::B => 2,
        PhaseName::C => 3,
    }
}

impl TrainState {
    pub fn new(model: MixerModel, config: TrainConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_9e0c);
        let d = model.config.d;
        // placeholder row; replaced when the first categories arrive
        let proxies = ProxyStore::random(1, d, config.loss.shards, &mut rng)?;
        Ok(TrainState {
            iteration: 0,
            model,
            proxies,
            category_ids: Vec::new(),
            cache: None,
            config,
            seed,
        })
    }

    pub fn category_index(&self) -> BTreeMap<u64, usize> {
        self.category_ids.iter().enumerate().map(|(i, &c)| (c, i)).collect()
    }

    /// Appends random unit proxies for categories not seen before, in ascending id order.
    pub fn ensure_categories(&mut self, categories: &[u64]) -> Result<usize> {
        let known: BTreeSet<u64> = self.category_ids.iter().copied().collect();
        let fresh: Vec<u64> = categories.iter().copied().filter(|c| !known.contains(c)).collect();
        if fresh.is_empty() {
            return Ok(0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x9c0f_1e5);
        rng.set_stream(self.category_ids.len() as u64);
        if self.category_ids.is_empty() {
            let d = self.proxies.dim();
            let trainable = self.proxies.weights.trainable;
            self.proxies = ProxyStore::random(fresh.len(), d, self.config.loss.shards, &mut rng)?;
            self.proxies.weights.trainable = trainable;
        } else {
            self.proxies.grow(fresh.len(), &mut rng)?;
        }
        self.category_ids.extend(&fresh);
        self.cache = None;
        Ok(fresh.len())
    }

    fn refresh_if_needed(&mut self, force: bool) {
        if !self.config.loss.knn_enabled {
            self.cache = None;
            return;
        }
        let stale = self.cache.as_ref().is_none_or(|c| c.is_stale(self.iteration));
        if force || stale {
            self.cache = Some(refresh_cache(&self.proxies, &self.config.loss, self.iteration));
        }
    }

    /// One SGD step on the given samples. On error nothing is modified.
    pub fn sgd_step(&mut self, batch: &[&Sample], phase: PhaseName) -> Result<StepLog> {
        self.refresh_if_needed(false);
        let index = self.category_index();
        let mut queries = Vec::new();
        let mut docs = Vec::new();
        for s in batch {
            match s.kind {
                SampleKind::Query => queries.push(*s),
                SampleKind::Doc => docs.push(*s),
            }
        }
        let mut labels = Vec::with_capacity(batch.len());
        for s in queries.iter().chain(&docs) {
            labels.push(*index.get(&s.category).ok_or_else(|| {
                MixerError::InvalidParams(format!("category {} has no proxy", s.category))
            })?);
        }

        let mode_of = |group: &str| {
            let trainable = self.model.params_in_group(group).iter().any(|p| p.trainable);
            if trainable { Mode::Train } else { Mode::Infer }
        };
        // batch statistics need two rows; a lone row uses the running ones
        let q_mode = if queries.len() < 2 { Mode::Infer } else { mode_of("query_transform") };
        let d_mode = if docs.len() < 2 { Mode::Infer } else { mode_of("doc_transform") };
        let n_raw = self.model.config.n_raw;
        let stack = |rows: &[&Sample]| -> Result<DenseTensor> {
            let mut data = Vec::with_capacity(rows.len() * n_raw);
            for s in rows {
                if s.raw.len() != n_raw {
                    return Err(MixerError::shape("sample raw", &[s.raw.len()], &[n_raw]));
                }
                data.extend_from_slice(&s.raw);
            }
            DenseTensor::matrix(rows.len(), n_raw, data)
        };

        let mut tape = Tape::new();
        let mut sink = Vec::new();
        let mut parts = Vec::new();
        if !queries.is_empty() {
            let raw = tape.constant(stack(&queries)?);
            parts.push(self.model.query_embed_batch(&mut tape, raw, q_mode, &mut sink)?);
        }
        if !docs.is_empty() {
            let raw = tape.constant(stack(&docs)?);
            let tokens: Vec<Vec<usize>> = docs.iter().map(|s| s.tokens.clone()).collect();
            parts.push(self.model.doc_embed_batch(&mut tape, raw, &tokens, d_mode, &mut sink)?);
        }
        let z = if parts.len() == 1 { parts[0] } else { tape.concat_rows(&parts)? };
        let w = tape.param(&self.proxies.weights);
        let (loss, counters) = margin_loss(
            &mut tape,
            z,
            w,
            &labels,
            &self.proxies.layout,
            &self.config.loss,
            self.cache.as_ref(),
        )?;
        let loss_value = tape.value(loss).data()[0];
        let grads = tape.backward(loss)?;

        let lr = self.config.learning_rate;
        let mut updates: Vec<(usize, DenseTensor)> = Vec::new();
        for (i, p) in self.model.params().iter().enumerate() {
            if !p.trainable {
                continue;
            }
            if let Some(g) = tape.param_var(&p.name).and_then(|v| grads.get(v)) {
                updates.push((i, p.value.zip_map(g, |v, g| sgd_update(v, g, lr))?));
            }
        }
        let new_proxies = match (self.proxies.weights.trainable, grads.get(w)) {
            (true, Some(g)) => Some(step_proxies(&self.proxies.weights, g, lr)?),
            _ => None,
        };
        if updates.iter().any(|(_, t)| !t.all_finite()) {
            return Err(MixerError::NonFinite("sgd_step"));
        }

        let mut params = self.model.params_mut();
        for (i, t) in updates {
            params[i].value = t;
        }
        drop(params);
        if let Some(w) = new_proxies {
            self.proxies.weights.value = w;
        }
        self.model.apply_stats(&sink)?;
        self.iteration += 1;
        let classes = self.proxies.categories() as u64;
        Ok(StepLog {
            iter: self.iteration,
            phase,
            loss: loss_value,
            dot_products_total: counters.dot_products,
            per_shard: counters.per_shard,
            full_dot_products: classes * labels.len() as u64,
        })
    }

    /// SHA-256 over the names, shapes and exact values of the given groups
    /// (running statistics included).
    pub fn group_hash(&self, groups: &[&str]) -> String {
        let mut h = Sha256::new();
        for p in self.model.params() {
            if groups.contains(&MixerModel::group_of(&p.name).unwrap_or("")) {
                hash_param(&mut h, p);
            }
        }
        hex(&h.finalize())
    }

    /// Hash of every model parameter and the proxies.
    pub fn full_hash(&self) -> String {
        let mut h = Sha256::new();
        for p in self.model.params() {
            hash_param(&mut h, p);
        }
        hash_param(&mut h, &self.proxies.weights);
        for c in &self.category_ids {
            h.update(c.to_le_bytes());
        }
        hex(&h.finalize())
    }
}

/// Plain SGD on one coordinate.
pub fn sgd_update(value: f64, grad: f64, lr: f64) -> f64 {
    value - lr * grad
}

fn step_proxies(w: &ParamNode, g: &DenseTensor, lr: f64) -> Result<DenseTensor> {
    let mut out = w.value.clone();
    for r in 0..out.rows() {
        let grad = g.row(r);
        if grad.iter().all(|&x| x == 0.0) {
            continue;
        }
        let row = out.row_mut(r);
        let before = row.to_vec();
        for (v, gv) in row.iter_mut().zip(grad) {
            *v = sgd_update(*v, *gv, lr);
        }
        if row == before.as_slice() {
            continue;
        }
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(n > crate::numerics::EPS_NORM) || !n.is_finite() {
            return Err(MixerError::DegenerateNorm {
                norm: n,
                eps: crate::numerics::EPS_NORM,
            });
        }
        row.iter_mut().for_each(|x| *x /= n);
    }
    Ok(out)
}

fn hash_param(h: &mut Sha256, p: &ParamNode) {
    h.update(p.name.as_bytes());
    h.update([0u8]);
    for s in p.value.shape() {
        h.update((*s as u64).to_le_bytes());
    }
    for v in p.value.data() {
        h.update(v.to_bits().to_le_bytes());
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Outcome of one curriculum phase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseReport {
    pub name: PhaseName,
    pub iterations_run: u64,
    pub stopped_on_plateau: bool,
    pub new_categories: usize,
    /// Sampled loss curve `(iteration, loss)` every `log_every` steps.
    pub losses: Vec<(u64, f64)>,
    pub frozen_hash_before: String,
    pub frozen_hash_after: String,
    pub counters: ComputeCounters,
    pub full_dot_products: u64,
}

/// Runs one phase to its budget (or plateau). `on_step` sees every log line.
pub fn run_phase(
    state: &mut TrainState,
    phase: &CurriculumPhase,
    data: &TrainingSet,
    on_step: &mut dyn FnMut(&StepLog),
) -> Result<PhaseReport> {
    phase.validate()?;
    let new_categories = state.ensure_categories(&data.categories)?;
    state.model.set_trainable(&phase.frozen)?;
    let frozen: Vec<&str> = phase.frozen.iter().map(String::as_str).collect();
    let frozen_hash_before = state.group_hash(&frozen);
    state.refresh_if_needed(true);

    let mut losses = Vec::new();
    let mut recent = Vec::new();
    let mut counters = ComputeCounters::new(state.proxies.layout.num_shards());
    let mut full = 0;
    let mut stopped = false;
    let window = state.config.plateau_window as usize;
    let mut run = 0;
    for k in 0..phase.iterations {
        let mut rng = ChaCha8Rng::seed_from_u64(state.seed);
        rng.set_stream((phase_stream(phase.name) << 40) | state.iteration);
        let idx = data.sample_batch(phase.batch_size, &mut rng);
        let batch: Vec<&Sample> = idx.iter().map(|&i| &data.samples[i]).collect();
        let log = state.sgd_step(&batch, phase.name)?;
        counters.merge(&ComputeCounters {
            dot_products: log.dot_products_total,
            per_shard: log.per_shard.clone(),
        });
        full += log.full_dot_products;
        on_step(&log);
        if k % state.config.log_every == 0 || k + 1 == phase.iterations {
            losses.push((log.iter, log.loss));
        }
        recent.push(log.loss);
        run += 1;
        if phase.plateau_stop && recent.len() >= 2 * window && recent.len() % window == 0 {
            let cur: f64 = recent[recent.len() - window..].iter().sum::<f64>() / window as f64;
            let prev: f64 = recent[recent.len() - 2 * window..recent.len() - window].iter().sum::<f64>() / window as f64;
            if prev > 0.0 && (prev - cur) / prev < state.config.plateau_tolerance {
                stopped = true;
                break;
            }
        }
    }
    let frozen_hash_after = state.group_hash(&frozen);
    state.model.set_trainable(&[])?;
    Ok(PhaseReport {
        name: phase.name,
        iterations_run: run,
        stopped_on_plateau: stopped,
        new_categories,
        losses,
        frozen_hash_before,
        frozen_hash_after,
        counters,
        full_dot_products: full,
    })
}

/// Medium and large training sets.
#[derive(Debug, Clone)]
pub struct Datasets {
    pub medium: TrainingSet,
    pub large: TrainingSet,
}

impl Datasets {
    pub fn from_large(large: TrainingSet, medium_fraction: f64, seed: u64) -> Result<Self> {
        Ok(Datasets {
            medium: large.subset(medium_fraction, seed)?,
            large,
        })
    }

    pub fn select(&self, s: DatasetSelector) -> &TrainingSet {
        match s {
            DatasetSelector::Medium => &self.medium,
            DatasetSelector::Large => &self.large,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurriculumReport {
    pub phases: Vec<PhaseReport>,
    pub final_hash: String,
}

/// Runs the plan in order; `after_phase` is called at each phase boundary
/// (used for checkpoints and metric snapshots).
pub fn run_curriculum(
    state: &mut TrainState,
    data: &Datasets,
    on_step: &mut dyn FnMut(&StepLog),
    after_phase: &mut dyn FnMut(&TrainState, &PhaseReport) -> Result<()>,
) -> Result<CurriculumReport> {
    let plan = state.config.plan.clone();
    run_plan(state, &plan, data, on_step, after_phase)
}

pub fn run_plan(
    state: &mut TrainState,
    plan: &[CurriculumPhase],
    data: &Datasets,
    on_step: &mut dyn FnMut(&StepLog),
    after_phase: &mut dyn FnMut(&TrainState, &PhaseReport) -> Result<()>,
) -> Result<CurriculumReport> {
    let mut phases = Vec::new();
    for phase in plan {
        let report = run_phase(state, phase, data.select(phase.dataset), on_step)?;
        after_phase(state, &report)?;
        phases.push(report);
    }
    Ok(CurriculumReport {
        phases,
        final_hash: state.full_hash(),
    })
}
