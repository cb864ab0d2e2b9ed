//! Finite-difference checks of the full model, one verdict per parameter group.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MixerError, Result};
use crate::model::{MixerModel, ModelConfig, Variant, GROUPS};
use crate::numerics::gradcheck::relative_error;
use crate::numerics::{DenseTensor, Mode, ParamNode, Parameterized, Tape};
use crate::proxy_loss::{margin_loss, LossConfig, ProxyStore, ShardLayout, PROXY_PARAM};

/// Name of the proxy group in reports.
pub const PROXY_GROUP: &str = "proxies";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCheckConfig {
    pub step: f64,
    pub tolerance: f64,
    pub seeds: Vec<u64>,
    pub d: usize,
    pub e: usize,
    pub h2: usize,
    pub n: usize,
    pub n_raw: usize,
    pub backbone_hidden: usize,
    pub vocab: usize,
    pub categories: usize,
    pub queries: usize,
    pub docs: usize,
    pub loss: LossConfig,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-5,
            tolerance: 1e-4,
            seeds: (0..5).collect(),
            d: 8,
            e: 4,
            h2: 4,
            n: 8,
            n_raw: 16,
            backbone_hidden: 8,
            vocab: 24,
            categories: 8,
            queries: 3,
            docs: 3,
            loss: LossConfig::default(),
        }
    }
}

impl GradCheckConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0) || !(self.tolerance > 0.0) {
            return Err(MixerError::Config("grad_check.step and grad_check.tolerance must be positive".into()));
        }
        if self.seeds.is_empty() {
            return Err(MixerError::Config("grad_check.seeds is empty".into()));
        }
        if self.queries < 2 || self.docs < 2 {
            return Err(MixerError::Config("grad_check needs at least 2 queries and 2 docs for batch norm".into()));
        }
        if self.categories == 0 {
            return Err(MixerError::Config("grad_check.categories must be positive".into()));
        }
        self.loss.validate()?;
        self.model_config().validate()
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            d: self.d,
            e: self.e,
            h2: self.h2,
            n: self.n,
            n_raw: self.n_raw,
            backbone_hidden: self.backbone_hidden,
            vocab: self.vocab,
            max_text_len: 6,
            fusion_bias: true,
            variant: Variant::Mixer,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCheck {
    pub group: String,
    pub parameters: usize,
    /// Worst relative error over seeds.
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub tolerance: f64,
    pub seeds: Vec<u64>,
    pub groups: Vec<GroupCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.passed)
    }
}

struct Instance {
    model: MixerModel,
    proxies: ProxyStore,
    queries: DenseTensor,
    docs: DenseTensor,
    tokens: Vec<Vec<usize>>,
    labels: Vec<usize>,
}

fn instance(cfg: &GradCheckConfig, seed: u64) -> Result<Instance> {
    let model = MixerModel::new(cfg.model_config(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x67c));
    let proxies = ProxyStore::random(cfg.categories, cfg.d, cfg.loss.shards.min(cfg.categories), &mut rng)?;
    let mut raw = |rows: usize| DenseTensor::from_fn(&[rows, cfg.n_raw], |_| rng.random_range(-1.0..1.0));
    let queries = raw(cfg.queries);
    let docs = raw(cfg.docs);
    let tokens = (0..cfg.docs)
        .map(|_| {
            let len = rng.random_range(1..=4);
            (0..len).map(|_| rng.random_range(0..cfg.vocab)).collect()
        })
        .collect();
    let labels = (0..cfg.queries + cfg.docs).map(|_| rng.random_range(0..cfg.categories)).collect();
    Ok(Instance {
        model,
        proxies,
        queries,
        docs,
        tokens,
        labels,
    })
}

/// Loss of one instance; proxies are re-normalized on the tape so that
/// perturbed rows stay admissible. Returns the tape, the loss and the proxy var.
fn forward(inst: &Instance, model: &MixerModel, proxies: &ParamNode, loss: &LossConfig) -> Result<(Tape, crate::numerics::Var, crate::numerics::Var)> {
    let mut tape = Tape::new();
    let mut sink = Vec::new();
    let q = tape.constant(inst.queries.clone());
    let zq = model.query_embed_batch(&mut tape, q, Mode::Train, &mut sink)?;
    let d = tape.constant(inst.docs.clone());
    let zd = model.doc_embed_batch(&mut tape, d, &inst.tokens, Mode::Train, &mut sink)?;
    let z = tape.concat_rows(&[zq, zd])?;
    let w_raw = tape.param(proxies);
    let w = tape.l2_normalize_rows(w_raw)?;
    let layout = ShardLayout::even(proxies.value.rows(), inst.proxies.layout.num_shards())?;
    let (l, _) = margin_loss(&mut tape, z, w, &inst.labels, &layout, loss, None)?;
    Ok((tape, l, w_raw))
}

fn loss_value(inst: &Instance, model: &MixerModel, proxies: &ParamNode, loss: &LossConfig) -> Result<f64> {
    let (tape, l, _) = forward(inst, model, proxies, loss)?;
    Ok(tape.value(l).data()[0])
}

fn group_name(p: &str) -> &'static str {
    if p == PROXY_PARAM {
        PROXY_GROUP
    } else {
        MixerModel::group_of(p).unwrap_or("")
    }
}

/// Per-group relative errors for one seed, keyed by group name. The
/// analytic gradient of `corrupt` (if any) is scaled by 1.01 first.
fn check_instance(cfg: &GradCheckConfig, seed: u64, corrupt: Option<&str>) -> Result<BTreeMap<String, (usize, f64)>> {
    let inst = instance(cfg, seed)?;
    // the full softmax; the pruned one is a restriction of the same expression
    let loss = LossConfig {
        knn_enabled: false,
        ..cfg.loss.clone()
    };
    let (tape, l, w_var) = forward(&inst, &inst.model, &inst.proxies.weights, &loss)?;
    let grads = tape.backward(l)?;

    let mut analytic: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut numeric: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut push_analytic = |name: &str, g: Option<&DenseTensor>, len: usize| {
        let k = if corrupt == Some(group_name(name)) { 1.01 } else { 1.0 };
        let entry = analytic.entry(group_name(name)).or_default();
        match g {
            Some(g) => entry.extend(g.data().iter().map(|x| x * k)),
            None => entry.extend(std::iter::repeat_n(0.0, len)),
        }
    };
    for p in inst.model.params() {
        if p.trainable {
            push_analytic(&p.name, tape.param_var(&p.name).and_then(|v| grads.get(v)), p.value.len());
        }
    }
    push_analytic(PROXY_PARAM, grads.get(w_var), inst.proxies.weights.value.len());

    let h = cfg.step;
    let mut model = inst.model.clone();
    let count = model.params().len();
    for i in 0..count {
        let (name, len, trainable) = {
            let p = &model.params()[i];
            (p.name.clone(), p.value.len(), p.trainable)
        };
        if !trainable {
            continue;
        }
        let mut g = Vec::with_capacity(len);
        for k in 0..len {
            let orig = model.params()[i].value.data()[k];
            model.params_mut()[i].value.data_mut()[k] = orig + h;
            let plus = loss_value(&inst, &model, &inst.proxies.weights, &loss)?;
            model.params_mut()[i].value.data_mut()[k] = orig - h;
            let minus = loss_value(&inst, &model, &inst.proxies.weights, &loss)?;
            model.params_mut()[i].value.data_mut()[k] = orig;
            g.push((plus - minus) / (2.0 * h));
        }
        numeric.entry(group_name(&name)).or_default().extend(g);
    }
    let mut w = inst.proxies.weights.clone();
    let mut g = Vec::with_capacity(w.value.len());
    for k in 0..w.value.len() {
        let orig = w.value.data()[k];
        w.value.data_mut()[k] = orig + h;
        let plus = loss_value(&inst, &inst.model, &w, &loss)?;
        w.value.data_mut()[k] = orig - h;
        let minus = loss_value(&inst, &inst.model, &w, &loss)?;
        w.value.data_mut()[k] = orig;
        g.push((plus - minus) / (2.0 * h));
    }
    numeric.entry(PROXY_GROUP).or_default().extend(g);

    let mut out = BTreeMap::new();
    for (group, a) in analytic {
        let n = numeric.remove(group).unwrap_or_default();
        let len = a.len();
        let err = relative_error(&DenseTensor::vector(a), &DenseTensor::vector(n));
        out.insert(group.to_string(), (len, err));
    }
    Ok(out)
}

/// Runs the model-level finite-difference suite on every configured seed.
/// `corrupt` names a group whose analytic gradient is deliberately perturbed.
pub fn run_grad_check(cfg: &GradCheckConfig, corrupt: Option<&str>) -> Result<GradCheckReport> {
    cfg.validate()?;
    if let Some(g) = corrupt {
        if g != PROXY_GROUP && !GROUPS.contains(&g) {
            return Err(MixerError::UnknownGroup(g.to_string()));
        }
    }
    let mut worst: BTreeMap<String, (usize, f64)> = BTreeMap::new();
    for &seed in &cfg.seeds {
        for (group, (len, err)) in check_instance(cfg, seed, corrupt)? {
            let e = worst.entry(group).or_insert((len, 0.0));
            if !(err <= e.1) {
                e.1 = err;
            }
        }
    }
    let order = GROUPS.iter().copied().chain([PROXY_GROUP]);
    let groups = order
        .filter_map(|g| {
            worst.get(g).map(|&(parameters, max_rel_err)| GroupCheck {
                group: g.to_string(),
                parameters,
                max_rel_err,
                passed: max_rel_err <= cfg.tolerance,
            })
        })
        .collect();
    Ok(GradCheckReport {
        step: cfg.step,
        tolerance: cfg.tolerance,
        seeds: cfg.seeds.clone(),
        groups,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> GradCheckConfig {
        GradCheckConfig {
            seeds: vec![0, 1],
            ..GradCheckConfig::default()
        }
    }

    #[test]
    fn every_group_passes() {
        let r = run_grad_check(&quick(), None).unwrap();
        let names: Vec<&str> = r.groups.iter().map(|g| g.group.as_str()).collect();
        assert_eq!(names, ["backbone", "text", "fusion", "query_transform", "doc_transform", "proxies"]);
        for g in &r.groups {
            assert!(g.passed, "{} rel err {}", g.group, g.max_rel_err);
        }
    }

    #[test]
    fn corruption_is_detected_in_that_group_only() {
        let r = run_grad_check(&quick(), Some("fusion")).unwrap();
        for g in &r.groups {
            assert_eq!(g.passed, g.group != "fusion", "{g:?}");
        }
        assert!(run_grad_check(&quick(), Some("decoder")).is_err());
    }

    #[test]
    fn repeated_runs_agree_exactly() {
        let cfg = GradCheckConfig {
            seeds: vec![3],
            ..GradCheckConfig::default()
        };
        assert_eq!(run_grad_check(&cfg, None).unwrap(), run_grad_check(&cfg, None).unwrap());
    }
}
