//! Exact cosine retrieval over doc embeddings and the ranking metrics:
//! Identical@k, Relevance@k, MAP and MRR. Also the experiment harness used
//! for the variant ablation and the samples-per-ID study.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::data_org::{GroundTruth, Sample, SampleKind};
use crate::error::{MixerError, Result};
use crate::model::{MixerModel, ModelConfig, Variant};
use crate::numerics::{dot, DenseTensor};
use crate::proxy_loss::NORM_TOLERANCE;
use crate::training::{run_curriculum, Datasets, TrainConfig, TrainState, TrainingSet};

/// Unit-norm doc embeddings with their ids.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    ids: Vec<u64>,
    matrix: DenseTensor,
}

impl EmbeddingIndex {
    pub fn new(ids: Vec<u64>, matrix: DenseTensor) -> Result<Self> {
        if ids.is_empty() {
            return Err(MixerError::EmptyIndex);
        }
        if matrix.shape().len() != 2 || matrix.rows() != ids.len() {
            return Err(MixerError::shape("EmbeddingIndex", matrix.shape(), &[ids.len()]));
        }
        if ids.iter().collect::<BTreeSet<_>>().len() != ids.len() {
            return Err(MixerError::InvalidParams("duplicate doc ids in index".into()));
        }
        for i in 0..matrix.rows() {
            let n = matrix.row(i).iter().map(|x| x * x).sum::<f64>().sqrt();
            if (n - 1.0).abs() > NORM_TOLERANCE {
                return Err(MixerError::Unnormalized { row: i, norm: n });
            }
        }
        Ok(EmbeddingIndex { ids, matrix })
    }

    /// Embeds every doc with the model's doc tower.
    pub fn from_model(model: &MixerModel, docs: &[&Sample]) -> Result<Self> {
        if docs.is_empty() {
            return Err(MixerError::EmptyIndex);
        }
        let raws: Vec<&[f64]> = docs.iter().map(|s| s.raw.as_slice()).collect();
        let tokens: Vec<Vec<usize>> = docs.iter().map(|s| s.tokens.clone()).collect();
        let m = model.embed_docs(&raws, &tokens)?;
        EmbeddingIndex::new(docs.iter().map(|s| s.id).collect(), m)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }
}

/// Exact top-k by dot product, descending, ties by ascending doc id.
pub fn search_topk(q: &[f64], index: &EmbeddingIndex, k: usize) -> Result<Vec<(u64, f64)>> {
    search_among(q, index, k, None)
}

fn search_among(q: &[f64], index: &EmbeddingIndex, k: usize, allowed: Option<&BTreeSet<u64>>) -> Result<Vec<(u64, f64)>> {
    if index.is_empty() {
        return Err(MixerError::EmptyIndex);
    }
    if q.len() != index.dim() {
        return Err(MixerError::shape("search_topk", &[q.len()], &[index.dim()]));
    }
    if k > index.len() {
        return Err(MixerError::InvalidParams(format!("k = {k} exceeds index size {}", index.len())));
    }
    let mut scored: Vec<(u64, f64)> = index
        .ids
        .iter()
        .enumerate()
        .filter(|(_, id)| allowed.is_none_or(|a| a.contains(id)))
        .map(|(i, &id)| (id, dot(index.matrix.row(i), q)))
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored.truncate(k);
    Ok(scored)
}

/// Per-query ground truth.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Judgment {
    pub query_id: u64,
    pub identical: Vec<u64>,
    pub relevant: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidates: Option<Vec<u64>>,
}

impl Judgment {
    pub fn validate(&self) -> Result<()> {
        let rel: BTreeSet<u64> = self.relevant.iter().copied().collect();
        if let Some(d) = self.identical.iter().find(|d| !rel.contains(d)) {
            return Err(MixerError::InvalidParams(format!(
                "query {}: identical doc {d} is not listed as relevant",
                self.query_id
            )));
        }
        Ok(())
    }
}

pub type Judgments = BTreeMap<u64, Judgment>;

/// Query id → ranked doc ids (best first).
pub type Rankings = BTreeMap<u64, Vec<u64>>;

fn judgment<'a>(judgments: &'a Judgments, q: u64) -> Result<&'a Judgment> {
    judgments.get(&q).ok_or(MixerError::MissingJudgment(q))
}

fn first_hit(ranked: &[u64], positives: &[u64]) -> Option<usize> {
    let set: BTreeSet<u64> = positives.iter().copied().collect();
    ranked.iter().position(|d| set.contains(d)).map(|p| p + 1)
}

fn hit_rate(rankings: &Rankings, judgments: &Judgments, k: usize, relevant: bool) -> Result<f64> {
    if rankings.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for (&q, ranked) in rankings {
        let j = judgment(judgments, q)?;
        let positives = if relevant { &j.relevant } else { &j.identical };
        if first_hit(ranked, positives).is_some_and(|r| r <= k) {
            hits += 1;
        }
    }
    Ok(hits as f64 / rankings.len() as f64)
}

/// Share of queries with an identical doc in the top `k`.
pub fn identical_at_k(rankings: &Rankings, judgments: &Judgments, k: usize) -> Result<f64> {
    hit_rate(rankings, judgments, k, false)
}

/// Share of queries with a relevant doc in the top `k`.
pub fn relevance_at_k(rankings: &Rankings, judgments: &Judgments, k: usize) -> Result<f64> {
    hit_rate(rankings, judgments, k, true)
}

/// Mean of `1 / rank` of the first identical doc (0 when absent).
pub fn mrr(rankings: &Rankings, judgments: &Judgments) -> Result<f64> {
    if rankings.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (&q, ranked) in rankings {
        let j = judgment(judgments, q)?;
        if let Some(r) = first_hit(ranked, &j.identical) {
            total += 1.0 / r as f64;
        }
    }
    Ok(total / rankings.len() as f64)
}

/// Average precision of one ranking; `None` when no positive is among the candidates.
pub fn average_precision(ranked: &[u64], positives: &BTreeSet<u64>) -> Option<f64> {
    let r = ranked.iter().filter(|d| positives.contains(d)).count();
    if r == 0 {
        return None;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, d) in ranked.iter().enumerate() {
        if positives.contains(d) {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Some(sum / r as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapResult {
    pub value: f64,
    /// Queries skipped because none of their positives was a candidate.
    pub excluded: usize,
}

/// MAP over the identical (correct) docs of each query. Each ranking is
/// taken to be the query's full candidate list.
pub fn mean_average_precision(rankings: &Rankings, judgments: &Judgments) -> Result<MapResult> {
    let mut total = 0.0;
    let mut counted = 0usize;
    let mut excluded = 0usize;
    for (&q, ranked) in rankings {
        let j = judgment(judgments, q)?;
        let pos: BTreeSet<u64> = j.identical.iter().copied().collect();
        match average_precision(ranked, &pos) {
            Some(ap) => {
                total += ap;
                counted += 1;
            }
            None => excluded += 1,
        }
    }
    Ok(MapResult {
        value: if counted == 0 { 0.0 } else { total / counted as f64 },
        excluded,
    })
}

/// The fixed-key summary written to report files.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsSummary {
    pub identical_at_1: f64,
    pub identical_at_5: f64,
    pub relevance_at_1: f64,
    pub map: f64,
    pub mrr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryDetail {
    pub query_id: u64,
    pub first_identical_rank: Option<usize>,
    pub first_relevant_rank: Option<usize>,
    pub average_precision: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub summary: MetricsSummary,
    pub queries: usize,
    pub map_excluded: usize,
    pub details: Vec<QueryDetail>,
}

pub fn metrics(rankings: &Rankings, judgments: &Judgments) -> Result<MetricsReport> {
    let map = mean_average_precision(rankings, judgments)?;
    let mut details = Vec::with_capacity(rankings.len());
    for (&q, ranked) in rankings {
        let j = judgment(judgments, q)?;
        details.push(QueryDetail {
            query_id: q,
            first_identical_rank: first_hit(ranked, &j.identical),
            first_relevant_rank: first_hit(ranked, &j.relevant),
            average_precision: average_precision(ranked, &j.identical.iter().copied().collect()),
        });
    }
    Ok(MetricsReport {
        summary: MetricsSummary {
            identical_at_1: identical_at_k(rankings, judgments, 1)?,
            identical_at_5: identical_at_k(rankings, judgments, 5)?,
            relevance_at_1: relevance_at_k(rankings, judgments, 1)?,
            map: map.value,
            mrr: mrr(rankings, judgments)?,
        },
        queries: rankings.len(),
        map_excluded: map.excluded,
        details,
    })
}

/// Judgments for held-out queries against held-out docs: identical means
/// same latent product, relevant means same relevance family.
pub fn judgments_from_truth(queries: &[&Sample], docs: &[&Sample], truth: &GroundTruth) -> Result<Judgments> {
    let mut by_product: BTreeMap<u64, Vec<u64>> = BTreeMap::new();
    let mut by_family: BTreeMap<u64, Vec<u64>> = BTreeMap::new();
    for d in docs {
        by_product.entry(truth.product(d.id)?).or_default().push(d.id);
        by_family.entry(truth.family(d.id)?).or_default().push(d.id);
    }
    let mut out = Judgments::new();
    for q in queries {
        let p = truth.product(q.id)?;
        let f = truth.family(q.id)?;
        out.insert(
            q.id,
            Judgment {
                query_id: q.id,
                identical: by_product.get(&p).cloned().unwrap_or_default(),
                relevant: by_family.get(&f).cloned().unwrap_or_default(),
                candidates: None,
            },
        );
    }
    Ok(out)
}

/// Ranks every doc for every judged query, honoring per-query candidate lists.
pub fn rank_all(model: &MixerModel, queries: &[&Sample], index: &EmbeddingIndex, judgments: &Judgments) -> Result<Rankings> {
    if queries.is_empty() {
        return Ok(Rankings::new());
    }
    let raws: Vec<&[f64]> = queries.iter().map(|s| s.raw.as_slice()).collect();
    let z = model.embed_queries(&raws)?;
    let mut out = Rankings::new();
    for (i, q) in queries.iter().enumerate() {
        let j = judgment(judgments, q.id)?;
        let ranked = match &j.candidates {
            Some(c) => {
                let allowed: BTreeSet<u64> = c.iter().copied().collect();
                let k = index.ids.iter().filter(|d| allowed.contains(d)).count();
                search_among(z.row(i), index, k, Some(&allowed))?
            }
            None => search_topk(z.row(i), index, index.len())?,
        };
        out.insert(q.id, ranked.into_iter().map(|(d, _)| d).collect());
    }
    Ok(out)
}

/// Embeds docs and queries, ranks, and scores.
pub fn evaluate(model: &MixerModel, samples: &[Sample], judgments: &Judgments) -> Result<MetricsReport> {
    let docs: Vec<&Sample> = samples.iter().filter(|s| s.kind == SampleKind::Doc).collect();
    let queries: Vec<&Sample> = samples.iter().filter(|s| s.kind == SampleKind::Query).collect();
    let index = EmbeddingIndex::from_model(model, &docs)?;
    let rankings = rank_all(model, &queries, &index, judgments)?;
    metrics(&rankings, judgments)
}

/// A dataset ready for training and held-out evaluation.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub train: TrainingSet,
    pub test_samples: Vec<Sample>,
    pub judgments: Judgments,
}

impl Experiment {
    pub fn new(train: Vec<Sample>, test_samples: Vec<Sample>, truth: &GroundTruth) -> Result<Self> {
        let q: Vec<&Sample> = test_samples.iter().filter(|s| s.kind == SampleKind::Query).collect();
        let d: Vec<&Sample> = test_samples.iter().filter(|s| s.kind == SampleKind::Doc).collect();
        let judgments = judgments_from_truth(&q, &d, truth)?;
        Ok(Experiment {
            train: TrainingSet::new(train)?,
            test_samples,
            judgments,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub summary: MetricsSummary,
    pub final_hash: String,
}

/// Trains a fresh model under `train_cfg` and scores it on the held-out split.
pub fn train_and_evaluate(
    exp: &Experiment,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    seed: u64,
) -> Result<(TrainState, RunResult)> {
    let model = MixerModel::new(model_cfg.clone(), seed)?;
    let mut state = TrainState::new(model, train_cfg.clone(), seed)?;
    let data = Datasets::from_large(exp.train.clone(), train_cfg.medium_fraction, seed)?;
    let report = run_curriculum(&mut state, &data, &mut |_| {}, &mut |_, _| Ok(()))?;
    let m = evaluate(&state.model, &exp.test_samples, &exp.judgments)?;
    Ok((
        state,
        RunResult {
            seed,
            summary: m.summary,
            final_hash: report.final_hash,
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    pub variant: Variant,
    pub runs: Vec<RunResult>,
    pub mean: MetricsSummary,
}

pub fn mean_summary(runs: &[RunResult]) -> MetricsSummary {
    let n = runs.len().max(1) as f64;
    let avg = |f: fn(&MetricsSummary) -> f64| runs.iter().map(|r| f(&r.summary)).sum::<f64>() / n;
    MetricsSummary {
        identical_at_1: avg(|s| s.identical_at_1),
        identical_at_5: avg(|s| s.identical_at_5),
        relevance_at_1: avg(|s| s.relevance_at_1),
        map: avg(|s| s.map),
        mrr: avg(|s| s.mrr),
    }
}

/// Trains every variant on the same data and seeds under identical budgets.
pub fn run_ablation(
    exp: &Experiment,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    variants: &[Variant],
    seeds: &[u64],
) -> Result<Vec<VariantResult>> {
    variants
        .iter()
        .map(|&variant| {
            let cfg = ModelConfig {
                variant,
                ..model_cfg.clone()
            };
            let runs = seeds
                .iter()
                .map(|&s| train_and_evaluate(exp, &cfg, train_cfg, s).map(|(_, r)| r))
                .collect::<Result<Vec<_>>>()?;
            Ok(VariantResult {
                variant,
                mean: mean_summary(&runs),
                runs,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipResult {
    pub max_per_id: usize,
    pub runs: Vec<RunResult>,
    pub mean: MetricsSummary,
}

/// Retrains with training samples per ID capped at each of `caps`.
pub fn samples_per_id_study(
    exp: &Experiment,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    caps: &[usize],
    seeds: &[u64],
) -> Result<Vec<ClipResult>> {
    caps.iter()
        .map(|&cap| {
            let runs = seeds
                .iter()
                .map(|&s| {
                    let clipped = Experiment {
                        train: exp.train.clip_per_category(cap, s)?,
                        ..exp.clone()
                    };
                    train_and_evaluate(&clipped, model_cfg, train_cfg, s).map(|(_, r)| r)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(ClipResult {
                max_per_id: cap,
                mean: mean_summary(&runs),
                runs,
            })
        })
        .collect()
}
