//! Plain-Rust helpers behind the Python surface.

use std::collections::HashMap;

use mixer_core::config::RunConfig;
use mixer_core::data_org::{Sample, SampleKind};
use mixer_core::io::DatasetFiles;
use mixer_core::model::MixerModel;
use mixer_core::numerics::DenseTensor;
use mixer_core::proxy_loss::{margin_loss_value, LossConfig, ProxyStore};
use mixer_core::retrieval_eval::MetricsSummary;
use mixer_core::training::{run_curriculum, Datasets, TrainState, TrainingSet};
use mixer_core::{MixerError, Result};

/// Stacks equal-length rows into a matrix.
pub fn to_tensor(rows: &[Vec<f64>]) -> Result<DenseTensor> {
    let cols = rows.first().map_or(0, Vec::len);
    if let Some(r) = rows.iter().find(|r| r.len() != cols) {
        return Err(MixerError::shape("rows", &[r.len()], &[cols]));
    }
    DenseTensor::matrix(rows.len(), cols, rows.concat())
}

pub fn to_rows(t: &DenseTensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

pub fn queries_of(samples: &[Sample]) -> Vec<Vec<f64>> {
    samples
        .iter()
        .filter(|s| s.kind == SampleKind::Query)
        .map(|s| s.raw.clone())
        .collect()
}

pub fn docs_of(samples: &[Sample]) -> (Vec<Vec<f64>>, Vec<Vec<usize>>) {
    samples
        .iter()
        .filter(|s| s.kind == SampleKind::Doc)
        .map(|s| (s.raw.clone(), s.tokens.clone()))
        .unzip()
}

pub fn summary_map(s: &MetricsSummary) -> HashMap<String, f64> {
    HashMap::from([
        ("identical_at_1".to_string(), s.identical_at_1),
        ("identical_at_5".to_string(), s.identical_at_5),
        ("relevance_at_1".to_string(), s.relevance_at_1),
        ("map".to_string(), s.map),
        ("mrr".to_string(), s.mrr),
    ])
}

/// Full-softmax margin loss on one shard.
pub fn full_margin_loss(z: &[Vec<f64>], w: &[Vec<f64>], labels: &[usize], scale: f64, margin: f64) -> Result<f64> {
    let cfg = LossConfig {
        scale,
        margin,
        knn_enabled: false,
        shards: 1,
        ..LossConfig::default()
    };
    cfg.validate()?;
    let store = ProxyStore::from_rows(to_tensor(w)?, 1)?;
    Ok(margin_loss_value(&to_tensor(z)?, labels, &store, &cfg, None)?.0)
}

/// Trains from scratch under `cfg` and returns the state with its final hash.
pub fn train_model(cfg: &RunConfig, files: &DatasetFiles) -> Result<(TrainState, String)> {
    let model = MixerModel::new(cfg.model.clone(), cfg.seed)?;
    let mut state = TrainState::new(model, cfg.train.clone(), cfg.seed)?;
    let data = Datasets::from_large(TrainingSet::new(files.samples.clone())?, cfg.train.medium_fraction, cfg.seed)?;
    let report = run_curriculum(&mut state, &data, &mut |_| {}, &mut |_, _| Ok(()))?;
    Ok((state, report.final_hash))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_round_trip() {
        let rows = vec![vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]];
        let t = to_tensor(&rows).unwrap();
        assert_eq!(t.shape(), [3, 2]);
        assert_eq!(to_rows(&t), rows);
    }

    #[test]
    fn ragged_rows_are_rejected() {
        assert!(to_tensor(&[vec![1.0, 2.0], vec![3.0]]).is_err());
    }

    #[test]
    fn hand_loss() {
        let l = full_margin_loss(&[vec![1.0, 0.0]], &[vec![1.0, 0.0], vec![0.0, 1.0]], &[0], 2.0, 0.5).unwrap();
        assert!((l - (1.0 + (-2.0 * 0.5f64.cos()).exp()).ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_rejects_bad_margin_and_labels() {
        let w = [vec![1.0, 0.0], vec![0.0, 1.0]];
        assert!(full_margin_loss(&[vec![1.0, 0.0]], &w, &[0], 2.0, 2.0).is_err());
        assert!(full_margin_loss(&[vec![1.0, 0.0]], &w, &[2], 2.0, 0.5).is_err());
    }

    #[test]
    fn summary_has_five_keys() {
        let s = MetricsSummary {
            identical_at_1: 0.5,
            identical_at_5: 1.0,
            relevance_at_1: 0.75,
            map: 0.6,
            mrr: 0.7,
        };
        let m = summary_map(&s);
        assert_eq!(m.len(), 5);
        assert_eq!(m["relevance_at_1"], 0.75);
    }
}
