//! Config-driven glue: synthetic data → organized categories → experiment.

use crate::config::RunConfig;
use crate::data_org::{generate_synthetic, organize, SampleKind};
use crate::error::Result;
use crate::io::DatasetFiles;
use crate::retrieval_eval::{judgments_from_truth, Experiment};
use crate::training::TrainingSet;

/// Generates the synthetic corpus, organizes training samples into
/// categories and derives held-out judgments.
pub fn build_dataset(cfg: &RunConfig) -> Result<DatasetFiles> {
    cfg.data.validate()?;
    let data = generate_synthetic(&cfg.data)?;
    let (assignment, organization) = organize(&data.samples, &data.clicks, &cfg.organize, cfg.data.seed)?;
    let mut samples = data.samples;
    assignment.apply(&mut samples);
    let q: Vec<_> = data.test_samples.iter().filter(|s| s.kind == SampleKind::Query).collect();
    let d: Vec<_> = data.test_samples.iter().filter(|s| s.kind == SampleKind::Doc).collect();
    let judgments = judgments_from_truth(&q, &d, &data.truth)?;
    Ok(DatasetFiles {
        samples,
        test_samples: data.test_samples,
        clicks: data.clicks,
        truth: data.truth,
        judgments,
        organization,
    })
}

pub fn experiment(files: &DatasetFiles) -> Result<Experiment> {
    Ok(Experiment {
        train: TrainingSet::new(files.samples.clone())?,
        test_samples: files.test_samples.clone(),
        judgments: files.judgments.clone(),
    })
}
