use std::path::Path;

use mixer_core::checkpoint::Checkpoint;
use mixer_core::config::RunConfig;
use mixer_core::data_org::Sample;
use mixer_core::grad_report::run_grad_check;
use mixer_core::io::{read_judgments, read_jsonl, write_json, write_jsonl, JUDGMENTS_FILE, SAMPLES_FILE, TEST_SAMPLES_FILE};
use mixer_core::model::{MixerModel, ModelConfig};
use mixer_core::pipeline::{build_dataset, experiment};
use mixer_core::retrieval_eval::{evaluate, run_ablation, samples_per_id_study, MetricsSummary};
use mixer_core::training::{run_plan, Datasets, PhaseName, StepLog, TrainState, TrainingSet};
use mixer_core::MixerError;
use thiserror::Error;

pub const METRICS_FILE: &str = "metrics.json";
pub const EVAL_DETAILS_FILE: &str = "eval_details.json";
pub const TRAIN_LOG_FILE: &str = "train_log.jsonl";
pub const TRAIN_REPORT_FILE: &str = "train_report.json";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const ABLATION_FILE: &str = "ablation.json";
pub const SAMPLES_PER_ID_FILE: &str = "samples_per_id.json";
pub const GRAD_CHECK_FILE: &str = "grad_check.json";

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] MixerError),
    #[error("{0}")]
    Validation(String),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if e.is_io() => 2,
            _ => 1,
        }
    }
}

fn check_samples(samples: &[Sample], model: &ModelConfig, what: &str) -> Result<(), CliError> {
    for s in samples {
        s.validate(model.n_raw, model.max_text_len)
            .map_err(|e| CliError::Validation(format!("{what}: sample {}: {e}", s.id)))?;
        if let Some(t) = s.tokens.iter().find(|&&t| t >= model.vocab) {
            return Err(CliError::Validation(format!(
                "{what}: sample {} has token {t} outside the model vocabulary of {}",
                s.id, model.vocab
            )));
        }
    }
    Ok(())
}

fn phase_file(name: PhaseName) -> String {
    format!("phase_{}.ckpt", format!("{name:?}").to_lowercase())
}

fn print_summary(label: &str, s: &MetricsSummary) {
    println!(
        "{label:<12} identical@1 {:.4}  identical@5 {:.4}  relevance@1 {:.4}  map {:.4}  mrr {:.4}",
        s.identical_at_1, s.identical_at_5, s.relevance_at_1, s.map, s.mrr
    );
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let files = build_dataset(cfg)?;
    files.save(out)?;
    cfg.write_resolved(out)?;
    let o = &files.organization;
    println!("samples        {}", o.samples);
    println!("initial ids    {}", o.initial_ids);
    if let Some(n) = o.after_clicks {
        println!("after clicks   {n}");
    }
    if let Some(n) = o.after_clustering {
        println!("after clusters {n}");
    }
    println!("final ids      {}", o.final_ids);
    println!("test samples   {}", files.test_samples.len());
    Ok(())
}

pub fn train(cfg: &RunConfig, data: &Path, out: &Path, resume: Option<&Path>) -> Result<(), CliError> {
    let samples: Vec<Sample> = read_jsonl(&data.join(SAMPLES_FILE))?;
    check_samples(&samples, &cfg.model, "training data")?;

    let (mut state, done) = match resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.header.model != cfg.model {
                return Err(CliError::Validation(
                    "checkpoint model dimensions differ from the run config".into(),
                ));
            }
            if ck.header.seed != cfg.seed {
                return Err(CliError::Validation(format!(
                    "checkpoint was trained with seed {} but the config has seed {}",
                    ck.header.seed, cfg.seed
                )));
            }
            let done = ck.header.phases_done;
            if done > cfg.train.plan.len() {
                return Err(CliError::Validation(format!(
                    "checkpoint has {done} completed phases but the plan has {}",
                    cfg.train.plan.len()
                )));
            }
            (ck.into_state(cfg.train.clone())?, done)
        }
        None => (
            TrainState::new(MixerModel::new(cfg.model.clone(), cfg.seed)?, cfg.train.clone(), cfg.seed)?,
            0,
        ),
    };

    let sets = Datasets::from_large(TrainingSet::new(samples)?, cfg.train.medium_fraction, cfg.seed)?;
    let ck_dir = out.join("checkpoints");
    std::fs::create_dir_all(&ck_dir)?;
    cfg.write_resolved(out)?;

    let log_every = cfg.train.log_every;
    let mut log: Vec<StepLog> = Vec::new();
    let mut on_step = |l: &StepLog| {
        if l.iter % log_every == 0 {
            log.push(l.clone());
        }
    };
    let mut finished = done;
    let mut after_phase = |s: &TrainState, r: &mixer_core::training::PhaseReport| -> mixer_core::Result<()> {
        finished += 1;
        Checkpoint::from_state(s, finished).save(&ck_dir.join(phase_file(r.name)))?;
        let first = r.losses.first().map_or(f64::NAN, |l| l.1);
        let last = r.losses.last().map_or(f64::NAN, |l| l.1);
        println!(
            "phase {:?}: {} iterations{}, loss {first:.4} -> {last:.4}, logits {} of {}",
            r.name,
            r.iterations_run,
            if r.stopped_on_plateau { " (plateau)" } else { "" },
            r.counters.dot_products,
            r.full_dot_products
        );
        Ok(())
    };
    let report = run_plan(&mut state, &cfg.train.plan[done..], &sets, &mut on_step, &mut after_phase)?;
    Checkpoint::from_state(&state, cfg.train.plan.len()).save(&out.join(FINAL_CHECKPOINT))?;
    write_jsonl(&out.join(TRAIN_LOG_FILE), &log)?;
    write_json(&out.join(TRAIN_REPORT_FILE), &report)?;
    println!("final hash {}", report.final_hash);
    Ok(())
}

pub fn eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    data: &Path,
    judgments: Option<&Path>,
    out: &Path,
) -> Result<(), CliError> {
    let ck = Checkpoint::load(checkpoint)?;
    let test: Vec<Sample> = read_jsonl(&data.join(TEST_SAMPLES_FILE))?;
    check_samples(&test, &ck.header.model, "test data")?;
    let judgments_path = judgments.map_or_else(|| data.join(JUDGMENTS_FILE), Path::to_path_buf);
    let judgments = read_judgments(&judgments_path)?;
    let report = evaluate(&ck.model, &test, &judgments)?;
    std::fs::create_dir_all(out)?;
    cfg.write_resolved(out)?;
    write_json(&out.join(METRICS_FILE), &report.summary)?;
    write_json(&out.join(EVAL_DETAILS_FILE), &report)?;
    print_summary("held-out", &report.summary);
    if report.map_excluded > 0 {
        println!("map skipped {} queries without identical docs", report.map_excluded);
    }
    Ok(())
}

pub fn ablate(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let files = build_dataset(cfg)?;
    let exp = experiment(&files)?;
    std::fs::create_dir_all(out)?;
    cfg.write_resolved(out)?;
    write_json(&out.join("organization.json"), &files.organization)?;
    if !cfg.study.variants.is_empty() {
        let results = run_ablation(&exp, &cfg.model, &cfg.train, &cfg.study.variants, &cfg.study.seeds)?;
        for r in &results {
            print_summary(r.variant.label(), &r.mean);
        }
        write_json(&out.join(ABLATION_FILE), &results)?;
    }
    if !cfg.study.clip_caps.is_empty() {
        let results = samples_per_id_study(&exp, &cfg.model, &cfg.train, &cfg.study.clip_caps, &cfg.study.seeds)?;
        for r in &results {
            print_summary(&format!("cap {}", r.max_per_id), &r.mean);
        }
        write_json(&out.join(SAMPLES_PER_ID_FILE), &results)?;
    }
    Ok(())
}

pub fn grad_check(cfg: &RunConfig, out: Option<&Path>, corrupt: Option<&str>) -> Result<(), CliError> {
    let report = run_grad_check(&cfg.grad_check, corrupt)?;
    for g in &report.groups {
        println!(
            "{:<16} {:>6} params  max rel err {:.3e}  {}",
            g.group,
            g.parameters,
            g.max_rel_err,
            if g.passed { "pass" } else { "FAIL" }
        );
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        cfg.write_resolved(dir)?;
        write_json(&dir.join(GRAD_CHECK_FILE), &report)?;
    }
    if !report.passed() {
        let failed: Vec<&str> = report
            .groups
            .iter()
            .filter(|g| !g.passed)
            .map(|g| g.group.as_str())
            .collect();
        return Err(CliError::Validation(format!(
            "gradient check failed for {} at tolerance {:e}",
            failed.join(", "),
            report.tolerance
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use mixer_core::data_org::SampleKind;

    #[test]
    fn io_errors_map_to_two_and_the_rest_to_one() {
        let io: CliError = std::io::Error::new(std::io::ErrorKind::NotFound, "gone").into();
        assert_eq!(io.exit_code(), 2);
        assert_eq!(CliError::Validation("bad".into()).exit_code(), 1);
        assert_eq!(CliError::Core(MixerError::Config("bad".into())).exit_code(), 1);
    }

    #[test]
    fn samples_outside_the_model_are_rejected() {
        let model = ModelConfig::default();
        let mut s = Sample {
            id: 4,
            kind: SampleKind::Doc,
            raw: vec![0.0; model.n_raw],
            tokens: vec![1, 2],
            category: 4,
        };
        assert!(check_samples(std::slice::from_ref(&s), &model, "x").is_ok());
        s.tokens.push(model.vocab);
        assert!(check_samples(std::slice::from_ref(&s), &model, "x").is_err());
        s.tokens.pop();
        s.raw.pop();
        assert!(check_samples(&[s], &model, "x").is_err());
    }

    #[test]
    fn phase_files_are_lowercase() {
        assert_eq!(phase_file(PhaseName::B), "phase_b.ckpt");
    }
}
