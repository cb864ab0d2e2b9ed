//! Line-delimited JSON dataset files and small JSON sidecars.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::data_org::{ClickLog, ClickRecord, GroundTruth, OrganizationReport, Sample};
use crate::error::{MixerError, Result};
use crate::retrieval_eval::{Judgment, Judgments};

pub const SAMPLES_FILE: &str = "samples.jsonl";
pub const TEST_SAMPLES_FILE: &str = "test_samples.jsonl";
pub const CLICKS_FILE: &str = "clicks.jsonl";
pub const TRUTH_FILE: &str = "ground_truth.json";
pub const JUDGMENTS_FILE: &str = "judgments.jsonl";
pub const ORGANIZATION_FILE: &str = "organization.json";

fn format_err(path: &Path, message: impl ToString) -> MixerError {
    MixerError::Format {
        path: path.display().to_string(),
        message: message.to_string(),
    }
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item).map_err(|e| format_err(path, e))?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| format_err(path, format!("line {}: {e}", n + 1)))?);
    }
    Ok(out)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| format_err(path, e))?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let r = BufReader::new(File::open(path)?);
    serde_json::from_reader(r).map_err(|e| format_err(path, e))
}

/// Everything `gen-data` writes and `train`/`eval` read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetFiles {
    pub samples: Vec<Sample>,
    pub test_samples: Vec<Sample>,
    pub clicks: ClickLog,
    pub truth: GroundTruth,
    pub judgments: Judgments,
    pub organization: OrganizationReport,
}

pub fn path_in(dir: &Path, file: &str) -> PathBuf {
    dir.join(file)
}

impl DatasetFiles {
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        write_jsonl(&dir.join(SAMPLES_FILE), &self.samples)?;
        write_jsonl(&dir.join(TEST_SAMPLES_FILE), &self.test_samples)?;
        write_jsonl(&dir.join(CLICKS_FILE), &self.clicks.records)?;
        write_json(&dir.join(TRUTH_FILE), &self.truth)?;
        let judgments: Vec<&Judgment> = self.judgments.values().collect();
        write_jsonl(&dir.join(JUDGMENTS_FILE), &judgments)?;
        write_json(&dir.join(ORGANIZATION_FILE), &self.organization)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let records: Vec<ClickRecord> = read_jsonl(&dir.join(CLICKS_FILE))?;
        Ok(DatasetFiles {
            samples: read_jsonl(&dir.join(SAMPLES_FILE))?,
            test_samples: read_jsonl(&dir.join(TEST_SAMPLES_FILE))?,
            clicks: ClickLog { records },
            truth: read_json(&dir.join(TRUTH_FILE))?,
            judgments: read_judgments(&dir.join(JUDGMENTS_FILE))?,
            organization: read_json(&dir.join(ORGANIZATION_FILE))?,
        })
    }
}

pub fn read_judgments(path: &Path) -> Result<Judgments> {
    let list: Vec<Judgment> = read_jsonl(path)?;
    let mut out = Judgments::new();
    for j in list {
        j.validate()?;
        if out.insert(j.query_id, j.clone()).is_some() {
            return Err(format_err(path, format!("duplicate judgment for query {}", j.query_id)));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_org::SampleKind;

    #[test]
    fn jsonl_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.jsonl");
        let s = vec![
            Sample {
                id: 3,
                kind: SampleKind::Doc,
                raw: vec![0.1, -2.5e-17, 3.0],
                tokens: vec![4, 1],
                category: 3,
            },
            Sample {
                id: 4,
                kind: SampleKind::Query,
                raw: vec![f64::MIN_POSITIVE, 1.0 / 3.0, 7.0],
                tokens: vec![],
                category: 3,
            },
        ];
        write_jsonl(&p, &s).unwrap();
        let back: Vec<Sample> = read_jsonl(&p).unwrap();
        assert_eq!(back, s);
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.lines().next().unwrap().contains("\"kind\":\"doc\""));
    }

    #[test]
    fn malformed_lines_are_format_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.jsonl");
        std::fs::write(&p, "{\"q\": 1, \"d\": 2, \"clicked\": true}\nnot json\n").unwrap();
        let err = read_jsonl::<ClickRecord>(&p).unwrap_err();
        assert!(matches!(err, MixerError::Format { .. }));
        assert!(read_jsonl::<ClickRecord>(&dir.path().join("missing")).unwrap_err().is_io());
    }
}
