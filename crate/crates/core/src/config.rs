//! Run configuration: one TOML file holds every knob of a run.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data_org::{OrganizeConfig, SyntheticSpec};
use crate::error::{MixerError, Result};
use crate::grad_report::GradCheckConfig;
use crate::model::{ModelConfig, Variant};
use crate::training::TrainConfig;

/// File name of the resolved config written beside every output.
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudyConfig {
    /// Training seeds for ablation and clipping studies.
    pub seeds: Vec<u64>,
    pub variants: Vec<Variant>,
    /// Caps on training samples per category for the clipping study.
    pub clip_caps: Vec<usize>,
}

impl Default for StudyConfig {
    fn default() -> Self {
        StudyConfig {
            seeds: (0..5).collect(),
            variants: Variant::all().to_vec(),
            clip_caps: vec![2, 5, 10],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seed for model initialization and batch order.
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: SyntheticSpec,
    pub organize: OrganizeConfig,
    pub study: StudyConfig,
    pub grad_check: GradCheckConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| MixerError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Every field, defaults filled in.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config always serializes")
    }

    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join(RESOLVED_CONFIG_FILE), self.to_toml())?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.validate()?;
        self.grad_check.validate()?;
        let m = &self.model;
        let d = &self.data;
        if d.n_raw != m.n_raw {
            return Err(MixerError::Config(format!(
                "data.n_raw ({}) differs from model.n_raw ({})",
                d.n_raw, m.n_raw
            )));
        }
        if d.positions != m.h2 {
            return Err(MixerError::Config(format!(
                "data.positions ({}) differs from model.h2 ({})",
                d.positions, m.h2
            )));
        }
        if d.vocab_size > m.vocab {
            return Err(MixerError::Config(format!(
                "data.vocab_size ({}) exceeds model.vocab ({})",
                d.vocab_size, m.vocab
            )));
        }
        if d.max_tokens > m.max_text_len {
            return Err(MixerError::Config(format!(
                "data.max_tokens ({}) exceeds model.max_text_len ({})",
                d.max_tokens, m.max_text_len
            )));
        }
        if self.study.seeds.is_empty() {
            return Err(MixerError::Config("study.seeds must be non-empty".into()));
        }
        if self.study.clip_caps.contains(&0) {
            return Err(MixerError::Config("study.clip_caps must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_org::DocLayout;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn resolved_echo_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.data.doc_layout = DocLayout::Distractors;
        cfg.train.plan.truncate(1);
        let text = cfg.to_toml();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
        assert!(text.contains("[[train.plan]]"));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("seeed = 3").is_err());
        assert!(RunConfig::from_toml("[model]\nwidth = 3").is_err());
        assert!(RunConfig::from_toml("[train.loss]\nscale = 30.0\nmargn = 0.2").is_err());
    }

    #[test]
    fn cross_field_mismatches_are_rejected() {
        let err = RunConfig::from_toml("[data]\nn_raw = 32").unwrap_err();
        assert!(err.to_string().contains("n_raw"), "{err}");
        assert!(RunConfig::from_toml("[model]\nvocab = 100").is_err());
        assert!(RunConfig::from_toml("[data]\npositions = 2").is_err());
        assert!(RunConfig::from_toml(
            "[[train.plan]]\nname = \"B\"\ndataset = \"large\"\niterations = 3\nfrozen = [\"text\"]"
        )
        .is_err());
    }

    #[test]
    fn partial_sections_keep_other_defaults() {
        let cfg = RunConfig::from_toml("[train.loss]\nscale = 30.0\n[study]\nvariants = [\"mixer\", \"mixer-i\"]").unwrap();
        assert_eq!(cfg.train.loss.scale, 30.0);
        assert_eq!(cfg.train.loss.margin, 0.5);
        assert_eq!(cfg.study.variants, [Variant::Mixer, Variant::ImageOnly]);
        assert_eq!(cfg.study.clip_caps, [2, 5, 10]);
    }
}
