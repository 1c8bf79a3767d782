//! The pipeline configuration file.
//!
//! A TOML document with one section per stage. Every key is optional and
//! falls back to its built-in default; unknown keys are rejected.
//!
//! ```toml
//! conditioning = "pitch-context"
//!
//! [rules]
//! tau_note = 0.5
//! p_min = 60
//!
//! [align]
//! lr = 3.0
//! optimizer = { kind = "sgd" }
//!
//! [paths]
//! corpus = "data/corpus.tsv"
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use melodyalign::align::AlignConfig;
use melodyalign::metrics::MetricsConfig;
use melodyalign::policy::{Conditioning, MleConfig};
use melodyalign::prefs::GenerationConfig;
use melodyalign::rules::RuleConfig;
use melodyalign::synth::SynthConfig;
use melodyalign::vocab::VocabConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AppConfig {
    pub conditioning: Conditioning,
    pub rules: RuleConfig,
    pub vocab: VocabConfig,
    pub synth: SynthConfig,
    pub mle: MleConfig,
    pub generation: GenerationConfig,
    pub align: AlignConfig,
    pub metrics: MetricsConfig,
    pub paths: Paths,
}

/// Default file locations, used when a verb gets no explicit path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub corpus: PathBuf,
    pub prompts: PathBuf,
    pub heldout: PathBuf,
    pub sft: PathBuf,
    pub dataset: PathBuf,
    pub aligned: PathBuf,
    pub align_log: PathBuf,
    pub check_report: PathBuf,
    pub eval_report: PathBuf,
    pub table: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            corpus: "data/corpus.tsv".into(),
            prompts: "data/prompts.txt".into(),
            heldout: "data/heldout.tsv".into(),
            sft: "models/sft.ckpt".into(),
            dataset: "data/prefs.jsonl".into(),
            aligned: "models/aligned.ckpt".into(),
            align_log: "reports/align_log.jsonl".into(),
            check_report: "reports/check.json".into(),
            eval_report: "reports/eval.json".into(),
            table: "reports/violations.csv".into(),
        }
    }
}

impl AppConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    pub fn validate(&self) -> Result<()> {
        self.rules.validate()?;
        self.vocab.validate()?;
        self.synth.validate()?;
        self.align.validate()?;
        let g = &self.generation;
        if g.k < 2 {
            bail!("generation.k must be at least 2, got {}", g.k);
        }
        if !(g.temperature > 0.0 && g.temperature.is_finite()) {
            bail!(
                "generation.temperature must be positive, got {}",
                g.temperature
            );
        }
        if g.max_len == 0 {
            bail!("generation.max_len must be at least 1");
        }
        if !(self.mle.lr >= 0.0 && self.mle.lr.is_finite()) {
            bail!("mle.lr must be non-negative, got {}", self.mle.lr);
        }
        let edges = &self.metrics.duration_edges;
        if edges.is_empty() || edges.windows(2).any(|w| w[0] >= w[1]) {
            bail!("metrics.duration_edges must be non-empty and strictly increasing");
        }
        Ok(())
    }

    /// Short hash of every setting except file locations, so moving a run
    /// to another directory keeps its digest.
    pub fn digest(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config serializes");
        value
            .as_object_mut()
            .expect("config is a table")
            .remove("paths");
        let hash = Sha256::digest(value.to_string().as_bytes());
        hex::encode(&hash[..8])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_default() {
        assert_eq!(AppConfig::from_toml("").unwrap(), AppConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(AppConfig::from_toml("colour = 1").is_err());
        assert!(AppConfig::from_toml("[rules]\ntau = 0.4").is_err());
        assert!(AppConfig::from_toml("[paths]\nbogus = \"x\"").is_err());
        assert!(AppConfig::from_toml("[align]\noptimizer = { kind = \"sgd\", lr = 1 }").is_err());
    }

    #[test]
    fn digest_ignores_paths() {
        let a = AppConfig::default();
        let mut b = a.clone();
        b.paths.corpus = "elsewhere.tsv".into();
        assert_eq!(a.digest(), b.digest());
        b.rules.p_max = 83;
        assert_ne!(a.digest(), b.digest());
    }

    #[test]
    fn validation_catches_bad_sections() {
        let mut c = AppConfig::default();
        c.generation.k = 1;
        assert!(c.validate().is_err());
        let mut c = AppConfig::default();
        c.rules.p_min = 90;
        assert!(c.validate().is_err());
        AppConfig::default().validate().unwrap();
    }
}
