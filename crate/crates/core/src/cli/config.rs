//! The JSON run configuration: one document per experiment, hashed into
//! every output.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::CliError;
use crate::analyze::AnalyzeConfig;
use crate::evaltest::EvalConfig;
use crate::featurize::MelConfig;
use crate::model::ModelConfig;
use crate::stats::StatsConfig;
use crate::synthgen::DatasetConfig;
use crate::train::{PretrainConfig, TrainConfig};

/// Everything a command needs to reproduce its outputs.
///
/// The global `seed` drives training, pretraining, episode sampling,
/// analysis sampling and resampling; the `seed` fields inside those
/// sections are overwritten by it. The dataset keeps its own
/// `synthgen.seed`, so several training seeds can share one corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub synthgen: DatasetConfig,
    pub featurize: MelConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub pretrain: PretrainConfig,
    pub evaltest: EvalConfig,
    pub analyze: AnalyzeConfig,
    pub stats: StatsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("me-lab-out"),
            synthgen: DatasetConfig::default(),
            featurize: MelConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            pretrain: PretrainConfig::default(),
            evaltest: EvalConfig::default(),
            analyze: AnalyzeConfig::default(),
            stats: StatsConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses, applies the global seed and checks cross-section agreement.
    pub fn from_json(text: &str, origin: &str) -> Result<Self, CliError> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| CliError::ConfigParse {
            path: origin.to_string(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        let cfg = cfg.with_global_seed();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!(
            "cannot read config {}: {e}",
            path.display()
        )))?;
        Self::from_json(&text, &path.display().to_string())
    }

    pub fn with_global_seed(mut self) -> Self {
        self.train.seed = self.seed;
        self.pretrain.seed = self.seed;
        self.evaltest.seed = self.seed;
        self
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.model.n_mels != self.featurize.n_mels || self.model.n_frames != self.featurize.n_frames {
            return bad(format!(
                "model expects {}×{} spectrograms but featurize produces {}×{}",
                self.model.n_mels, self.model.n_frames, self.featurize.n_mels, self.featurize.n_frames
            ));
        }
        if self.model.image_size != self.synthgen.image_size {
            return bad(format!(
                "model expects {}px images but synthgen renders {}px",
                self.model.image_size, self.synthgen.image_size
            ));
        }
        self.model.validate().map_err(|e| CliError::Config(e.to_string()))?;
        self.train.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if !(self.evaltest.level > 0.0 && self.evaltest.level < 1.0) {
            return bad(format!("evaltest.level must lie in (0, 1), got {}", self.evaltest.level));
        }
        if self.evaltest.n_episodes == 0 {
            return bad("evaltest.n_episodes must be positive".into());
        }
        self.stats.validate().map_err(|e| CliError::Config(e.to_string()))?;
        if self.analyze.pairs_per_group == 0 || self.analyze.instances_per_word == 0 {
            return bad("analyze.pairs_per_group and analyze.instances_per_word must be positive".into());
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON of the config. The output directory
    /// is excluded: moving a study does not change its results.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        let text = serde_json::to_string(&c).expect("config serialises");
        Sha256::digest(text.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn data_dir(&self) -> PathBuf {
        self.output_dir.join("data")
    }

    /// `runs/<loss>-<init>-seed<seed>-<hash prefix>` under the output dir.
    pub fn run_dir(&self) -> PathBuf {
        self.output_dir.join("runs").join(format!(
            "{}-{}-seed{}-{}",
            self.train.loss.kind.name(),
            self.train.init.label(),
            self.seed,
            &self.hash()[..12]
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_default() {
        let c = RunConfig::from_json("{}", "inline").unwrap();
        assert_eq!(c, RunConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected_with_position() {
        let err = RunConfig::from_json("{\n  \"seed\": 1,\n  \"bogus\": 2\n}", "inline").unwrap_err();
        match err {
            CliError::ConfigParse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        let err = RunConfig::from_json("{\"train\": {\"lr\": 1}}", "inline").unwrap_err();
        assert!(matches!(err, CliError::ConfigParse { .. }));
    }

    #[test]
    fn global_seed_propagates_but_not_into_the_dataset() {
        let c = RunConfig::from_json("{\"seed\": 7, \"synthgen\": {\"seed\": 3}}", "inline").unwrap();
        assert_eq!((c.train.seed, c.pretrain.seed, c.evaltest.seed), (7, 7, 7));
        assert_eq!(c.synthgen.seed, 3);
    }

    #[test]
    fn hash_ignores_output_dir_but_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.output_dir = PathBuf::from("/elsewhere");
        assert_eq!(a.hash(), b.hash());
        b.seed = 1;
        assert_ne!(a.hash(), b.with_global_seed().hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn inconsistent_sections_are_config_errors() {
        let err = RunConfig::from_json("{\"model\": {\"image_size\": 32}}", "inline").unwrap_err();
        assert!(matches!(err, CliError::Config(_)));
    }
}
