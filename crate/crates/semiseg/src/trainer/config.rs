//! Declarative experiment configuration.
//!
//! Configs are TOML documents with nested sections; unknown keys anywhere are
//! errors. Defaults reproduce the full-scale training protocol (lr 0.01
//! divided by 10 every 2500 iterations, 6000 iterations, 128^3 patches,
//! 2+2 batches, SGD momentum 0.9 / weight decay 1e-4), so a config file only
//! states what an experiment changes.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Result, SegError};
use crate::network::BackboneConfig;

/// Base semi-supervised framework.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameworkBase {
    /// Labeled data only; no teacher, no consistency terms.
    Supervised,
    /// Mean teacher: EMA teacher, plain consistency.
    Mt,
    /// Uncertainty-aware mean teacher: consistency gated by entropy.
    Uamt,
}

/// Whether the oracle supervision branch is active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleMode {
    Plain,
    Semisam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub data_dir: PathBuf,
    pub m_labeled: usize,
    pub n_test: usize,
    pub split_seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            data_dir: PathBuf::from("data"),
            m_labeled: 8,
            n_test: 20,
            split_seed: 1337,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrameworkConfig {
    pub base: FrameworkBase,
    pub oracle_mode: OracleMode,
}

impl Default for FrameworkConfig {
    fn default() -> Self {
        FrameworkConfig {
            base: FrameworkBase::Mt,
            oracle_mode: OracleMode::Plain,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub t_max: u64,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    pub patch: [usize; 3],
    pub lr0: f64,
    pub lr_decay_every: u64,
    pub lr_decay_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Serialize all data and RNG consumption so runs replay bit-identically.
    pub deterministic: bool,
    pub eval_every: u64,
    /// Sample dropout on student forwards during training.
    pub student_dropout: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            t_max: 6000,
            batch_labeled: 2,
            batch_unlabeled: 2,
            patch: [128, 128, 128],
            lr0: 0.01,
            lr_decay_every: 2500,
            lr_decay_factor: 10.0,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 42,
            deterministic: true,
            eval_every: 500,
            student_dropout: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConsistencyConfig {
    /// Base weight shared by both consistency ramps.
    pub w_base: f64,
    pub noise_sigma: f64,
    pub noise_clip: f64,
    /// Perturb the teacher's input with clipped Gaussian noise.
    pub teacher_input_noise: bool,
    /// Stochastic teacher passes for uncertainty estimation (uamt).
    pub k_passes: usize,
}

impl Default for ConsistencyConfig {
    fn default() -> Self {
        ConsistencyConfig {
            w_base: 0.1,
            noise_sigma: 0.1,
            noise_clip: 0.2,
            teacher_input_noise: true,
            k_passes: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleBackendKind {
    Synthetic,
    Adapter,
    AlwaysSkip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleConfig {
    pub backend: OracleBackendKind,
    /// Positive prompt points per query.
    pub k_positive: usize,
    pub cache_capacity: usize,
    pub degradation_radius: f64,
    pub degradation_flip_rate: f64,
    pub spool_dir: Option<PathBuf>,
    pub timeout_ms: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig {
            backend: OracleBackendKind::Synthetic,
            k_positive: 1,
            cache_capacity: 64,
            degradation_radius: 1.0,
            degradation_flip_rate: 0.05,
            spool_dir: None,
            timeout_ms: 2000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: PathBuf::from("runs/out"),
        }
    }
}

/// Complete experiment description.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub framework: FrameworkConfig,
    pub backbone: BackboneConfig,
    pub training: TrainingConfig,
    pub consistency: ConsistencyConfig,
    pub oracle: OracleConfig,
    pub output: OutputConfig,
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| SegError::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| SegError::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| SegError::InvalidConfig(e.to_string()))
    }

    /// Reject contradictions before any training work starts.
    pub fn validate(&self) -> Result<()> {
        let t = &self.training;
        if t.t_max == 0 {
            return Err(SegError::InvalidConfig("t_max must be positive".into()));
        }
        if t.batch_labeled == 0 {
            return Err(SegError::InvalidConfig("batch_labeled must be positive".into()));
        }
        if self.framework.base != FrameworkBase::Supervised && t.batch_unlabeled == 0 {
            return Err(SegError::InvalidConfig(
                "batch_unlabeled must be positive for teacher frameworks".into(),
            ));
        }
        if self.framework.base == FrameworkBase::Supervised
            && self.framework.oracle_mode == OracleMode::Semisam
        {
            return Err(SegError::InvalidConfig(
                "oracle_mode = semisam requires a teacher framework (mt or uamt)".into(),
            ));
        }
        if t.eval_every == 0 {
            return Err(SegError::InvalidConfig("eval_every must be positive".into()));
        }
        if self.dataset.m_labeled == 0 {
            return Err(SegError::InvalidConfig("m_labeled must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.oracle.degradation_flip_rate) {
            return Err(SegError::InvalidConfig(
                "degradation_flip_rate must be in [0, 1]".into(),
            ));
        }
        let div = self.backbone.shape_divisor();
        if self.training.patch.iter().any(|&p| p == 0 || p % div != 0) {
            return Err(SegError::InvalidConfig(format!(
                "patch {:?} must be divisible by the backbone divisor {div}",
                self.training.patch
            )));
        }
        if self.framework.oracle_mode == OracleMode::Semisam
            && self.oracle.backend == OracleBackendKind::Adapter
            && self.oracle.spool_dir.is_none()
        {
            return Err(SegError::InvalidConfig(
                "adapter oracle backend requires oracle.spool_dir".into(),
            ));
        }
        if self.consistency.k_passes < 2 && self.framework.base == FrameworkBase::Uamt {
            return Err(SegError::InvalidConfig(
                "uamt requires consistency.k_passes >= 2".into(),
            ));
        }
        Ok(())
    }
}

/// Wrapper echoed to `run_manifest.json` at the start of every run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub format_version: u32,
    pub code_version: String,
    pub config: ExperimentConfig,
}

impl RunManifest {
    pub fn new(config: &ExperimentConfig) -> Self {
        RunManifest {
            format_version: 1,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            config: config.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_echo_the_full_scale_protocol() {
        let cfg = ExperimentConfig::default();
        assert_eq!(cfg.training.lr0, 0.01);
        assert_eq!(cfg.training.lr_decay_every, 2500);
        assert_eq!(cfg.training.lr_decay_factor, 10.0);
        assert_eq!(cfg.training.t_max, 6000);
        assert_eq!(cfg.training.patch, [128, 128, 128]);
        assert_eq!(cfg.training.momentum, 0.9);
        assert_eq!(cfg.training.weight_decay, 1e-4);
        assert_eq!(cfg.consistency.w_base, 0.1);
        assert_eq!(cfg.backbone.base_width, 16);
        assert_eq!(cfg.backbone.depth, 4);
        // and the echo actually carries them
        let manifest = RunManifest::new(&cfg);
        let json = serde_json::to_string(&manifest).unwrap();
        for needle in ["\"lr0\":0.01", "\"lr_decay_every\":2500", "\"t_max\":6000", "[128,128,128]"] {
            assert!(json.contains(needle), "missing {needle} in {json}");
        }
    }

    #[test]
    fn toml_round_trip_preserves_config() {
        let mut cfg = ExperimentConfig::default();
        cfg.framework.base = FrameworkBase::Uamt;
        cfg.framework.oracle_mode = OracleMode::Semisam;
        cfg.training.patch = [32, 32, 32];
        let text = cfg.to_toml_string().unwrap();
        let back = ExperimentConfig::from_toml_str(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn unknown_keys_are_rejected_at_every_level() {
        let top = "nonsense = 1\n";
        assert!(ExperimentConfig::from_toml_str(top).is_err());
        let nested = "[training]\nt_max = 10\nturbo = true\n";
        assert!(ExperimentConfig::from_toml_str(nested).is_err());
        let backbone = "[backbone]\nwidth = 4\n";
        assert!(ExperimentConfig::from_toml_str(backbone).is_err());
    }

    #[test]
    fn minimal_override_parses() {
        let text = "[framework]\nbase = \"mt\"\noracle_mode = \"semisam\"\n\n[training]\nt_max = 300\npatch = [32, 32, 32]\n";
        let cfg = ExperimentConfig::from_toml_str(text).unwrap();
        assert_eq!(cfg.training.t_max, 300);
        assert_eq!(cfg.framework.oracle_mode, OracleMode::Semisam);
        assert_eq!(cfg.training.lr0, 0.01); // default preserved
    }

    #[test]
    fn contradictions_are_rejected() {
        let mut cfg = ExperimentConfig::default();
        cfg.framework.base = FrameworkBase::Supervised;
        cfg.framework.oracle_mode = OracleMode::Semisam;
        assert!(cfg.validate().is_err());

        let mut cfg = ExperimentConfig::default();
        cfg.training.patch = [30, 32, 32]; // not divisible by 8 at depth 4
        assert!(cfg.validate().is_err());

        let mut cfg = ExperimentConfig::default();
        cfg.framework.oracle_mode = OracleMode::Semisam;
        cfg.oracle.backend = OracleBackendKind::Adapter;
        assert!(cfg.validate().is_err());
    }
}
