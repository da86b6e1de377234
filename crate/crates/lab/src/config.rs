//! Experiment configuration files.
//!
//! A config is a TOML document with one table per concern. Every key is
//! optional; omitted keys take the values of [`ExperimentConfig::default`],
//! which is the reference benchmark. See `reference/ref.toml` for the full
//! key list.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tta_core::datagen::{ShiftSpec, TaskSpec, TrainConfig};
use tta_core::model::Architecture;
use tta_core::tta::{AdaptConfig, Strategy, LR_SWEEP};

use crate::error::{LabError, Result};

/// Seeds of the reference benchmark.
pub const REFERENCE_SEEDS: [u64; 5] = [11, 13, 17, 19, 23];

/// Encoder dropout rates of the dropout-rate study.
pub const DROPOUT_RATES: [f64; 6] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Initialization seed.
    pub seed: u64,
    pub hidden: Vec<usize>,
    pub encoder_dropout: f64,
    /// Load a saved source model instead of training one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

impl Default for ModelSection {
    fn default() -> Self {
        let arch = Architecture::default();
        Self {
            seed: 1,
            hidden: arch.hidden,
            encoder_dropout: arch.encoder_dropout,
            path: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StreamSection {
    pub n_batches: usize,
    pub batch_size: usize,
}

impl Default for StreamSection {
    fn default() -> Self {
        Self {
            n_batches: 50,
            batch_size: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudySection {
    /// Learning rates for `sweep-lr`.
    pub lrs: Vec<f64>,
    /// Encoder dropout rates for `study-dropout-rate`.
    pub dropout_rates: Vec<f64>,
    /// Ordered shift sequence for `run-online`.
    pub online_shifts: Vec<ShiftSpec>,
}

impl Default for StudySection {
    fn default() -> Self {
        Self {
            lrs: LR_SWEEP.to_vec(),
            dropout_rates: DROPOUT_RATES.to_vec(),
            online_shifts: vec![
                ShiftSpec::reference(),
                ShiftSpec::Compose {
                    shifts: vec![
                        ShiftSpec::Rotation {
                            angle: 1.2,
                            plane_seed: 2,
                        },
                        ShiftSpec::AdditiveNoise { sigma: 1.0 },
                    ],
                },
                ShiftSpec::AdditiveNoise { sigma: 1.5 },
            ],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    /// Record wall-clock timings. Turn off for byte-stable reports.
    pub timing: bool,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            timing: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub strategies: Vec<Strategy>,
    pub task: TaskSpec,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub shift: ShiftSpec,
    pub stream: StreamSection,
    /// Shared adaptation settings; `strategy` and `seed` are set per run.
    pub adapt: AdaptConfig,
    pub studies: StudySection,
    /// Where and how to write results. Not part of the hashed content.
    #[serde(skip_serializing)]
    pub output: OutputSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seeds: REFERENCE_SEEDS.to_vec(),
            strategies: Strategy::ALL.to_vec(),
            task: TaskSpec::default(),
            model: ModelSection::default(),
            train: TrainConfig::default(),
            shift: ShiftSpec::reference(),
            stream: StreamSection::default(),
            adapt: AdaptConfig::default(),
            studies: StudySection::default(),
            output: OutputSection::default(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seeds: Vec<u64>,
    pub strategy: Option<Strategy>,
    pub out: Option<PathBuf>,
    pub no_timing: bool,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| LabError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| LabError::Config(format!("cannot read {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| LabError::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is representable as TOML")
    }

    pub fn apply(&mut self, o: &Overrides) {
        if !o.seeds.is_empty() {
            self.seeds = o.seeds.clone();
        }
        if let Some(s) = o.strategy {
            self.strategies = vec![s];
        }
        if let Some(out) = &o.out {
            self.output.dir = out.clone();
        }
        if o.no_timing {
            self.output.timing = false;
        }
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            input_dim: self.task.dim,
            hidden: self.model.hidden.clone(),
            classes: self.task.classes,
            encoder_dropout: self.model.encoder_dropout,
        }
    }

    /// Checks every section and reports the first problem with its key path.
    pub fn validate(&self) -> Result<()> {
        let field = |path: &str, e: tta_core::Error| LabError::Config(format!("{path}: {e}"));
        if self.seeds.is_empty() {
            return Err(LabError::Config(
                "seeds: at least one seed is required".into(),
            ));
        }
        if self.strategies.is_empty() {
            return Err(LabError::Config(
                "strategies: at least one strategy is required".into(),
            ));
        }
        self.task.validate().map_err(|e| field("task", e))?;
        self.architecture()
            .validate()
            .map_err(|e| field("model", e))?;
        if self.train.batch_size == 0 {
            return Err(LabError::Config(
                "train.batch_size: must be at least 1".into(),
            ));
        }
        if !(self.train.lr > 0.0) || !self.train.lr.is_finite() {
            return Err(LabError::Config(
                "train.lr: must be positive and finite".into(),
            ));
        }
        self.shift
            .validate(self.task.dim)
            .map_err(|e| field("shift", e))?;
        if self.stream.n_batches == 0 || self.stream.batch_size == 0 {
            return Err(LabError::Config(
                "stream: n_batches and batch_size must be at least 1".into(),
            ));
        }
        for s in &self.strategies {
            let mut cfg = self.adapt.clone();
            cfg.strategy = *s;
            cfg.validate().map_err(|e| field("adapt", e))?;
        }
        if self
            .studies
            .lrs
            .iter()
            .any(|lr| !(*lr >= 0.0) || !lr.is_finite())
        {
            return Err(LabError::Config(
                "studies.lrs: values must be finite and >= 0".into(),
            ));
        }
        if self
            .studies
            .dropout_rates
            .iter()
            .any(|r| !(0.0..1.0).contains(r))
        {
            return Err(LabError::Config(
                "studies.dropout_rates: values must lie in [0, 1)".into(),
            ));
        }
        for (i, s) in self.studies.online_shifts.iter().enumerate() {
            s.validate(self.task.dim)
                .map_err(|e| field(&format!("studies.online_shifts[{i}]"), e))?;
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form. The output section is excluded.
    pub fn hash(&self) -> String {
        hash_json(self)
    }
}

pub(crate) fn hash_json<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("serializable");
    let digest = Sha256::digest(&bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_reference_config() {
        let cfg = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        cfg.validate().unwrap();
    }

    #[test]
    fn toml_roundtrip_keeps_the_hash() {
        let cfg = ExperimentConfig::default();
        let back = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn unknown_keys_name_the_field() {
        let err = ExperimentConfig::from_toml("[adapt]\nlearning_rate = 0.1\n").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("learning_rate"), "{msg}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn validation_names_the_section() {
        let cfg =
            ExperimentConfig::from_toml("[adapt.pcl]\nuse_noise = false\nuse_dropout = false\n")
                .unwrap();
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("adapt") && msg.contains("use_noise"), "{msg}");

        let cfg = ExperimentConfig::from_toml("[task]\nwithin_class_sigma = -1.0\n").unwrap();
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(
            msg.contains("task") && msg.contains("within_class_sigma"),
            "{msg}"
        );
    }

    #[test]
    fn overrides_take_precedence() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply(&Overrides {
            seeds: vec![1, 2],
            strategy: Some(Strategy::Direct),
            out: Some("elsewhere".into()),
            no_timing: true,
        });
        assert_eq!(cfg.seeds, [1, 2]);
        assert_eq!(cfg.strategies, [Strategy::Direct]);
        assert_eq!(cfg.output.dir, PathBuf::from("elsewhere"));
        assert!(!cfg.output.timing);
    }

    #[test]
    fn output_location_does_not_change_the_hash() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.output.dir = "x/y".into();
        assert_eq!(a.hash(), b.hash());
        b.seeds.push(99);
        assert_ne!(a.hash(), b.hash());
    }
}
