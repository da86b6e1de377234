use alloc::format;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParamFilter;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Direct,
    Tent,
    Eata,
    Oil,
    Pcl,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Direct,
        Strategy::Tent,
        Strategy::Eata,
        Strategy::Oil,
        Strategy::Pcl,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Direct => "direct",
            Strategy::Tent => "tent",
            Strategy::Eata => "eata",
            Strategy::Oil => "oil",
            Strategy::Pcl => "pcl",
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        Self::ALL
            .into_iter()
            .find(|s| s.name().eq_ignore_ascii_case(name))
    }

    pub fn updates_parameters(self) -> bool {
        self != Strategy::Direct
    }
}

impl core::fmt::Display for Strategy {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.name())
    }
}

/// Whether a stream starts from the source parameters or from wherever the
/// previous stream left them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResetMode {
    #[default]
    Episodic,
    Online,
}

/// Serializable parameter selection for adaptation.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamSelection {
    All,
    #[default]
    LayerNormOnly,
    /// Parameters whose name contains the given substring.
    NameContains(alloc::string::String),
}

impl ParamSelection {
    pub fn to_filter(&self) -> ParamFilter {
        match self {
            ParamSelection::All => ParamFilter::All,
            ParamSelection::LayerNormOnly => ParamFilter::LayerNormOnly,
            ParamSelection::NameContains(s) => ParamFilter::NameContains(s.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TentConfig {
    /// Keep encoder dropout active during adaptation and prediction.
    pub train_mode: bool,
}

impl Default for TentConfig {
    fn default() -> Self {
        Self { train_mode: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PclConfig {
    pub perturb_dropout_rate: f64,
    pub use_noise: bool,
    pub use_dropout: bool,
    /// Treat the original-branch distribution as a constant in the loss.
    pub detach_original: bool,
}

impl Default for PclConfig {
    fn default() -> Self {
        Self {
            perturb_dropout_rate: 0.3,
            use_noise: true,
            use_dropout: true,
            detach_original: false,
        }
    }
}

impl PclConfig {
    pub fn validate(&self) -> Result<()> {
        if !self.use_noise && !self.use_dropout {
            return Err(Error::Config(
                "pcl: use_noise and use_dropout are both false, the perturbation would be the identity".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.perturb_dropout_rate) {
            return Err(Error::Config(format!(
                "pcl.perturb_dropout_rate {} outside [0, 1)",
                self.perturb_dropout_rate
            )));
        }
        Ok(())
    }
}

/// `ln(1000)/2 − 1`.
pub fn default_e0() -> f64 {
    libm::log(1000.0) / 2.0 - 1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EataConfig {
    /// Entropy threshold. Samples with entropy `>= e0` are excluded. Infinity
    /// disables both the filter and the reliability weighting.
    #[serde(with = "crate::float_serde")]
    pub e0: f64,
    /// Weight of the anti-forgetting penalty.
    pub beta: f64,
}

impl Default for EataConfig {
    fn default() -> Self {
        Self {
            e0: default_e0(),
            beta: 5e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OilConfig {
    /// Teacher EMA decay.
    pub alpha: f64,
    /// Confidence threshold on the teacher's max probability; infinity keeps every sample.
    #[serde(with = "crate::float_serde")]
    pub gamma: f64,
    /// Student update iterations per batch.
    pub k: usize,
    /// Loss weight.
    pub beta: f64,
    /// Run the student with encoder dropout active.
    pub student_train_mode: bool,
}

impl Default for OilConfig {
    fn default() -> Self {
        Self {
            alpha: 0.99,
            gamma: 0.5,
            k: 5,
            beta: 1.0,
            student_train_mode: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    pub strategy: Strategy,
    pub lr: f64,
    pub steps_per_batch: usize,
    /// Stop the step loop early once `|Δloss|` falls below this value.
    pub early_stop_tol: Option<f64>,
    /// Re-run the forward pass after the last update to produce predictions.
    pub refresh_predictions: bool,
    pub param_filter: ParamSelection,
    pub reset: ResetMode,
    pub seed: u64,
    pub tent: TentConfig,
    pub pcl: PclConfig,
    pub eata: EataConfig,
    pub oil: OilConfig,
}

/// Learning rates swept by default.
pub const LR_SWEEP: [f64; 5] = [1e-5, 2e-5, 5e-5, 1e-4, 2e-4];

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Pcl,
            lr: 2e-4,
            steps_per_batch: 1,
            early_stop_tol: None,
            refresh_predictions: false,
            param_filter: ParamSelection::LayerNormOnly,
            reset: ResetMode::Episodic,
            seed: 0,
            tent: TentConfig::default(),
            pcl: PclConfig::default(),
            eata: EataConfig::default(),
            oil: OilConfig::default(),
        }
    }
}

impl AdaptConfig {
    pub fn for_strategy(strategy: Strategy) -> Self {
        Self {
            strategy,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!(
                "lr {} must be finite and non-negative",
                self.lr
            )));
        }
        if self.steps_per_batch == 0 {
            return Err(Error::Config("steps_per_batch must be at least 1".into()));
        }
        if let Some(tol) = self.early_stop_tol {
            if !(tol >= 0.0) {
                return Err(Error::Config("early_stop_tol must be non-negative".into()));
            }
        }
        match self.strategy {
            Strategy::Pcl => self.pcl.validate()?,
            Strategy::Eata => {
                if self.eata.e0.is_nan() || !(self.eata.beta >= 0.0) {
                    return Err(Error::Config(
                        "eata: e0 must not be NaN and beta must be >= 0".into(),
                    ));
                }
            }
            Strategy::Oil => {
                if !(0.0..=1.0).contains(&self.oil.alpha) {
                    return Err(Error::Config(format!(
                        "oil.alpha {} outside [0, 1]",
                        self.oil.alpha
                    )));
                }
                if self.oil.k == 0 {
                    return Err(Error::Config("oil.k must be at least 1".into()));
                }
                if self.oil.gamma.is_nan() {
                    return Err(Error::Config("oil.gamma must not be NaN".into()));
                }
            }
            Strategy::Direct | Strategy::Tent => {}
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn e0_matches_closed_form() {
        assert!((default_e0() - 2.453877639491068).abs() < 1e-12);
    }

    #[test]
    fn pcl_rejects_identity_perturbation() {
        let mut cfg = AdaptConfig::for_strategy(Strategy::Pcl);
        cfg.pcl.use_noise = false;
        cfg.pcl.use_dropout = false;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.pcl.use_noise = true;
        assert!(cfg.validate().is_ok());
        cfg.pcl.use_noise = false;
        cfg.pcl.use_dropout = true;
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn strategy_names_roundtrip() {
        for s in Strategy::ALL {
            assert_eq!(Strategy::parse(s.name()), Some(s));
        }
        assert_eq!(Strategy::parse("PCL"), Some(Strategy::Pcl));
        assert_eq!(Strategy::parse("xtune"), None);
    }
}
