//! Run configuration. Every field has a default, so a config file only
//! needs the values it changes.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::embedding_io::{StreamMode, SynthConfig};
use crate::error::{Error, Result};
use crate::losses::{PairLoss, DEFAULT_LAMBDA_PP};
use crate::model::{Aggregation, PROMPT_INIT_SIGMA};

/// Default prompt length M.
pub const DEFAULT_PROMPT_LEN: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// Use the prompt of the most similar prototype, scaled by that similarity.
    #[default]
    WeightTop1,
    /// No selection: every class is encoded with its own prompt at unit scale.
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ProtoMode {
    /// Initialized from class means, then trained.
    #[default]
    Refined,
    /// Initialized from class means, never trained.
    Frozen,
    /// Randomly initialized, then trained.
    Scratch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    /// Softmax temperature for both classifiers.
    pub tau: f64,
    pub lambda_pp: f64,
    /// Prompt length M.
    pub prompt_len: usize,
    /// Old class names sampled into the text classifier per step; 0 disables sampling.
    pub sample_old: usize,
    pub clamp_lambda: bool,
    pub loss_variant: PairLoss,
    pub selection: Selection,
    pub proto_mode: ProtoMode,
    pub aggregation: Aggregation,
    pub prompt_init_sigma: f64,
    /// Copy prompts from the nearest earlier-dataset prototype in cross-dataset runs.
    pub cdc_transfer: bool,
    pub encoder_seed: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 128,
            lr0: 1e-3,
            lr_min: 1e-4,
            weight_decay: 0.0,
            tau: 0.01,
            lambda_pp: DEFAULT_LAMBDA_PP,
            prompt_len: DEFAULT_PROMPT_LEN,
            sample_old: 10,
            clamp_lambda: false,
            loss_variant: PairLoss::Pp,
            selection: Selection::WeightTop1,
            proto_mode: ProtoMode::Refined,
            aggregation: Aggregation::Average,
            prompt_init_sigma: PROMPT_INIT_SIGMA,
            cdc_transfer: true,
            encoder_seed: 1234,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.prompt_len == 0 {
            return Err(Error::Config(
                "batch_size and prompt_len must be at least 1".into(),
            ));
        }
        let rates = [
            ("lr0", self.lr0),
            ("lr_min", self.lr_min),
            ("weight_decay", self.weight_decay),
            ("lambda_pp", self.lambda_pp),
            ("prompt_init_sigma", self.prompt_init_sigma),
        ];
        for (name, v) in rates {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        if self.lr_min > self.lr0 {
            return Err(Error::Config(format!(
                "lr_min {} exceeds lr0 {}",
                self.lr_min, self.lr0
            )));
        }
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Config(format!(
                "tau must be positive, got {}",
                self.tau
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    #[default]
    Ci,
    Cdc,
    Cdi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CdcEval {
    /// Evaluate on the second dataset only.
    #[default]
    I2c,
    /// Evaluate on the pooled test records of both datasets.
    IPlusC,
}

/// Everything a CLI run needs; written back verbatim as `config.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub scenario: Scenario,
    pub cdc_eval: CdcEval,
    /// Stream shape used by `gen`.
    pub stream_mode: StreamMode,
    pub synth: SynthConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.train.validate()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> [u8; 32] {
        config_hash(self)
    }
}

/// SHA-256 of a serializable config's compact JSON.
pub fn config_hash<T: Serialize>(cfg: &T) -> [u8; 32] {
    let bytes = serde_json::to_vec(cfg).expect("config serializes");
    Sha256::digest(&bytes).into()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_match_training_recipe() {
        let c = TrainConfig::default();
        assert_eq!(c.lambda_pp, 1.5);
        assert_eq!(c.prompt_len, 6);
        assert_eq!(c.lr0, 1e-3);
        assert_eq!(c.lr_min, 1e-4);
        assert_eq!(c.epochs, 10);
        assert_eq!(c.batch_size, 128);
        assert_eq!(c.weight_decay, 0.0);
    }

    #[test]
    fn partial_json_fills_defaults() {
        let c = RunConfig::from_json(r#"{"train": {"epochs": 3}, "scenario": "cdi"}"#).unwrap();
        assert_eq!(c.train.epochs, 3);
        assert_eq!(c.train.lambda_pp, 1.5);
        assert_eq!(c.scenario, Scenario::Cdi);
        let back = RunConfig::from_json(&c.to_json()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn rejects_unknown_and_invalid() {
        assert!(matches!(
            RunConfig::from_json(r#"{"train": {"epochz": 3}}"#),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            RunConfig::from_json(r#"{"train": {"tau": 0}}"#),
            Err(Error::Config(_))
        ));
    }
}
