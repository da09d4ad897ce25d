//! The full resolved configuration of one run.

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, MAX_PROMPT_LEN};
use crate::error::{Error, Result};
use crate::objective::LossConfig;
use crate::prompt::{InjectionConfig, PromptInit, TkeActivation};
use crate::task::TaskConfig;
use crate::train::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PromptConfig {
    pub length: usize,
    pub init: PromptInit,
    pub tke_mid_dim: usize,
    pub tke_activation: TkeActivation,
    /// Scale of the up-projection initialisation.
    pub tke_init_scale: f64,
}

impl Default for PromptConfig {
    fn default() -> Self {
        Self {
            length: 4,
            init: PromptInit::Random,
            tke_mid_dim: 8,
            tke_activation: TkeActivation::Relu,
            tke_init_scale: 0.03,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub seeds: Vec<u64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { seeds: vec![1, 2, 3] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    pub task: TaskConfig,
    pub prompt: PromptConfig,
    pub loss: LossConfig,
    pub injection: InjectionConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Keep `encoder.seq_len` equal to `M + K_c + 1`.
    pub fn sync_seq_len(&mut self) {
        self.encoder.seq_len = self.prompt.length + self.task.tokens_per_class + 1;
    }

    pub fn set_prompt_length(&mut self, m: usize) {
        self.prompt.length = m;
        self.sync_seq_len();
    }

    /// Point this config at one evaluation seed: task and run streams both
    /// follow the seed, the encoder weights do not.
    pub fn for_seed(&self, seed: u64) -> Self {
        let mut c = self.clone();
        c.task.task_seed = seed;
        c.train.run_seed = seed;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.task.validate()?;
        self.loss.validate()?;
        self.train.validate(&self.loss)?;
        if self.prompt.length == 0 || self.prompt.length > MAX_PROMPT_LEN {
            return Err(Error::config(
                "prompt.length",
                format!("must be in [1, {MAX_PROMPT_LEN}]"),
            ));
        }
        if self.prompt.tke_mid_dim == 0 {
            return Err(Error::config("prompt.tke_mid_dim", "must be positive"));
        }
        if !(self.prompt.tke_init_scale >= 0.0 && self.prompt.tke_init_scale.is_finite()) {
            return Err(Error::config("prompt.tke_init_scale", "must be finite and non-negative"));
        }
        let nt = self.prompt.length + self.task.tokens_per_class + 1;
        if self.encoder.seq_len != nt {
            return Err(Error::config(
                "encoder.seq_len",
                format!("{} but M + K_c + 1 = {nt}", self.encoder.seq_len),
            ));
        }
        self.injection.validate(self.encoder.num_layers)?;
        if self.eval.seeds.is_empty() {
            return Err(Error::config("eval.seeds", "need at least one seed"));
        }
        Ok(())
    }

    /// Small configuration used by gradient checks and fast tests.
    pub fn tiny() -> Self {
        let mut c = Self {
            encoder: EncoderConfig {
                num_layers: 2,
                token_dim: 8,
                num_heads: 2,
                mlp_ratio: 2,
                output_dim: 8,
                vocab_size: 64,
                ..EncoderConfig::default()
            },
            task: TaskConfig {
                num_classes: 8,
                shots_per_class: 2,
                test_per_class: 4,
                tokens_per_class: 2,
                ..TaskConfig::default()
            },
            prompt: PromptConfig {
                length: 2,
                tke_mid_dim: 2,
                ..PromptConfig::default()
            },
            injection: InjectionConfig::for_depth(2),
            ..Self::default()
        };
        c.injection.insert_layer = 1;
        c.sync_seq_len();
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_consistent() {
        let c = RunConfig::default();
        c.validate().unwrap();
        assert_eq!(c.prompt.length, 4);
        assert_eq!(c.loss.kg_weight, 8.0);
        assert_eq!(c.train.learning_rate, 2e-3);
        assert_eq!(c.train.batch_size, 32);
        assert_eq!(c.injection.insert_layer, 4);
        RunConfig::tiny().validate().unwrap();
    }

    #[test]
    fn seq_len_mismatch_is_reported() {
        let mut c = RunConfig::default();
        c.prompt.length = 2;
        assert!(matches!(c.validate(), Err(Error::Config { key, .. }) if key == "encoder.seq_len"));
        c.sync_seq_len();
        c.validate().unwrap();
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = serde_json::from_str::<RunConfig>(r#"{"prompt": {"lenght": 3}}"#).unwrap_err();
        assert!(err.to_string().contains("lenght"));
    }
}
