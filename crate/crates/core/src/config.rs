//! Run configuration: a flat key = value text file where every key has a
//! documented default and unknown keys are hard errors.

use crate::model::ModelConfig;
use crate::supervision::LossWeights;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: unknown config key '{key}'")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: bad value for '{key}': {value}")]
    BadValue {
        line: usize,
        key: String,
        value: String,
    },
    #[error("line {line}: expected 'key = value'")]
    Malformed { line: usize },
}

/// Every tunable of training and evaluation. Defaults trace to the reference
/// constants (lambda = 0.75, beta = 0.1, lr = 1e-4, delta = 1, delta_s = 0.5,
/// tau = 3, N = 3) or to documented scale-down decisions.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub fv_h: usize,
    pub fv_w: usize,
    pub bev_h: usize,
    pub bev_w: usize,
    pub channels: usize,
    pub ffn_hidden: usize,
    pub d_f: usize,
    pub d_z: usize,
    pub lstm_hidden: usize,
    pub iterations: usize,
    pub lambda: f64,
    pub beta: f64,
    pub delta: f64,
    pub delta_s: f64,
    pub tau: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub lr_halve_every: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub miscal_rot_deg: f64,
    pub miscal_trans_m: f64,
    pub scale_attention: bool,
    pub normalize_maps: bool,
    pub depth_scale: f64,
    pub height_scale: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            fv_h: 96,
            fv_w: 192,
            bev_h: 96,
            bev_w: 96,
            channels: 32,
            ffn_hidden: 64,
            d_f: 256,
            d_z: 128,
            lstm_hidden: 128,
            iterations: 3,
            lambda: 0.75,
            beta: 0.1,
            delta: 1.0,
            delta_s: 0.5,
            tau: 3,
            learning_rate: 1e-4,
            epochs: 6,
            lr_halve_every: 2,
            batch_size: 8,
            seed: 0,
            miscal_rot_deg: 10.0,
            miscal_trans_m: 0.25,
            scale_attention: false,
            normalize_maps: false,
            depth_scale: 3.5,
            height_scale: 1.2,
        }
    }
}

macro_rules! config_keys {
    ($($key:ident : $ty:ident),* $(,)?) => {
        impl RunConfig {
            fn set(&mut self, key: &str, value: &str, line: usize) -> Result<(), ConfigError> {
                match key {
                    $(stringify!($key) => {
                        self.$key = value.parse::<$ty>().map_err(|_| ConfigError::BadValue {
                            line,
                            key: key.to_string(),
                            value: value.to_string(),
                        })?;
                        Ok(())
                    })*
                    _ => Err(ConfigError::UnknownKey {
                        line,
                        key: key.to_string(),
                    }),
                }
            }

            /// The config serialized as the same flat key = value format.
            pub fn to_text(&self) -> String {
                let mut out = String::new();
                $(out.push_str(&format!("{} = {}\n", stringify!($key), self.$key));)*
                out
            }
        }
    };
}

config_keys! {
    fv_h: usize,
    fv_w: usize,
    bev_h: usize,
    bev_w: usize,
    channels: usize,
    ffn_hidden: usize,
    d_f: usize,
    d_z: usize,
    lstm_hidden: usize,
    iterations: usize,
    lambda: f64,
    beta: f64,
    delta: f64,
    delta_s: f64,
    tau: usize,
    learning_rate: f64,
    epochs: usize,
    lr_halve_every: usize,
    batch_size: usize,
    seed: u64,
    miscal_rot_deg: f64,
    miscal_trans_m: f64,
    scale_attention: bool,
    normalize_maps: bool,
    depth_scale: f64,
    height_scale: f64,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut config = Self::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let trimmed = raw.split('#').next().unwrap_or("").trim();
            if trimmed.is_empty() {
                continue;
            }
            let Some((key, value)) = trimmed.split_once('=') else {
                return Err(ConfigError::Malformed { line });
            };
            config.set(key.trim(), value.trim(), line)?;
        }
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            channels: self.channels,
            ffn_hidden: self.ffn_hidden,
            d_f: self.d_f,
            d_z: self.d_z,
            lstm_hidden: self.lstm_hidden,
            iterations: self.iterations,
            scale_attention: self.scale_attention,
            normalize_maps: self.normalize_maps,
            depth_scale: self.depth_scale as f32,
            height_scale: self.height_scale as f32,
            fv_dims: (self.fv_h, self.fv_w),
            bev_dims: (self.bev_h, self.bev_w),
            seed: self.seed,
        }
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda: self.lambda,
            beta: self.beta,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let config = RunConfig::default();
        let parsed = RunConfig::parse(&config.to_text()).unwrap();
        assert_eq!(parsed, config);
    }

    #[test]
    fn overrides_and_comments() {
        let text = "# comment\nbeta = 0.0  # ablation\nepochs = 2\n\nchannels=16\n";
        let config = RunConfig::parse(text).unwrap();
        assert_eq!(config.beta, 0.0);
        assert_eq!(config.epochs, 2);
        assert_eq!(config.channels, 16);
        assert_eq!(config.lambda, 0.75);
    }

    #[test]
    fn unknown_key_is_hard_error() {
        match RunConfig::parse("learning_rte = 0.1\n") {
            Err(ConfigError::UnknownKey { key, line }) => {
                assert_eq!(key, "learning_rte");
                assert_eq!(line, 1);
            }
            other => panic!("expected unknown-key error, got {other:?}"),
        }
    }

    #[test]
    fn bad_value_is_hard_error() {
        assert!(matches!(
            RunConfig::parse("epochs = soon\n"),
            Err(ConfigError::BadValue { .. })
        ));
        assert!(matches!(
            RunConfig::parse("no equals sign\n"),
            Err(ConfigError::Malformed { line: 1 })
        ));
    }

    #[test]
    fn paper_traceable_defaults() {
        let c = RunConfig::default();
        assert_eq!(c.lambda, 0.75);
        assert_eq!(c.beta, 0.1);
        assert_eq!(c.learning_rate, 1e-4);
        assert_eq!(c.delta, 1.0);
        assert_eq!(c.delta_s, 0.5);
        assert_eq!(c.tau, 3);
        assert_eq!(c.iterations, 3);
    }
}
