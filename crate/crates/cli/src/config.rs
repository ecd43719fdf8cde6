//! Flat run configuration with the `toy` and `paper-scale` presets.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use mbcap_core::bridge::AdapterConfig;
use mbcap_core::captioner::{CaptionConfig, DecoderDims, MapperDims, PretrainConfig, TrainMode};
use mbcap_core::corpus::FEATURE_DIM;
use mbcap_core::jointspace::{EncoderDims, JointConfig};
use serde::{Deserialize, Serialize};

/// What sits between the text embedding and the mapper during text-only training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BridgeMode {
    #[serde(rename = "none")]
    None,
    #[serde(rename = "noise")]
    Noise,
    #[serde(rename = "adapter")]
    Adapter,
    #[serde(rename = "adapter+noise")]
    AdapterNoise,
}

impl BridgeMode {
    pub fn uses_noise(self) -> bool {
        matches!(self, Self::Noise | Self::AdapterNoise)
    }

    pub fn uses_adapter(self) -> bool {
        matches!(self, Self::Adapter | Self::AdapterNoise)
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::Noise => "noise",
            Self::Adapter => "adapter",
            Self::AdapterNoise => "adapter+noise",
        }
    }
}

impl fmt::Display for BridgeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BridgeMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        [Self::None, Self::Noise, Self::Adapter, Self::AdapterNoise]
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| format!("unknown bridge `{s}` (expected none, noise, adapter or adapter+noise)"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: String,
    pub seed: u64,

    pub n_scenes: usize,
    pub n_events: usize,

    pub token_dim: usize,
    pub joint_dim: usize,
    pub encoder_hidden: usize,
    pub joint_epochs: usize,
    pub joint_batch_size: usize,
    pub joint_lr: f64,
    pub joint_warmup_steps: usize,

    pub d_model: usize,
    pub decoder_layers: usize,
    pub decoder_heads: usize,
    pub decoder_ff: usize,
    pub max_len: usize,
    pub pretrain_epochs: usize,
    pub pretrain_batch_size: usize,
    pub pretrain_lr: f64,
    pub pretrain_warmup_steps: usize,

    pub prefix_length: usize,
    pub mapper_layers: usize,
    pub mapper_heads: usize,
    pub mapper_ff: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,

    pub mode: TrainMode,
    pub bridge: BridgeMode,
    /// Noise std; when absent the gap estimate is used.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_std: Option<f64>,
    pub gap_samples: usize,
    pub adapter_epochs: usize,
    pub adapter_batch_size: usize,
    pub adapter_lr: f64,

    pub beam_size: usize,
    pub max_caption_len: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl RunConfig {
    pub fn toy() -> Self {
        Self {
            preset: "toy".into(),
            seed: 7,
            n_scenes: 2000,
            n_events: 12,
            token_dim: 32,
            joint_dim: 32,
            encoder_hidden: 64,
            joint_epochs: 40,
            joint_batch_size: 64,
            joint_lr: 3e-3,
            joint_warmup_steps: 50,
            d_model: 64,
            decoder_layers: 2,
            decoder_heads: 4,
            decoder_ff: 256,
            max_len: 64,
            pretrain_epochs: 3,
            pretrain_batch_size: 64,
            pretrain_lr: 3e-3,
            pretrain_warmup_steps: 50,
            prefix_length: 8,
            mapper_layers: 2,
            mapper_heads: 4,
            mapper_ff: 128,
            epochs: 30,
            batch_size: 64,
            lr: 3e-3,
            warmup_steps: 20,
            mode: TrainMode::TextOnly,
            bridge: BridgeMode::Noise,
            noise_std: None,
            gap_samples: 30,
            adapter_epochs: 200,
            adapter_batch_size: 64,
            adapter_lr: 1e-2,
            beam_size: 5,
            max_caption_len: 30,
        }
    }

    /// The published hyperparameters on top of the toy model sizes, except
    /// for the 8-layer mapper and a context long enough for a 40-vector prefix.
    pub fn paper_scale() -> Self {
        Self {
            preset: "paper-scale".into(),
            mapper_layers: 8,
            prefix_length: 40,
            max_len: 96,
            epochs: 30,
            batch_size: 128,
            lr: 1e-4,
            warmup_steps: 2000,
            ..Self::toy()
        }
    }

    pub fn preset(name: &str) -> Result<Self, String> {
        match name {
            "toy" => Ok(Self::toy()),
            "paper-scale" => Ok(Self::paper_scale()),
            _ => Err(format!("unknown preset `{name}` (expected toy or paper-scale)")),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self, String> {
        // Missing keys fall back to the named preset; unknown keys are rejected.
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| e.message().to_string())?;
        let base = match table.get("preset") {
            Some(toml::Value::String(p)) => Self::preset(p)?,
            Some(_) => return Err("`preset` must be a string".into()),
            None => Self::toy(),
        };
        let mut merged = toml::Table::try_from(&base).map_err(|e| e.to_string())?;
        merged.extend(table);
        let cfg: Self = merged.try_into().map_err(|e: toml::de::Error| e.message().to_string())?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::from_toml(&text).map_err(|e| format!("{}: {e}", path.display()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    pub fn validate(&self) -> Result<(), String> {
        let positive = [
            ("n_events", self.n_events),
            ("token_dim", self.token_dim),
            ("joint_dim", self.joint_dim),
            ("d_model", self.d_model),
            ("prefix_length", self.prefix_length),
            ("batch_size", self.batch_size),
            ("joint_batch_size", self.joint_batch_size),
            ("pretrain_batch_size", self.pretrain_batch_size),
            ("adapter_batch_size", self.adapter_batch_size),
            ("beam_size", self.beam_size),
            ("max_caption_len", self.max_caption_len),
            ("gap_samples", self.gap_samples),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(format!("{k} must be positive"));
        }
        for (k, heads) in [("decoder_heads", self.decoder_heads), ("mapper_heads", self.mapper_heads)] {
            if heads == 0 || !self.d_model.is_multiple_of(heads) {
                return Err(format!("{k} must divide d_model ({})", self.d_model));
            }
        }
        if self.prefix_length >= self.max_len {
            return Err(format!("prefix_length {} leaves no room in max_len {}", self.prefix_length, self.max_len));
        }
        if self.noise_std.is_some_and(|s| !s.is_finite() || s < 0.0) {
            return Err("noise_std must be finite and non-negative".into());
        }
        Ok(())
    }

    pub fn encoder_dims(&self, vocab_size: usize) -> EncoderDims {
        EncoderDims { vocab_size, d_h: self.token_dim, d_a: FEATURE_DIM, d: self.joint_dim, hidden: self.encoder_hidden }
    }

    pub fn decoder_dims(&self, vocab_size: usize) -> DecoderDims {
        DecoderDims {
            vocab_size,
            d_model: self.d_model,
            n_layers: self.decoder_layers,
            n_heads: self.decoder_heads,
            d_ff: self.decoder_ff,
            max_len: self.max_len,
        }
    }

    pub fn mapper_dims(&self) -> MapperDims {
        MapperDims {
            d_in: self.joint_dim,
            d_model: self.d_model,
            prefix_len: self.prefix_length,
            n_layers: self.mapper_layers,
            n_heads: self.mapper_heads,
            d_ff: self.mapper_ff,
        }
    }

    pub fn joint(&self) -> JointConfig {
        JointConfig {
            epochs: self.joint_epochs,
            batch_size: self.joint_batch_size,
            lr: self.joint_lr,
            warmup_steps: self.joint_warmup_steps,
            seed: self.seed,
        }
    }

    pub fn pretrain(&self) -> PretrainConfig {
        PretrainConfig {
            epochs: self.pretrain_epochs,
            batch_size: self.pretrain_batch_size,
            lr: self.pretrain_lr,
            warmup_steps: self.pretrain_warmup_steps,
            seed: self.seed,
        }
    }

    pub fn caption(&self) -> CaptionConfig {
        CaptionConfig { epochs: self.epochs, batch_size: self.batch_size, lr: self.lr, warmup_steps: self.warmup_steps, seed: self.seed }
    }

    pub fn adapter(&self) -> AdapterConfig {
        AdapterConfig { epochs: self.adapter_epochs, batch_size: self.adapter_batch_size, lr: self.adapter_lr, seed: self.seed }
    }
}
