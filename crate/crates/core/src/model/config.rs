use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::AttentionConfig;
use crate::convfeat::FeatureConfig;
use crate::error::{Error, Result};

/// Named size presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Tiny,
    S,
    M,
    B,
    L,
    XL,
}

impl Variant {
    pub const ALL: [Variant; 6] = [Variant::Tiny, Variant::S, Variant::M, Variant::B, Variant::L, Variant::XL];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Tiny => "tiny",
            Variant::S => "s",
            Variant::M => "m",
            Variant::B => "b",
            Variant::L => "l",
            Variant::XL => "xl",
        }
    }

    /// Reported parameter count in millions (`None` for Tiny).
    pub fn reported_params_m(self) -> Option<f64> {
        match self {
            Variant::Tiny => None,
            Variant::S => Some(16.3),
            Variant::M => Some(44.3),
            Variant::B => Some(120.0),
            Variant::L => Some(300.0),
            Variant::XL => Some(540.0),
        }
    }

    pub fn batch_size(self) -> usize {
        match self {
            Variant::Tiny => 8,
            Variant::S | Variant::M => 256,
            Variant::B => 128,
            Variant::L => 96,
            Variant::XL => 64,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown model variant {s:?}")))
    }
}

/// Network dimensions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub model_dim: usize,
    pub mlp_dim: usize,
    pub channel_blocks: usize,
    pub temporal_blocks: usize,
    pub decoder_blocks: usize,
    pub heads: usize,
    pub features: FeatureConfig,
}

impl ModelConfig {
    pub fn variant(v: Variant) -> Self {
        let (d, mlp, cb, tb, db, h) = match v {
            Variant::Tiny => (64, 64, 1, 2, 1, 4),
            Variant::S => (384, 256, 1, 5, 2, 4),
            Variant::M => (512, 512, 1, 7, 4, 4),
            Variant::B => (640, 512, 2, 14, 8, 8),
            Variant::L => (896, 768, 2, 16, 10, 8),
            Variant::XL => (1152, 768, 3, 19, 12, 12),
        };
        let (embed, spectral) = match v {
            Variant::Tiny => (64, 16),
            _ => (512, 128),
        };
        ModelConfig {
            variant: v,
            model_dim: d,
            mlp_dim: mlp,
            channel_blocks: cb,
            temporal_blocks: tb,
            decoder_blocks: db,
            heads: h,
            features: FeatureConfig {
                stacks: FeatureConfig::default_stacks(),
                temporal_embed: embed,
                temporal_out: d - spectral,
                spectral_out: spectral,
            },
        }
    }

    pub fn tiny() -> Self {
        Self::variant(Variant::Tiny)
    }

    /// Hidden width of every gated feed-forward block.
    pub fn ffn_hidden(&self) -> usize {
        2 * self.mlp_dim
    }

    pub fn attention(&self) -> Result<AttentionConfig> {
        AttentionConfig::new(self.model_dim, self.heads)
    }

    pub fn validate(&self) -> Result<()> {
        self.attention()?.validate()?;
        self.features.validate()?;
        if self.features.model_dim() != self.model_dim {
            return Err(Error::Config(format!(
                "feature widths {} + {} do not sum to model dim {}",
                self.features.temporal_out, self.features.spectral_out, self.model_dim
            )));
        }
        if self.mlp_dim == 0 || self.temporal_blocks == 0 || self.channel_blocks == 0 || self.decoder_blocks == 0 {
            return Err(Error::Config("block counts and MLP width must be positive".into()));
        }
        Ok(())
    }
}
