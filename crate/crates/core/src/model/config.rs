use serde::{Deserialize, Serialize};

use crate::nn::PosEncodingMode;
use crate::{Error, Result};

/// Backbone endpoint feeding a branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Endpoint {
    /// Third reduction level, stride 8.
    Rdct3,
    /// Fourth reduction level, stride 16.
    Rdct4,
}

impl Endpoint {
    pub const ALL: [Endpoint; 2] = [Endpoint::Rdct3, Endpoint::Rdct4];

    pub fn stride(self) -> usize {
        match self {
            Endpoint::Rdct3 => 8,
            Endpoint::Rdct4 => 16,
        }
    }

    /// Index of the backbone stage producing this endpoint.
    pub fn stage(self) -> usize {
        match self {
            Endpoint::Rdct3 => 2,
            Endpoint::Rdct4 => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Endpoint::Rdct3 => "rdct3",
            Endpoint::Rdct4 => "rdct4",
        }
    }
}

impl std::str::FromStr for Endpoint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rdct3" => Ok(Endpoint::Rdct3),
            "rdct4" => Ok(Endpoint::Rdct4),
            other => Err(Error::Config(format!("unknown endpoint {other:?}"))),
        }
    }
}

/// Every architecture knob of the regressor.
///
/// Defaults are the full-size setting: 224 px input, endpoint widths 40/112,
/// `dim = 256`, six blocks of four heads, dropout 0.1, 1024-wide regression
/// heads, stride-16 map to position and stride-8 map to orientation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Square input side in pixels; must be divisible by 16.
    pub input_size: usize,
    pub input_channels: usize,
    /// Output channels of the four stride-2 backbone stages.
    pub backbone_widths: [usize; 4],
    pub position_map: Endpoint,
    pub orientation_map: Endpoint,
    /// Encoder embedding width `C_t`.
    pub dim: usize,
    pub blocks: usize,
    pub heads: usize,
    /// Hidden width of the MLP inside each encoder block.
    pub mlp_hidden: usize,
    pub dropout: f64,
    /// Hidden width of the regression heads.
    pub head_hidden: usize,
    /// Orientation head reads `[t_q ; t_x]` instead of `t_q`.
    pub orientation_prior: bool,
    /// When widening the orientation head for the prior, keep the trained
    /// weights for the `t_q` half instead of re-initializing.
    pub prior_warm_start: bool,
    pub pos_mode: PosEncodingMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_size: 224,
            input_channels: 3,
            backbone_widths: [16, 24, 40, 112],
            position_map: Endpoint::Rdct4,
            orientation_map: Endpoint::Rdct3,
            dim: 256,
            blocks: 6,
            heads: 4,
            mlp_hidden: 256,
            dropout: 0.1,
            head_hidden: 1024,
            orientation_prior: false,
            prior_warm_start: false,
            pos_mode: PosEncodingMode::BlockInput,
        }
    }
}

impl ModelConfig {
    /// Small setting used for gradient checks: 16 px input, `dim = 8`,
    /// two blocks of two heads.
    pub fn tiny() -> Self {
        ModelConfig {
            input_size: 16,
            input_channels: 3,
            backbone_widths: [4, 6, 8, 8],
            dim: 8,
            blocks: 2,
            heads: 2,
            mlp_hidden: 8,
            dropout: 0.0,
            head_hidden: 16,
            ..Self::default()
        }
    }

    /// Desk-scale training setting for 64 px synthetic scenes.
    pub fn desk() -> Self {
        ModelConfig {
            input_size: 64,
            input_channels: 3,
            backbone_widths: [8, 16, 24, 32],
            dim: 32,
            blocks: 2,
            heads: 2,
            mlp_hidden: 64,
            dropout: 0.0,
            head_hidden: 64,
            ..Self::default()
        }
    }

    pub fn endpoint_channels(&self, e: Endpoint) -> usize {
        self.backbone_widths[e.stage()]
    }

    /// `(height, width)` of an endpoint's activation map.
    pub fn endpoint_grid(&self, e: Endpoint) -> (usize, usize) {
        let s = self.input_size / e.stride();
        (s, s)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.input_size == 0 || !self.input_size.is_multiple_of(16) {
            return fail(format!(
                "input size {} is not a positive multiple of 16",
                self.input_size
            ));
        }
        if self.input_channels == 0 || self.backbone_widths.contains(&0) {
            return fail("channel counts must be positive".into());
        }
        if self.dim == 0 || !self.dim.is_multiple_of(2) {
            return fail(format!("dim {} must be positive and even", self.dim));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return fail(format!(
                "dim {} is not divisible by {} heads",
                self.dim, self.heads
            ));
        }
        if self.blocks == 0 {
            return fail("at least one encoder block is required".into());
        }
        if self.mlp_hidden == 0 || self.head_hidden == 0 {
            return fail("hidden widths must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }
}
