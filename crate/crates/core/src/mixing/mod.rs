//! Spatial and channel mixing, and their composition into mixing blocks.
//!
//! A mixing block maps `[N,C,H,W]` to `[N,C,H,W]` as
//! `x -> x + S(norm(x)) -> (..) + F(norm(..))`, where `S` aggregates across
//! spatial positions (depth-wise conv, self-attention or token MLP) and `F` is
//! a per-position two-layer MLP over channels.

mod block;
mod channel;
pub mod probe;
mod spatial;

use std::fmt;
use std::str::FromStr;

pub use block::MixingBlock;
pub use channel::ChannelMixer;
pub use spatial::{cpe, SpatialBody, SpatialMixer};

use crate::error::{config_err, Result, SpachError};

pub const DEFAULT_HEAD_DIM: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SpatialKind {
    Conv,
    Attention,
    Mlp,
}

impl SpatialKind {
    pub fn name(self) -> &'static str {
        match self {
            SpatialKind::Conv => "conv",
            SpatialKind::Attention => "attention",
            SpatialKind::Mlp => "mlp",
        }
    }
}

impl fmt::Display for SpatialKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SpatialKind {
    type Err = SpachError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conv" => Ok(SpatialKind::Conv),
            "attention" | "attn" | "trans" => Ok(SpatialKind::Attention),
            "mlp" => Ok(SpatialKind::Mlp),
            _ => Err(config_err(format!("unknown spatial kind '{s}'"))),
        }
    }
}

/// Declarative description of one mixing block.
#[derive(Clone, Debug, PartialEq)]
pub struct MixingBlockSpec {
    pub spatial_kind: SpatialKind,
    pub channels: usize,
    /// Channel-MLP expansion ratio R; hidden width is `ceil(R * C)`.
    pub expansion_ratio: f64,
    /// Spatial positions H*W at this stage.
    pub tokens: usize,
    pub use_cpe: bool,
    pub share_group: Option<usize>,
    pub drop_path_rate: f64,
    pub head_dim: usize,
    /// Token-MLP hidden width is `ceil(token_expansion * tokens)`.
    pub token_expansion: f64,
}

impl MixingBlockSpec {
    pub fn new(
        spatial_kind: SpatialKind,
        channels: usize,
        expansion_ratio: f64,
        tokens: usize,
    ) -> Self {
        MixingBlockSpec {
            spatial_kind,
            channels,
            expansion_ratio,
            tokens,
            use_cpe: spatial_kind != SpatialKind::Conv,
            share_group: None,
            drop_path_rate: 0.0,
            head_dim: DEFAULT_HEAD_DIM,
            token_expansion: 1.0,
        }
    }

    pub fn channel_hidden(&self) -> usize {
        (self.expansion_ratio * self.channels as f64).ceil() as usize
    }

    pub fn token_hidden(&self) -> usize {
        (self.token_expansion * self.tokens as f64).ceil() as usize
    }

    /// `(heads, head_dim)`; narrow layers fall back to a single head.
    pub fn heads(&self) -> (usize, usize) {
        let d = self.head_dim.min(self.channels);
        (self.channels / d, d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.tokens == 0 {
            return Err(config_err(
                "mixing block needs positive channels and tokens",
            ));
        }
        if !(self.expansion_ratio > 0.0) || !(self.token_expansion > 0.0) {
            return Err(config_err("expansion ratios must be positive"));
        }
        if !(0.0..1.0).contains(&self.drop_path_rate) {
            return Err(config_err(format!(
                "drop path rate {} outside [0, 1)",
                self.drop_path_rate
            )));
        }
        if self.spatial_kind == SpatialKind::Attention {
            if self.head_dim == 0 {
                return Err(config_err("head_dim must be positive"));
            }
            let (_, d) = self.heads();
            if !self.channels.is_multiple_of(d) {
                return Err(config_err(format!(
                    "attention width {} not divisible by head dim {d}",
                    self.channels
                )));
            }
        }
        Ok(())
    }
}
