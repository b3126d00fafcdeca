//! Pre-norm transformer encoder over patch tokens with a unit-norm
//! embedding head.

mod checkpoint;
mod encoder;
pub(crate) mod params;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use encoder::{
    attention, embed_images, encoder_forward, encoder_forward_traced, extract_embedding,
    forward_embeddings, stack_patches, BlockVars, ModelVars,
};
pub use params::{parameter_count, ModelParams, PROTOTYPES_BLOCK};

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::patch::PatchGridSpec;

/// Width of the matching embedding.
pub const EMBED_DIM: usize = 512;

pub const LAYER_NORM_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Tiny,
    Small,
    Base,
    Large,
    /// Non-preset dimensions, used for desk-scale experiments.
    Custom,
}

impl Variant {
    pub fn letter(self) -> &'static str {
        match self {
            Variant::Tiny => "T",
            Variant::Small => "S",
            Variant::Base => "B",
            Variant::Large => "L",
            Variant::Custom => "C",
        }
    }

    fn code(self) -> u64 {
        match self {
            Variant::Tiny => 0,
            Variant::Small => 1,
            Variant::Base => 2,
            Variant::Large => 3,
            Variant::Custom => 4,
        }
    }

    fn from_code(code: u64) -> Result<Self> {
        Ok(match code {
            0 => Variant::Tiny,
            1 => Variant::Small,
            2 => Variant::Base,
            3 => Variant::Large,
            4 => Variant::Custom,
            c => return Err(Error::Config(format!("unknown variant code {c}"))),
        })
    }

    /// `(depth, width, heads)` for the four presets.
    pub fn dims(self) -> Option<(usize, usize, usize)> {
        match self {
            Variant::Tiny => Some((12, 192, 3)),
            Variant::Small => Some((12, 384, 6)),
            Variant::Base => Some((12, 768, 12)),
            Variant::Large => Some((24, 1024, 16)),
            Variant::Custom => None,
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "T" | "TINY" | "VIT-T" | "VIT_T" => Ok(Variant::Tiny),
            "S" | "SMALL" | "VIT-S" | "VIT_S" => Ok(Variant::Small),
            "B" | "BASE" | "VIT-B" | "VIT_B" => Ok(Variant::Base),
            "L" | "LARGE" | "VIT-L" | "VIT_L" => Ok(Variant::Large),
            "C" | "CUSTOM" => Ok(Variant::Custom),
            _ => Err(Error::Config(format!("unknown ViT variant `{s}`"))),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.letter())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ViTConfig {
    pub variant: Variant,
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub embed_dim: usize,
    pub channels: usize,
    pub grid: PatchGridSpec,
}

impl ViTConfig {
    /// Preset dimensions bound to a grid. `mlp_ratio` is 4 for every preset.
    pub fn preset(variant: Variant, grid: PatchGridSpec, channels: usize) -> Result<Self> {
        let (depth, width, heads) = variant.dims().ok_or_else(|| {
            Error::Config("the custom variant has no preset; use ViTConfig::custom".into())
        })?;
        Self {
            variant,
            depth,
            width,
            heads,
            mlp_hidden: 4 * width,
            embed_dim: EMBED_DIM,
            channels,
            grid,
        }
        .validated()
    }

    pub fn custom(
        depth: usize,
        width: usize,
        heads: usize,
        mlp_ratio: f64,
        grid: PatchGridSpec,
        channels: usize,
    ) -> Result<Self> {
        if !(mlp_ratio > 0.0) {
            return Err(Error::Config(format!(
                "mlp_ratio must be positive, got {mlp_ratio}"
            )));
        }
        Self {
            variant: Variant::Custom,
            depth,
            width,
            heads,
            mlp_hidden: (width as f64 * mlp_ratio).round() as usize,
            embed_dim: EMBED_DIM,
            channels,
            grid,
        }
        .validated()
    }

    pub fn validated(self) -> Result<Self> {
        if self.width == 0 || self.heads == 0 || self.mlp_hidden == 0 {
            return Err(Error::Config(
                "width, heads and MLP hidden size must be positive".into(),
            ));
        }
        if self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.embed_dim != EMBED_DIM {
            return Err(Error::Config(format!(
                "embedding dimension must be {EMBED_DIM}, got {}",
                self.embed_dim
            )));
        }
        if !matches!(self.channels, 1 | 3) {
            return Err(Error::Config(format!(
                "images must have 1 or 3 channels, got {}",
                self.channels
            )));
        }
        if let Some((d, w, h)) = self.variant.dims() {
            if (d, w, h) != (self.depth, self.width, self.heads) {
                return Err(Error::Config(format!(
                    "ViT-{} must be depth {d}, width {w}, heads {h}",
                    self.variant
                )));
            }
        }
        Ok(self)
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn mlp_ratio(&self) -> f64 {
        self.mlp_hidden as f64 / self.width as f64
    }

    /// Tokens per sequence including the class token.
    pub fn seq_len(&self) -> usize {
        self.grid.num_patches() + 1
    }

    /// `ViT_{variant}_p{P}_s{S}`.
    pub fn label(&self) -> String {
        format!("ViT_{}_{}", self.variant, self.grid.label())
    }
}

/// Preset for a variant name at the given grid, single channel.
pub fn config_for(variant: &str, grid: PatchGridSpec) -> Result<ViTConfig> {
    ViTConfig::preset(variant.parse()?, grid, 1)
}
