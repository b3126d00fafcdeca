//! Run configuration, stored as TOML.
//!
//! Relative paths are resolved against the directory holding the config
//! file. Every section rejects unknown keys.

use std::fmt;
use std::path::{Path, PathBuf};

use ovit_core::data::{LayoutConfig, SynthSpec};
use ovit_core::margin::MarginSpec;
use ovit_core::train::TrainConfig;
use ovit_core::{PatchGridSpec, Variant, ViTConfig};
use serde::{Deserialize, Serialize};

pub const CONFIG_VERSION: u32 = 1;

/// A bad config value or command-line argument. Exits with status 1.
#[derive(Debug)]
pub struct Invalid(pub String);

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

/// Keeps the `section.key: reason` text of core config errors at the front.
fn from_core(e: ovit_core::Error) -> Invalid {
    match e {
        ovit_core::Error::Config(msg) => Invalid(msg),
        other => Invalid(other.to_string()),
    }
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, Invalid> {
    Err(Invalid(msg.into()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    /// Parent of the per-model run directories.
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    pub data: DataSection,
    pub model: ModelSection,
    pub grid: GridSection,
    #[serde(default)]
    pub loss: MarginSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthSection>,
    #[serde(skip)]
    base_dir: PathBuf,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    pub root: PathBuf,
    /// Dataset name used in report rows.
    pub name: String,
    #[serde(default = "default_channels")]
    pub channels: usize,
    #[serde(default = "default_extensions")]
    pub extensions: Vec<String>,
}

fn default_channels() -> usize {
    1
}

fn default_extensions() -> Vec<String> {
    LayoutConfig::default().extensions
}

/// `variant` is one of T, S, B, L or `custom`. The remaining fields apply to
/// `custom` only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub variant: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heads: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mlp_ratio: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub image_size: usize,
    pub patch_size: usize,
    pub stride: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointChoice {
    Last,
    Best,
}

impl CheckpointChoice {
    pub fn file_name(self) -> &'static str {
        match self {
            CheckpointChoice::Last => "last.ckpt",
            CheckpointChoice::Best => "best.ckpt",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub repeats: usize,
    pub impostor_ratio: f64,
    /// Repeat `r` samples impostors with seed `seed + r`.
    pub seed: u64,
    pub checkpoint: CheckpointChoice,
    /// Images to embed; defaults to `data.root`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_root: Option<PathBuf>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            repeats: 5,
            impostor_ratio: ovit_core::eval::DEFAULT_IMPOSTOR_RATIO,
            seed: 0,
            checkpoint: CheckpointChoice::Last,
            data_root: None,
        }
    }
}

/// Synthetic data written by `ovit synth`; the image size comes from `grid`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSection {
    pub num_ids: usize,
    pub imgs_per_id: usize,
    pub noise_std: f64,
    #[serde(default)]
    pub seed: u64,
}

/// Command-line replacements for config values.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub variant: Option<String>,
    pub patch: Option<usize>,
    pub stride: Option<usize>,
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self, Invalid> {
        let mut cfg: RunConfig =
            toml::from_str(text).map_err(|e| Invalid(format!("config: {e}")))?;
        if cfg.version != CONFIG_VERSION {
            return invalid(format!(
                "version: unsupported config version {}, expected {CONFIG_VERSION}",
                cfg.version
            ));
        }
        cfg.base_dir = base_dir.to_path_buf();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, Invalid> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Invalid(format!("cannot read config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        Self::parse(&text, base)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = &o.variant {
            self.model.variant = v.clone();
            if !v.eq_ignore_ascii_case("custom") && !v.eq_ignore_ascii_case("c") {
                self.model.depth = None;
                self.model.width = None;
                self.model.heads = None;
                self.model.mlp_ratio = None;
            }
        }
        if let Some(p) = o.patch {
            self.grid.patch_size = p;
        }
        if let Some(s) = o.stride {
            self.grid.stride = s;
        }
        if let Some(out) = &o.out_dir {
            self.out_dir = out.clone();
        }
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn grid(&self) -> Result<PatchGridSpec, Invalid> {
        let g = self.grid;
        PatchGridSpec::new(g.image_size, g.patch_size, g.stride)
            .map_err(|e| Invalid(format!("grid: {e}")))
    }

    pub fn vit(&self) -> Result<ViTConfig, Invalid> {
        let grid = self.grid()?;
        let m = &self.model;
        let variant: Variant = m
            .variant
            .parse()
            .map_err(|e| Invalid(format!("model.variant: {e}")))?;
        let channels = self.data.channels;
        let built = if variant == Variant::Custom {
            let need = |v: Option<usize>, key: &str| {
                v.ok_or_else(|| Invalid(format!("model.{key}: required when variant = \"custom\"")))
            };
            ViTConfig::custom(
                need(m.depth, "depth")?,
                need(m.width, "width")?,
                need(m.heads, "heads")?,
                m.mlp_ratio.unwrap_or(4.0),
                grid,
                channels,
            )
        } else {
            let extra = [
                ("depth", m.depth.is_some()),
                ("width", m.width.is_some()),
                ("heads", m.heads.is_some()),
                ("mlp_ratio", m.mlp_ratio.is_some()),
            ];
            if let Some((key, _)) = extra.iter().find(|(_, set)| *set) {
                return invalid(format!(
                    "model.{key}: only allowed when variant = \"custom\""
                ));
            }
            ViTConfig::preset(variant, grid, channels)
        };
        built.map_err(|e| Invalid(format!("model: {e}")))
    }

    pub fn train_config(&self) -> Result<TrainConfig, Invalid> {
        self.train.validated().map_err(from_core)
    }

    pub fn margin(&self) -> Result<MarginSpec, Invalid> {
        self.loss.validated().map_err(from_core)
    }

    pub fn layout(&self) -> Result<LayoutConfig, Invalid> {
        if !matches!(self.data.channels, 1 | 3) {
            return invalid(format!(
                "data.channels: must be 1 or 3, got {}",
                self.data.channels
            ));
        }
        if self.data.extensions.is_empty() {
            return invalid("data.extensions: list at least one extension");
        }
        Ok(LayoutConfig {
            image_size: self.grid.image_size,
            channels: self.data.channels,
            extensions: self
                .data
                .extensions
                .iter()
                .map(|e| e.to_ascii_lowercase())
                .collect(),
        })
    }

    pub fn synth_spec(&self) -> Result<SynthSpec, Invalid> {
        let s = self
            .synth
            .ok_or_else(|| Invalid("synth: section missing from config".into()))?;
        if self.data.channels != 1 {
            return invalid("data.channels: synthetic data is single-channel");
        }
        SynthSpec {
            num_ids: s.num_ids,
            imgs_per_id: s.imgs_per_id,
            image_size: self.grid.image_size,
            noise_std: s.noise_std,
            seed: s.seed,
        }
        .validated()
        .map_err(|e| Invalid(format!("synth: {e}")))
    }

    pub fn eval_settings(&self) -> Result<&EvalSection, Invalid> {
        let e = &self.eval;
        if e.repeats == 0 {
            return invalid("eval.repeats: must be at least 1");
        }
        if !(e.impostor_ratio > 0.0 && e.impostor_ratio.is_finite()) {
            return invalid(format!(
                "eval.impostor_ratio: must be positive, got {}",
                e.impostor_ratio
            ));
        }
        Ok(e)
    }

    /// Checks every section without touching the filesystem.
    pub fn validate(&self) -> Result<(), Invalid> {
        self.vit()?;
        self.train_config()?;
        self.margin()?;
        self.layout()?;
        self.eval_settings()?;
        if self.synth.is_some() {
            self.synth_spec()?;
        }
        if self.data.name.is_empty() {
            return invalid("data.name: must not be empty");
        }
        Ok(())
    }

    pub fn data_root(&self) -> PathBuf {
        self.resolve(&self.data.root)
    }

    pub fn eval_data_root(&self) -> PathBuf {
        self.resolve(self.eval.data_root.as_ref().unwrap_or(&self.data.root))
    }

    /// `out_dir/<model label>`.
    pub fn run_dir(&self) -> Result<PathBuf, Invalid> {
        Ok(self.resolve(&self.out_dir).join(self.vit()?.label()))
    }
}
