use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::ViTConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Checkpoint block name for the class prototype matrix.
pub const PROTOTYPES_BLOCK: &str = "margin.prototypes";

const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq)]
enum Init {
    TruncNormal,
    Normal,
    Zeros,
    Ones,
}

/// Names, shapes and initializers of every parameter block, in binding order.
fn layout(cfg: &ViTConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = cfg.width;
    let mut out = vec![
        (
            "patch.weight".to_string(),
            vec![cfg.grid.patch_dim(cfg.channels), d],
            Init::TruncNormal,
        ),
        ("patch.bias".into(), vec![d], Init::Zeros),
        ("pos".into(), vec![cfg.seq_len(), d], Init::Normal),
        ("cls".into(), vec![1, d], Init::Normal),
    ];
    for i in 0..cfg.depth {
        let p = |s: &str| format!("blocks.{i}.{s}");
        out.extend([
            (p("ln1.gamma"), vec![d], Init::Ones),
            (p("ln1.beta"), vec![d], Init::Zeros),
            (p("attn.qkv.weight"), vec![d, 3 * d], Init::TruncNormal),
            (p("attn.qkv.bias"), vec![3 * d], Init::Zeros),
            (p("attn.out.weight"), vec![d, d], Init::TruncNormal),
            (p("attn.out.bias"), vec![d], Init::Zeros),
            (p("ln2.gamma"), vec![d], Init::Ones),
            (p("ln2.beta"), vec![d], Init::Zeros),
            (
                p("mlp.fc1.weight"),
                vec![d, cfg.mlp_hidden],
                Init::TruncNormal,
            ),
            (p("mlp.fc1.bias"), vec![cfg.mlp_hidden], Init::Zeros),
            (
                p("mlp.fc2.weight"),
                vec![cfg.mlp_hidden, d],
                Init::TruncNormal,
            ),
            (p("mlp.fc2.bias"), vec![d], Init::Zeros),
        ]);
    }
    out.extend([
        ("norm.gamma".into(), vec![d], Init::Ones),
        ("norm.beta".into(), vec![d], Init::Zeros),
        (
            "head.weight".into(),
            vec![d, cfg.embed_dim],
            Init::TruncNormal,
        ),
    ]);
    out
}

/// Scalar parameter count of the encoder and embedding head.
pub fn parameter_count(cfg: &ViTConfig) -> usize {
    layout(cfg)
        .iter()
        .map(|(_, shape, _)| shape.iter().product::<usize>())
        .sum()
}

/// Normal(0, std) truncated to ±2·std by rejection.
pub(crate) fn trunc_normal(rng: &mut impl Rng, std: f64) -> f64 {
    let normal = Normal::new(0.0, std).expect("positive std");
    loop {
        let x = normal.sample(rng);
        if x.abs() <= 2.0 * std {
            return x;
        }
    }
}

/// Encoder and head weights as ordered named blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    entries: Vec<(String, Tensor)>,
}

impl ModelParams {
    pub fn init(cfg: &ViTConfig, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, INIT_STD).expect("positive std");
        let entries = layout(cfg)
            .into_iter()
            .map(|(name, shape, init)| {
                let t = match init {
                    Init::TruncNormal => Tensor::from_fn(&shape, |_| trunc_normal(rng, INIT_STD)),
                    Init::Normal => Tensor::from_fn(&shape, |_| normal.sample(rng)),
                    Init::Zeros => Tensor::zeros(&shape),
                    Init::Ones => Tensor::full(&shape, 1.0),
                };
                (name, t)
            })
            .collect();
        ModelParams { entries }
    }

    /// Checks that `entries` match the layout of `cfg` exactly, by name,
    /// order and shape.
    pub fn from_entries(cfg: &ViTConfig, entries: Vec<(String, Tensor)>) -> Result<Self> {
        let expected = layout(cfg);
        if expected.len() != entries.len() {
            return Err(Error::Config(format!(
                "expected {} parameter blocks, found {}",
                expected.len(),
                entries.len()
            )));
        }
        for ((name, shape, _), (got_name, t)) in expected.iter().zip(&entries) {
            if name != got_name || shape.as_slice() != t.shape() {
                return Err(Error::Config(format!(
                    "parameter block `{got_name}` {:?} does not match expected `{name}` {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(ModelParams { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn into_entries(self) -> Vec<(String, Tensor)> {
        self.entries
    }
}
