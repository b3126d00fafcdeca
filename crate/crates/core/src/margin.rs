//! Large-margin cosine softmax over identity prototypes, with the softmax
//! denominator restricted to a sampled subset of classes.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vit::params::trunc_normal;

pub const DEFAULT_SCALE: f64 = 64.0;
pub const DEFAULT_MARGIN: f64 = 0.35;
pub const DEFAULT_SAMPLE_RATE: f64 = 0.3;

const UNIT_NORM_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MarginSpec {
    pub scale: f64,
    pub margin: f64,
    pub sample_rate: f64,
}

impl Default for MarginSpec {
    fn default() -> Self {
        MarginSpec {
            scale: DEFAULT_SCALE,
            margin: DEFAULT_MARGIN,
            sample_rate: DEFAULT_SAMPLE_RATE,
        }
    }
}

impl MarginSpec {
    pub fn new(scale: f64, margin: f64, sample_rate: f64) -> Result<Self> {
        MarginSpec {
            scale,
            margin,
            sample_rate,
        }
        .validated()
    }

    pub fn validated(self) -> Result<Self> {
        if !(self.scale > 0.0) || !self.scale.is_finite() {
            return Err(Error::Config(format!(
                "loss.scale must be positive, got {}",
                self.scale
            )));
        }
        if !(self.margin >= 0.0) || !self.margin.is_finite() {
            return Err(Error::Config(format!(
                "loss.margin must be non-negative, got {}",
                self.margin
            )));
        }
        check_rate(self.sample_rate)?;
        Ok(self)
    }
}

fn check_rate(rate: f64) -> Result<()> {
    if rate > 0.0 && rate <= 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "loss.sample_rate must lie in (0, 1], got {rate}"
        )))
    }
}

/// Class prototype matrix, `num_classes × embed_dim`.
pub fn init_prototypes(num_classes: usize, dim: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(&[num_classes, dim], |_| trunc_normal(rng, 0.02))
}

/// Sorted set of class indices taking part in one loss evaluation.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassSubset {
    classes: Vec<usize>,
}

impl ClassSubset {
    pub fn all(num_classes: usize) -> Self {
        ClassSubset {
            classes: (0..num_classes).collect(),
        }
    }

    /// Deduplicates and sorts.
    pub fn from_classes(classes: impl IntoIterator<Item = usize>) -> Self {
        let set: BTreeSet<usize> = classes.into_iter().collect();
        ClassSubset {
            classes: set.into_iter().collect(),
        }
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn contains(&self, class: usize) -> bool {
        self.classes.binary_search(&class).is_ok()
    }

    /// Column of `class` within the subset's logits.
    pub fn position(&self, class: usize) -> Option<usize> {
        self.classes.binary_search(&class).ok()
    }
}

/// Every batch label plus uniformly drawn negatives (without replacement),
/// for a total of `max(⌈rate·num_classes⌉, distinct positives)` classes.
pub fn sample_classes(
    num_classes: usize,
    batch_labels: &[usize],
    rate: f64,
    rng: &mut impl Rng,
) -> Result<ClassSubset> {
    if batch_labels.is_empty() {
        return Err(Error::Contract(
            "cannot sample classes for an empty batch".into(),
        ));
    }
    check_rate(rate)?;
    let positives: BTreeSet<usize> = batch_labels.iter().copied().collect();
    if let Some(&bad) = positives.iter().find(|&&c| c >= num_classes) {
        return Err(Error::Contract(format!(
            "label {bad} out of range for {num_classes} classes"
        )));
    }
    // Guard against 0.3·1000 landing a hair above 300.
    let quota = ((rate * num_classes as f64) - 1e-9).ceil() as usize;
    let target = quota.max(positives.len()).min(num_classes);
    let pool: Vec<usize> = (0..num_classes)
        .filter(|c| !positives.contains(c))
        .collect();
    let wanted = target - positives.len();
    let negatives = rand::seq::index::sample(rng, pool.len(), wanted)
        .into_iter()
        .map(|i| pool[i]);
    Ok(ClassSubset::from_classes(
        positives.iter().copied().chain(negatives),
    ))
}

/// Mean CosFace loss over the batch.
///
/// For each row, the logits are `s·cos θ_j` over the subset's unit-normalized
/// prototypes, with `s·m` subtracted from the target class, followed by
/// softmax cross-entropy. `embeddings` must already be unit rows.
pub fn cosface_loss(
    tape: &mut Tape,
    embeddings: Var,
    labels: &[usize],
    prototypes: Var,
    spec: &MarginSpec,
    subset: &ClassSubset,
) -> Result<Var> {
    let (batch, dim) = tape.value(embeddings).dims2("cosface_loss")?;
    let (num_classes, proto_dim) = tape.value(prototypes).dims2("cosface_loss")?;
    if dim != proto_dim {
        return Err(Error::dim(
            "cosface_loss",
            format!("embedding width {dim} but prototype width {proto_dim}"),
        ));
    }
    if labels.len() != batch {
        return Err(Error::dim(
            "cosface_loss",
            format!("{} labels for {batch} embeddings", labels.len()),
        ));
    }
    for r in 0..batch {
        let norm: f64 = tape
            .value(embeddings)
            .row(r)
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::Contract(format!(
                "embedding row {r} has norm {norm}, expected 1"
            )));
        }
    }
    if let Some(&bad) = subset.classes().iter().find(|&&c| c >= num_classes) {
        return Err(Error::Contract(format!(
            "subset class {bad} out of range for {num_classes} prototypes"
        )));
    }
    let targets: Vec<usize> = labels
        .iter()
        .map(|&l| {
            subset.position(l).ok_or_else(|| {
                Error::Contract(format!("label {l} is not in the sampled class subset"))
            })
        })
        .collect::<Result<_>>()?;

    let k = subset.len();
    let chosen = tape.gather_rows(prototypes, subset.classes())?;
    let unit = tape.l2_normalize_rows(chosen)?;
    let unit_t = tape.transpose(unit)?;
    let cosines = tape.matmul(embeddings, unit_t)?;
    let scaled = tape.scale(cosines, spec.scale);
    let logits = if spec.margin > 0.0 {
        let mut shift = Tensor::zeros(&[batch, k]);
        for (r, &t) in targets.iter().enumerate() {
            shift.data_mut()[r * k + t] = -spec.scale * spec.margin;
        }
        let shift = tape.constant(shift);
        tape.add(scaled, shift)?
    } else {
        scaled
    };
    tape.cross_entropy(logits, &targets)
}
