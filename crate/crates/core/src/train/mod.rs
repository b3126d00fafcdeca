//! AdamW training loop with linear warmup and per-epoch checkpoints.

mod optim;

pub use optim::{adamw_step, clip_grad_norm, lr_schedule, OptimizerState};

use std::collections::BTreeSet;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::margin::{cosface_loss, init_prototypes, sample_classes, MarginSpec};
use crate::tensor::Tensor;
use crate::vit::{
    forward_embeddings, stack_patches, Checkpoint, ModelParams, ModelVars, ViTConfig, EMBED_DIM,
    PROTOTYPES_BLOCK,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Joint gradient-norm cap. Off when `None`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 0.001,
            weight_decay: 0.1,
            epochs: 100,
            warmup_epochs: 10,
            batch_size: 32,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validated(self) -> Result<Self> {
        let bad = |field: &str, why: String| Err(Error::Config(format!("train.{field}: {why}")));
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad("base_lr", format!("must be positive, got {}", self.base_lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(
                "weight_decay",
                format!("must be >= 0, got {}", self.weight_decay),
            );
        }
        if self.base_lr * self.weight_decay >= 1.0 {
            return bad(
                "weight_decay",
                "base_lr · weight_decay must be below 1".to_string(),
            );
        }
        if self.warmup_epochs > self.epochs {
            return bad(
                "warmup_epochs",
                format!("{} exceeds epochs {}", self.warmup_epochs, self.epochs),
            );
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive".to_string());
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(name, format!("must lie in [0, 1), got {b}"));
            }
        }
        if !(self.eps > 0.0) {
            return bad("eps", format!("must be positive, got {}", self.eps));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad("grad_clip", format!("must be positive, got {c}"));
            }
        }
        Ok(self)
    }
}

/// Preprocessed images with dense identity labels `0..num_classes`.
#[derive(Clone, Debug)]
pub struct TrainSet {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl TrainSet {
    pub fn new(images: Vec<Tensor>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Contract(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Contract(format!(
                "label {l} out of range for {num_classes} classes"
            )));
        }
        Ok(TrainSet {
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn distinct_labels(&self) -> usize {
        self.labels.iter().collect::<BTreeSet<_>>().len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
}

/// Passed to the epoch observer after each epoch.
pub struct EpochEnd<'a> {
    pub record: EpochRecord,
    pub checkpoint: &'a Checkpoint,
    /// True when this epoch has the lowest mean loss so far.
    pub is_best: bool,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub best: Option<(EpochRecord, Checkpoint)>,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

// Independent ChaCha streams, so that e.g. changing the sample rate does not
// perturb initialization or batch order.
const INIT_STREAM: u64 = 0;
const SHUFFLE_STREAM: u64 = 1;
const SAMPLE_STREAM: u64 = 2;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Model and prototype initialization for a seed, as used at step 0.
pub fn initial_state(model: &ViTConfig, num_classes: usize, seed: u64) -> (ModelParams, Tensor) {
    let mut rng = stream(seed, INIT_STREAM);
    let params = ModelParams::init(model, &mut rng);
    let prototypes = init_prototypes(num_classes, EMBED_DIM, &mut rng);
    (params, prototypes)
}

pub fn steps_per_epoch(samples: usize, batch_size: usize) -> usize {
    samples.div_ceil(batch_size)
}

pub fn train(
    model: &ViTConfig,
    cfg: &TrainConfig,
    margin: &MarginSpec,
    data: &TrainSet,
) -> Result<TrainOutcome> {
    train_with(model, cfg, margin, data, |_| Ok(()))
}

/// Like [`train`], calling `on_epoch` after every epoch.
pub fn train_with(
    model: &ViTConfig,
    cfg: &TrainConfig,
    margin: &MarginSpec,
    data: &TrainSet,
    mut on_epoch: impl FnMut(EpochEnd<'_>) -> Result<()>,
) -> Result<TrainOutcome> {
    let model = model.validated()?;
    let cfg = cfg.validated()?;
    let margin = margin.validated()?;
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if data.distinct_labels() < 2 {
        return Err(Error::Config(
            "training needs at least 2 identities; impostor pairs are impossible otherwise".into(),
        ));
    }

    let (params, prototypes) = initial_state(&model, data.num_classes, cfg.seed);
    let mut named: Vec<(String, Tensor)> = params.into_entries();
    named.push((PROTOTYPES_BLOCK.to_string(), prototypes));
    let mut state = OptimizerState::new(named.iter().map(|(_, t)| t));

    let mut shuffle_rng = stream(cfg.seed, SHUFFLE_STREAM);
    let mut sample_rng = stream(cfg.seed, SAMPLE_STREAM);
    let per_epoch = steps_per_epoch(data.len(), cfg.batch_size);

    let mut steps = Vec::with_capacity(cfg.epochs * per_epoch);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(EpochRecord, Checkpoint)> = None;
    let mut order: Vec<usize> = (0..data.len()).collect();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let step = steps.len();
            let lr = lr_schedule(step, per_epoch, &cfg);
            let labels: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();
            let subset = sample_classes(
                data.num_classes,
                &labels,
                margin.sample_rate,
                &mut sample_rng,
            )?;

            let mut tape = Tape::new();
            let leaves: Vec<_> = named.iter().map(|(_, t)| tape.param(t.clone())).collect();
            let (proto_var, model_leaves) = leaves.split_last().expect("prototypes block");
            let vars = ModelVars::from_vars(model_leaves);
            let patches = tape.constant(stack_patches(
                batch.iter().map(|&i| &data.images[i]),
                &model.grid,
            )?);
            let emb = forward_embeddings(&mut tape, &model, &vars, patches, batch.len())?;
            let loss_var = cosface_loss(&mut tape, emb, &labels, *proto_var, &margin, &subset)?;
            let loss = tape.value(loss_var).data()[0];
            tape.backward(loss_var)?;

            let mut grads: Vec<Tensor> = leaves
                .iter()
                .zip(&named)
                .map(|(&v, (_, t))| {
                    tape.grad(v)
                        .cloned()
                        .unwrap_or_else(|| Tensor::zeros(t.shape()))
                })
                .collect();
            drop(tape);
            if let Some(max_norm) = cfg.grad_clip {
                clip_grad_norm(&mut grads, max_norm);
            }
            adamw_step(&mut named, &grads, &mut state, lr, &cfg)?;

            total += loss;
            steps.push(StepRecord {
                step,
                epoch,
                lr,
                loss,
            });
        }

        let record = EpochRecord {
            epoch,
            mean_loss: total / per_epoch as f64,
        };
        epochs.push(record);
        let checkpoint = snapshot(&model, &named)?;
        let is_best = best
            .as_ref()
            .is_none_or(|(b, _)| record.mean_loss < b.mean_loss);
        on_epoch(EpochEnd {
            record,
            checkpoint: &checkpoint,
            is_best,
        })?;
        if is_best {
            best = Some((record, checkpoint));
        }
    }

    Ok(TrainOutcome {
        checkpoint: snapshot(&model, &named)?,
        best,
        steps,
        epochs,
    })
}

fn snapshot(model: &ViTConfig, named: &[(String, Tensor)]) -> Result<Checkpoint> {
    let (protos, entries) = named.split_last().expect("prototypes block");
    Ok(Checkpoint {
        config: *model,
        params: ModelParams::from_entries(model, entries.to_vec())?,
        prototypes: Some(protos.1.clone()),
    })
}

/// Training log as CSV with columns `step,epoch,lr,loss`.
pub fn log_csv(steps: &[StepRecord]) -> String {
    let mut out = String::from("step,epoch,lr,loss\n");
    for r in steps {
        writeln!(out, "{},{},{:e},{:.12e}", r.step, r.epoch, r.lr, r.loss).unwrap();
    }
    out
}
