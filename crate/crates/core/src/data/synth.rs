//! Procedural identities for desk-scale experiments.
//!
//! Identity `k` is subject `k / 2`, left side for even `k` and right for odd,
//! so a synthetic tree exercises the same two-level layout as real data.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::dataset::{identity_key, DatasetIndex, Record, Side};
use super::image::{encode_pgm16, quantize16, to_tensor, RawImage};
use crate::error::{Error, Result};
use crate::io::atomic_write;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthSpec {
    pub num_ids: usize,
    pub imgs_per_id: usize,
    pub image_size: usize,
    pub noise_std: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validated(self) -> Result<Self> {
        if self.num_ids < 2 {
            return Err(Error::Config(format!(
                "synthetic data needs at least 2 identities, got {}",
                self.num_ids
            )));
        }
        if self.imgs_per_id == 0 || self.image_size == 0 {
            return Err(Error::Config(
                "images per identity and image size must be positive".into(),
            ));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::Config(format!(
                "noise_std must be finite and >= 0, got {}",
                self.noise_std
            )));
        }
        Ok(self)
    }
}

pub struct SynthDataset {
    /// Records with paths relative to the dataset root.
    pub index: DatasetIndex,
    /// Gray pixels in `[0, 1]`, already quantized to 16 bits.
    pub raw: Vec<RawImage>,
    /// Normalized `[1, W, W]` tensors, identical to what loading the written
    /// tree produces.
    pub images: Vec<Tensor>,
}

pub fn subject_and_side(k: usize) -> (String, Side) {
    let side = if k % 2 == 0 { Side::Left } else { Side::Right };
    (format!("s{:03}", k / 2), side)
}

/// Noise-free template of every identity: an oriented sinusoidal grating plus
/// three Gaussian blobs, clamped to `[0, 1]`.
pub fn templates(spec: &SynthSpec) -> Result<Vec<RawImage>> {
    let spec = spec.validated()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let w = spec.image_size;
    let wf = w as f64;
    (0..spec.num_ids)
        .map(|k| {
            let theta = PI * (k as f64 + rng.random_range(0.0..0.5)) / spec.num_ids as f64;
            let freq = rng.random_range(1.5..4.5);
            let phase = rng.random_range(0.0..2.0 * PI);
            let blobs: Vec<(f64, f64, f64, f64)> = (0..3)
                .map(|_| {
                    let cx = rng.random_range(0.15..0.85) * wf;
                    let cy = rng.random_range(0.15..0.85) * wf;
                    let r = rng.random_range(0.06..0.15) * wf;
                    let amp = if rng.random_bool(0.5) { 0.3 } else { -0.3 };
                    (cx, cy, r, amp)
                })
                .collect();
            let (c, s) = (theta.cos(), theta.sin());
            let data = (0..w * w)
                .map(|i| {
                    let (x, y) = ((i % w) as f64 + 0.5, (i / w) as f64 + 0.5);
                    let mut v = 0.5 + 0.2 * (2.0 * PI * freq * (x * c + y * s) / wf + phase).sin();
                    for &(cx, cy, r, amp) in &blobs {
                        let d2 = (x - cx).powi(2) + (y - cy).powi(2);
                        v += amp * (-d2 / (2.0 * r * r)).exp();
                    }
                    v.clamp(0.0, 1.0)
                })
                .collect();
            RawImage::new(w, w, 1, data)
        })
        .collect()
}

/// Templates plus clamped Gaussian pixel noise, quantized to 16 bits.
pub fn synth_dataset(spec: &SynthSpec) -> Result<SynthDataset> {
    let spec = spec.validated()?;
    let bases = templates(&spec)?;
    let mut noise_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    noise_rng.set_stream(1);
    let normal = Normal::new(0.0, spec.noise_std).expect("validated std");

    let mut records = Vec::new();
    let mut raw = Vec::new();
    for (k, base) in bases.iter().enumerate() {
        let (subject, side) = subject_and_side(k);
        for j in 0..spec.imgs_per_id {
            let data = base
                .data
                .iter()
                .map(|&v| {
                    let noisy = (v + normal.sample(&mut noise_rng)).clamp(0.0, 1.0);
                    // Match the decoder exactly so disk round trips are bitwise.
                    quantize16(noisy) as f64 * (1.0 / 65535.0)
                })
                .collect();
            raw.push(RawImage::new(base.width, base.height, 1, data)?);
            records.push(Record {
                identity_key: identity_key(&subject, side),
                subject_id: subject.clone(),
                side,
                path: Path::new(&subject)
                    .join(side.as_str())
                    .join(format!("{j:03}.pgm")),
            });
        }
    }
    let images = raw
        .iter()
        .map(|r| to_tensor(r, spec.image_size, 1))
        .collect::<Result<_>>()?;
    // Generation order already matches the index's sort order.
    let index = DatasetIndex::new(records);
    Ok(SynthDataset { index, raw, images })
}

/// Generates the dataset and writes it under `root` as 16-bit PGM files.
pub fn write_synth_dataset(root: &Path, spec: &SynthSpec) -> Result<SynthDataset> {
    let mut ds = synth_dataset(spec)?;
    for (record, img) in ds.index.records.iter_mut().zip(&ds.raw) {
        let path = root.join(&record.path);
        atomic_write(&path, &encode_pgm16(img))?;
        record.path = path;
    }
    Ok(ds)
}
