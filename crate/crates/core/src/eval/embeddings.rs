//! Embedding sets and their binary file format.
//!
//! ```text
//! magic       8 bytes "OVITEMBD"
//! version     u32 LE
//! count       u64 LE
//! dim         u32 LE
//! rows        count × dim f32 LE
//! manifest    count × (identity_key, image_id), each u32 length + UTF-8
//! ```

use std::fs;
use std::path::Path;

use crate::data::DatasetIndex;
use crate::error::{Error, Result};
use crate::io::{atomic_write, put_string, ByteReader};
use crate::tensor::Tensor;
use crate::vit::{embed_images, Checkpoint};

pub const EMBEDDING_MAGIC: &[u8; 8] = b"OVITEMBD";
pub const EMBEDDING_VERSION: u32 = 1;

/// Norm tolerance accepted for stored embeddings (32-bit rows included).
pub const UNIT_NORM_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct Embedding {
    pub identity_key: String,
    pub image_id: String,
    pub vector: Vec<f64>,
}

/// Unit-norm embeddings grouped contiguously by identity key.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    entries: Vec<Embedding>,
    dim: usize,
}

impl EmbeddingSet {
    /// Validates norms and dimensions, then stable-sorts by identity key.
    pub fn new(mut entries: Vec<Embedding>) -> Result<Self> {
        let dim = entries
            .first()
            .map(|e| e.vector.len())
            .ok_or_else(|| Error::Contract("embedding set is empty".into()))?;
        for (i, e) in entries.iter().enumerate() {
            if e.vector.len() != dim || dim == 0 {
                return Err(Error::Contract(format!(
                    "embedding {i} has {} dimensions, expected {dim}",
                    e.vector.len()
                )));
            }
            let norm = e.vector.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !((norm - 1.0).abs() <= UNIT_NORM_TOL) {
                return Err(Error::Contract(format!(
                    "embedding {i} ({}) has norm {norm}",
                    e.image_id
                )));
            }
        }
        entries.sort_by(|a, b| a.identity_key.cmp(&b.identity_key));
        Ok(EmbeddingSet { entries, dim })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn entries(&self) -> &[Embedding] {
        &self.entries
    }

    pub fn get(&self, i: usize) -> &Embedding {
        &self.entries[i]
    }

    /// Half-open index ranges of each identity's block, in key order.
    pub fn identity_blocks(&self) -> Vec<std::ops::Range<usize>> {
        let mut blocks = Vec::new();
        let mut start = 0;
        for i in 1..=self.entries.len() {
            if i == self.entries.len()
                || self.entries[i].identity_key != self.entries[start].identity_key
            {
                blocks.push(start..i);
                start = i;
            }
        }
        blocks
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(24 + self.len() * self.dim * 4);
        out.extend_from_slice(EMBEDDING_MAGIC);
        out.extend_from_slice(&EMBEDDING_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.len() as u64).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for e in &self.entries {
            for &v in &e.vector {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        for e in &self.entries {
            put_string(&mut out, &e.identity_key);
            put_string(&mut out, &e.image_id);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "embedding file");
        if r.take(8)? != EMBEDDING_MAGIC {
            return Err(r.malformed("bad magic"));
        }
        let version = r.u32()?;
        if version != EMBEDDING_VERSION {
            return Err(r.malformed(format!("unsupported version {version}")));
        }
        let count = r.u64()? as usize;
        let dim = r.u32()? as usize;
        let total = count
            .checked_mul(dim)
            .filter(|&n| n <= bytes.len() / 4)
            .ok_or_else(|| r.malformed("row data larger than file"))?;
        let values: Vec<f64> = (0..total)
            .map(|_| r.f32().map(f64::from))
            .collect::<Result<_>>()?;
        let mut entries = Vec::with_capacity(count);
        for row in values.chunks(dim.max(1)).take(count) {
            let identity_key = r.string()?;
            let image_id = r.string()?;
            entries.push(Embedding {
                identity_key,
                image_id,
                vector: row.to_vec(),
            });
        }
        if !r.is_empty() {
            return Err(r.malformed("trailing bytes"));
        }
        Self::new(entries)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// One embedding per record, in index order. `image_id` is the record path.
pub fn extract_embeddings(
    checkpoint: &Checkpoint,
    index: &DatasetIndex,
    images: &[Tensor],
) -> Result<EmbeddingSet> {
    let cfg = &checkpoint.config;
    let w = cfg.grid.image_size();
    if images.len() != index.len() {
        return Err(Error::Contract(format!(
            "{} images for {} records",
            images.len(),
            index.len()
        )));
    }
    if let Some(bad) = images.iter().find(|t| t.shape() != [cfg.channels, w, w]) {
        return Err(Error::Config(format!(
            "model `{}` expects {}x{w}x{w} images but the data is {:?}; \
             set the preprocessing size to match the checkpoint",
            cfg.label(),
            cfg.channels,
            bad.shape()
        )));
    }
    let vectors = embed_images(cfg, &checkpoint.params, images)?;
    let entries = index
        .records
        .iter()
        .zip(vectors)
        .map(|(r, vector)| Embedding {
            identity_key: r.identity_key.clone(),
            image_id: r.path.to_string_lossy().into_owned(),
            vector,
        })
        .collect();
    EmbeddingSet::new(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit(angle: f64) -> Vec<f64> {
        vec![angle.cos(), angle.sin()]
    }

    fn entry(key: &str, id: &str, angle: f64) -> Embedding {
        Embedding {
            identity_key: key.into(),
            image_id: id.into(),
            vector: unit(angle),
        }
    }

    #[test]
    fn extraction_is_one_to_one_and_deterministic() {
        use rand::SeedableRng;

        use crate::data::{synth_dataset, SynthSpec};
        use crate::patch::PatchGridSpec;
        use crate::vit::{ModelParams, ViTConfig};

        let ds = synth_dataset(&SynthSpec {
            num_ids: 3,
            imgs_per_id: 2,
            image_size: 8,
            noise_std: 0.0,
            seed: 4,
        })
        .unwrap();
        let config =
            ViTConfig::custom(1, 8, 2, 2.0, PatchGridSpec::new(8, 4, 2).unwrap(), 1).unwrap();
        let params = ModelParams::init(&config, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0));
        let ck = Checkpoint {
            config,
            params,
            prototypes: None,
        };
        let set = extract_embeddings(&ck, &ds.index, &ds.images).unwrap();
        assert_eq!(set.len(), 6);
        assert_eq!(set.dim(), 512);
        // Noise-free images of one identity are duplicates.
        assert_eq!(set.get(0).vector, set.get(1).vector);
        for e in set.entries() {
            let norm = e.vector.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-9);
        }

        let wrong =
            ViTConfig::custom(1, 8, 2, 2.0, PatchGridSpec::new(12, 4, 2).unwrap(), 1).unwrap();
        let ck = Checkpoint {
            params: ModelParams::init(&wrong, &mut rand_chacha::ChaCha8Rng::seed_from_u64(0)),
            config: wrong,
            prototypes: None,
        };
        assert!(matches!(
            extract_embeddings(&ck, &ds.index, &ds.images),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn groups_by_identity() {
        let set = EmbeddingSet::new(vec![
            entry("b", "1", 0.0),
            entry("a", "2", 1.0),
            entry("b", "3", 2.0),
            entry("c", "4", 3.0),
        ])
        .unwrap();
        assert_eq!(set.identity_blocks(), vec![0..1, 1..3, 3..4]);
        assert_eq!(set.get(1).image_id, "1");
    }

    #[test]
    fn rejects_non_unit_and_ragged() {
        let mut bad = entry("a", "x", 0.0);
        bad.vector[0] = 2.0;
        assert!(matches!(
            EmbeddingSet::new(vec![bad]),
            Err(Error::Contract(_))
        ));
        let ragged = Embedding {
            vector: vec![1.0, 0.0, 0.0],
            ..entry("a", "y", 0.0)
        };
        assert!(EmbeddingSet::new(vec![entry("a", "x", 0.0), ragged]).is_err());
        assert!(EmbeddingSet::new(vec![]).is_err());
    }

    #[test]
    fn file_round_trip_is_lossless_at_f32() {
        let set = EmbeddingSet::new(vec![
            entry("s1/left", "img/0.pgm", 0.3),
            entry("s1/left", "img/1.pgm", 1.3),
            entry("s2", "ü.png", -2.0),
        ])
        .unwrap();
        let back = EmbeddingSet::from_bytes(&set.to_bytes()).unwrap();
        assert_eq!(back.to_bytes(), set.to_bytes());
        for (a, b) in set.entries().iter().zip(back.entries()) {
            assert_eq!(
                (&a.identity_key, &a.image_id),
                (&b.identity_key, &b.image_id)
            );
            for (x, y) in a.vector.iter().zip(&b.vector) {
                assert_eq!(*x as f32, *y as f32);
            }
        }
        let bytes = set.to_bytes();
        assert!(EmbeddingSet::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut magic = bytes.clone();
        magic[3] = 0;
        assert!(EmbeddingSet::from_bytes(&magic).is_err());
    }
}
