//! Binary checkpoint format.
//!
//! ```text
//! magic            8 bytes  "OVITCKPT"
//! version          u32 LE
//! config           10 × u64 LE: variant, depth, width, heads, mlp_hidden,
//!                  embed_dim, channels, image_size, patch_size, stride
//! block count      u32 LE
//! per block        name length u32, UTF-8 name, rank u32, extents u64 × rank,
//!                  values f64 LE × product(extents)
//! ```
//!
//! Blocks appear in model order. An optional trailing block named
//! `margin.prototypes` holds the class prototypes used in training.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use super::{ModelParams, Variant, ViTConfig, PROTOTYPES_BLOCK};
use crate::error::{Error, Result};
use crate::io::{atomic_write, ByteReader};
use crate::patch::PatchGridSpec;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"OVITCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ViTConfig,
    pub params: ModelParams,
    pub prototypes: Option<Tensor>,
}

fn write_block(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut out = Vec::with_capacity(64 + 8 * self.params.num_scalars());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for v in [
            c.variant.code(),
            c.depth as u64,
            c.width as u64,
            c.heads as u64,
            c.mlp_hidden as u64,
            c.embed_dim as u64,
            c.channels as u64,
            c.grid.image_size() as u64,
            c.grid.patch_size() as u64,
            c.grid.stride() as u64,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let blocks = self.params.len() + usize::from(self.prototypes.is_some());
        out.extend_from_slice(&(blocks as u32).to_le_bytes());
        for (name, t) in self.params.iter() {
            write_block(&mut out, name, t);
        }
        if let Some(p) = &self.prototypes {
            write_block(&mut out, PROTOTYPES_BLOCK, p);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes, "checkpoint");
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(r.malformed("bad magic"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(r.malformed(format!("unsupported version {version}")));
        }
        let mut ints = [0usize; 10];
        let variant = Variant::from_code(r.u64()?)?;
        for slot in ints.iter_mut().skip(1) {
            *slot = r.u64()? as usize;
        }
        let grid = PatchGridSpec::new(ints[7], ints[8], ints[9])?;
        let config = ViTConfig {
            variant,
            depth: ints[1],
            width: ints[2],
            heads: ints[3],
            mlp_hidden: ints[4],
            embed_dim: ints[5],
            channels: ints[6],
            grid,
        }
        .validated()?;

        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count);
        let mut prototypes = None;
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| r.malformed("block name is not UTF-8"))?;
            let rank = r.u32()? as usize;
            let shape: Vec<usize> = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<_>>()?;
            let numel: usize = shape.iter().product();
            let raw = r.take(
                numel
                    .checked_mul(8)
                    .ok_or_else(|| r.malformed("overflow"))?,
            )?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let t = Tensor::new(shape, data)?;
            if name == PROTOTYPES_BLOCK {
                prototypes = Some(t);
            } else {
                entries.push((name, t));
            }
        }
        if !r.is_empty() {
            return Err(r.malformed("trailing bytes"));
        }
        let params = ModelParams::from_entries(&config, entries)?;
        Ok(Checkpoint {
            config,
            params,
            prototypes,
        })
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(&self.to_bytes())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)
            .map_err(|e| Error::io("<reader>", e))?;
        Self::from_bytes(&buf)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
