//! Patch grids and tokenization.
//!
//! A grid places `P×P` windows with top-left corners at multiples of the
//! stride `S` over a `W×W` image. Windows are never truncated, so
//! `(W − P)` must be a multiple of `S`, giving `((W − P)/S + 1)²` tokens.
//! Stride equal to the patch side partitions the image; smaller strides make
//! neighbouring windows share pixels.

use std::fmt;
use std::str::FromStr;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PatchGridSpec {
    image_size: usize,
    patch_size: usize,
    stride: usize,
}

impl PatchGridSpec {
    pub fn new(image_size: usize, patch_size: usize, stride: usize) -> Result<Self> {
        let fail = |reason: String| Error::Grid {
            image_size,
            patch_size,
            stride,
            reason,
        };
        if patch_size == 0 || stride == 0 {
            return Err(fail("patch size and stride must be at least 1".into()));
        }
        if patch_size > image_size {
            return Err(fail("patch size exceeds image size".into()));
        }
        if stride > patch_size {
            return Err(fail(
                "stride exceeds patch size, leaving pixels between patches".into(),
            ));
        }
        if (image_size - patch_size) % stride != 0 {
            return Err(fail(format!(
                "(W - P) = {} is not divisible by S = {stride}; patches would be truncated",
                image_size - patch_size
            )));
        }
        Ok(PatchGridSpec {
            image_size,
            patch_size,
            stride,
        })
    }

    pub fn image_size(&self) -> usize {
        self.image_size
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    /// Windows along one side.
    pub fn per_side(&self) -> usize {
        (self.image_size - self.patch_size) / self.stride + 1
    }

    /// Token count `N`, excluding the class token.
    pub fn num_patches(&self) -> usize {
        self.per_side() * self.per_side()
    }

    pub fn patch_dim(&self, channels: usize) -> usize {
        channels * self.patch_size * self.patch_size
    }

    pub fn is_overlapping(&self) -> bool {
        self.stride < self.patch_size
    }

    /// `p{P}_s{S}`, the label used in reports.
    pub fn label(&self) -> String {
        format!("p{}_s{}", self.patch_size, self.stride)
    }

    /// Parses a `p{P}_s{S}` label at the given image size.
    pub fn from_label(image_size: usize, label: &str) -> Result<Self> {
        let (p, s) = parse_label(label)?;
        Self::new(image_size, p, s)
    }

    /// Number of windows covering each pixel, row-major `W×W`.
    pub fn coverage(&self) -> Vec<usize> {
        let w = self.image_size;
        let mut counts = vec![0; w * w];
        for gi in 0..self.per_side() {
            for gj in 0..self.per_side() {
                for y in gi * self.stride..gi * self.stride + self.patch_size {
                    for x in gj * self.stride..gj * self.stride + self.patch_size {
                        counts[y * w + x] += 1;
                    }
                }
            }
        }
        counts
    }
}

impl fmt::Display for PatchGridSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "W{}_{}", self.image_size, self.label())
    }
}

/// Parses `p{P}_s{S}` into `(P, S)`.
pub fn parse_label(label: &str) -> Result<(usize, usize)> {
    let bad = || Error::Config(format!("`{label}` is not a p{{P}}_s{{S}} grid label"));
    let (p, s) = label.split_once('_').ok_or_else(bad)?;
    let p = p.strip_prefix('p').ok_or_else(bad)?;
    let s = s.strip_prefix('s').ok_or_else(bad)?;
    Ok((
        usize::from_str(p).map_err(|_| bad())?,
        usize::from_str(s).map_err(|_| bad())?,
    ))
}

/// `((W − P)/S + 1)²` for a valid grid.
pub fn patch_count(image_size: usize, patch_size: usize, stride: usize) -> Result<usize> {
    PatchGridSpec::new(image_size, patch_size, stride).map(|g| g.num_patches())
}

/// Cuts a `C×W×W` image into the grid's windows.
///
/// Row `i·per_side + j` holds the window with top-left corner `(i·S, j·S)`,
/// flattened channel-major then row-major, so the output is `N × (C·P·P)`.
pub fn extract_patches(image: &Tensor, grid: &PatchGridSpec) -> Result<Tensor> {
    let (c, h, w) = match image.shape() {
        [c, h, w] => (*c, *h, *w),
        s => {
            return Err(Error::dim(
                "extract_patches",
                format!("expected a CxWxW image, got {s:?}"),
            ))
        }
    };
    if h != grid.image_size || w != grid.image_size {
        return Err(Error::dim(
            "extract_patches",
            format!("image is {h}x{w} but grid expects W={}", grid.image_size),
        ));
    }
    let p = grid.patch_size;
    let n_side = grid.per_side();
    let px = image.data();
    let mut out = Vec::with_capacity(grid.num_patches() * c * p * p);
    for gi in 0..n_side {
        for gj in 0..n_side {
            let (top, left) = (gi * grid.stride, gj * grid.stride);
            for ch in 0..c {
                for y in top..top + p {
                    let start = (ch * h + y) * w + left;
                    out.extend_from_slice(&px[start..start + p]);
                }
            }
        }
    }
    Tensor::matrix(grid.num_patches(), c * p * p, out)
}

/// A batch of token sequences stacked row-wise on a tape: sequence `b`
/// occupies rows `b·len .. (b+1)·len`, and row 0 of each is the class token.
#[derive(Clone, Copy, Debug)]
pub struct TokenSequence {
    pub tokens: Var,
    pub batch: usize,
    /// Tokens per sequence, `N + 1`.
    pub len: usize,
    pub width: usize,
}

impl TokenSequence {
    pub fn class_rows(&self) -> Vec<usize> {
        (0..self.batch).map(|b| b * self.len).collect()
    }
}

/// Tape handles for the patch projection, positional table and class token.
#[derive(Clone, Copy, Debug)]
pub struct PatchEmbedVars {
    /// `(C·P·P) × D`
    pub proj_weight: Var,
    /// `D`
    pub proj_bias: Var,
    /// `(N+1) × D`
    pub pos: Var,
    /// `1 × D`
    pub cls: Var,
}

/// Projects stacked patches (`batch·N × C·P·P`) to width `D`, prepends the
/// class token to every sequence and adds the positional table.
pub fn embed_tokens(
    tape: &mut Tape,
    patches: Var,
    batch: usize,
    grid: &PatchGridSpec,
    vars: &PatchEmbedVars,
) -> Result<TokenSequence> {
    let n = grid.num_patches();
    let (pos_rows, width) = tape.value(vars.pos).dims2("embed_tokens")?;
    if pos_rows != n + 1 {
        return Err(Error::Config(format!(
            "positional table has {pos_rows} rows but grid {} yields {} tokens",
            grid.label(),
            n + 1
        )));
    }
    let (rows, _) = tape.value(patches).dims2("embed_tokens")?;
    if rows != batch * n {
        return Err(Error::dim(
            "embed_tokens",
            format!("{rows} patch rows for batch {batch} of {n} patches"),
        ));
    }
    let (cls_rows, cls_width) = tape.value(vars.cls).dims2("embed_tokens")?;
    if cls_rows != 1 || cls_width != width {
        return Err(Error::dim(
            "embed_tokens",
            format!("class token must be 1x{width}, got {cls_rows}x{cls_width}"),
        ));
    }

    let projected = tape.matmul(patches, vars.proj_weight)?;
    let projected = tape.add_row(projected, vars.proj_bias)?;
    let mut parts = Vec::with_capacity(2 * batch);
    for b in 0..batch {
        parts.push(vars.cls);
        parts.push(tape.slice_rows(projected, b * n, n)?);
    }
    let stacked = tape.concat_rows(&parts)?;
    let pos = tape.tile_rows(vars.pos, batch)?;
    let tokens = tape.add(stacked, pos)?;
    Ok(TokenSequence {
        tokens,
        batch,
        len: n + 1,
        width,
    })
}
