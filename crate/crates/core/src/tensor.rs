//! Dense row-major `f64` tensors.

use rayon::prelude::*;

use crate::error::{Error, Result};

/// N-dimensional array of 64-bit floats in row-major order.
///
/// Tensors are plain values. Gradient tracking lives on the
/// [`Tape`](crate::autograd::Tape), which owns one `Tensor` per recorded node
/// and a same-shape gradient buffer for nodes that require one.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::dim(
                "tensor",
                format!("extents must be positive, got {shape:?}"),
            ));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::dim(
                "tensor",
                format!("shape {shape:?} needs {numel} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// `(rows, cols)` of a 2-D tensor.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::dim(
                op,
                format!("expected a matrix, got shape {s:?}"),
            )),
        }
    }

    pub fn at2(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.shape[1] + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        let cols = *self.shape.last().unwrap();
        &self.data[row * cols..(row + 1) * cols]
    }

    /// Reinterprets the extents; storage is always contiguous so this copies
    /// nothing but the shape.
    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() || shape.contains(&0) {
            return Err(Error::dim(
                "reshape",
                format!("cannot view {:?} as {shape:?}", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2("matmul")?;
        let (k2, n) = other.dims2("matmul")?;
        if k != k2 {
            return Err(Error::dim(
                "matmul",
                format!(
                    "inner dimensions disagree: {:?} x {:?}",
                    self.shape, other.shape
                ),
            ));
        }
        Ok(Tensor {
            shape: vec![m, n],
            data: matmul_raw(&self.data, &other.data, m, k, n),
        })
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = self.dims2("transpose")?;
        Ok(Tensor {
            shape: vec![c, r],
            data: transpose_raw(&self.data, r, c),
        })
    }
}

const PAR_THRESHOLD: usize = 1 << 15;
const MR: usize = 4;
const NR: usize = 4;

/// `[m×k] · [k×n]`. Each output element starts at zero and accumulates over
/// `k` in ascending order, however rows are tiled or split across threads,
/// so results are bitwise reproducible and independent of `m`.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let panels = n.div_ceil(NR);
    // B regrouped into contiguous k×NR column panels, the last one zero-padded.
    let mut packed = vec![0.0; panels * k * NR];
    for (jp, panel) in packed.chunks_mut(k * NR).enumerate() {
        let j0 = jp * NR;
        let cols = NR.min(n - j0);
        for p in 0..k {
            panel[p * NR..p * NR + cols].copy_from_slice(&b[p * n + j0..p * n + j0 + cols]);
        }
    }
    let mut out = vec![0.0; m * n];
    let wide = wide_simd();
    let block_kernel = |(blk, out_rows): (usize, &mut [f64])| {
        let i0 = blk * MR;
        let rows = out_rows.len() / n;
        #[cfg(target_arch = "x86_64")]
        if wide {
            // SAFETY: AVX2 support was detected at runtime.
            unsafe { row_block_avx2(a, &packed, k, n, i0, rows, out_rows) };
            return;
        }
        let _ = wide;
        row_block(a, &packed, k, n, i0, rows, out_rows);
    };
    if m * k * n >= PAR_THRESHOLD && m > MR {
        out.par_chunks_mut(MR * n)
            .enumerate()
            .for_each(block_kernel);
    } else {
        out.chunks_mut(MR * n).enumerate().for_each(block_kernel);
    }
    out
}

fn wide_simd() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        std::is_x86_feature_detected!("avx2")
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}

#[inline(always)]
fn row_block(
    a: &[f64],
    packed: &[f64],
    k: usize,
    n: usize,
    i0: usize,
    rows: usize,
    out: &mut [f64],
) {
    for (jp, panel) in packed.chunks(k * NR).enumerate() {
        tile(a, panel, k, n, i0, rows, jp * NR, out);
    }
}

/// Same arithmetic as [`row_block`] with wider vectors. No fused
/// multiply-add is enabled, so results are bitwise identical.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn row_block_avx2(
    a: &[f64],
    packed: &[f64],
    k: usize,
    n: usize,
    i0: usize,
    rows: usize,
    out: &mut [f64],
) {
    row_block(a, packed, k, n, i0, rows, out)
}

/// Register tile over `rows <= MR` rows from `i0` and one packed panel.
/// Each output is summed from zero in ascending `p`, like a plain dot product.
#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn tile(
    a: &[f64],
    panel: &[f64],
    k: usize,
    n: usize,
    i0: usize,
    rows: usize,
    j0: usize,
    out: &mut [f64],
) {
    let mut acc = [[0.0f64; NR]; MR];
    // Missing rows reuse row i0; their sums are discarded.
    let a_rows: [&[f64]; MR] = std::array::from_fn(|r| {
        let i = if r < rows { i0 + r } else { i0 };
        &a[i * k..(i + 1) * k]
    });
    for (p, b_row) in panel.chunks_exact(NR).enumerate() {
        for r in 0..MR {
            let a_ip = a_rows[r][p];
            for c in 0..NR {
                acc[r][c] += a_ip * b_row[c];
            }
        }
    }
    let cols = NR.min(n - j0);
    for (r, acc_r) in acc.iter().enumerate().take(rows) {
        out[r * n + j0..r * n + j0 + cols].copy_from_slice(&acc_r[..cols]);
    }
}

pub(crate) fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}
