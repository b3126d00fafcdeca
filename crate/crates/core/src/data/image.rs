//! Raster decoding, bilinear resizing and normalization.

use std::io::Cursor;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Fixed per-channel normalization constants: `(x − 0.5) / 0.5`.
pub const NORM_MEAN: f64 = 0.5;
pub const NORM_STD: f64 = 0.5;

/// Decoded pixels scaled to `[0, 1]`, interleaved row-major (`y`, `x`, channel).
#[derive(Clone, Debug, PartialEq)]
pub struct RawImage {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl RawImage {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || !matches!(channels, 1 | 3) {
            return Err(Error::Parameter(format!(
                "image must be non-empty with 1 or 3 channels, got {width}x{height}x{channels}"
            )));
        }
        if data.len() != width * height * channels {
            return Err(Error::Parameter(format!(
                "{width}x{height}x{channels} image needs {} values, got {}",
                width * height * channels,
                data.len()
            )));
        }
        Ok(RawImage {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn at(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Single-channel luma (BT.601 weights) or a copy when already gray.
    pub fn to_gray(&self) -> RawImage {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self
            .data
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect();
        RawImage {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }

    /// Three channels, replicating a gray image.
    pub fn to_rgb(&self) -> RawImage {
        if self.channels == 3 {
            return self.clone();
        }
        let data = self.data.iter().flat_map(|&v| [v, v, v]).collect();
        RawImage {
            width: self.width,
            height: self.height,
            channels: 3,
            data,
        }
    }
}

fn format_err(name: &str, reason: impl Into<String>) -> Error {
    Error::Format {
        path: name.into(),
        reason: reason.into(),
    }
}

/// Decodes PGM/PPM (`P2`, `P3`, `P5`, `P6`, any maxval up to 65535) or PNG.
/// `name` only labels errors.
pub fn decode(bytes: &[u8], name: &str) -> Result<RawImage> {
    match bytes {
        [b'P', b'2' | b'3' | b'5' | b'6', ..] => decode_pnm(bytes, name),
        [0x89, b'P', b'N', b'G', ..] => decode_png(bytes, name),
        _ => Err(format_err(name, "unsupported image format")),
    }
}

struct PnmHeader {
    width: usize,
    height: usize,
    maxval: u32,
    /// Offset of the first raster byte.
    body: usize,
}

/// Parses the three header integers after the magic, skipping `#` comments.
fn pnm_header(bytes: &[u8], name: &str) -> Result<PnmHeader> {
    let mut pos = 2;
    let mut fields = [0u64; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(format_err(name, "truncated or malformed PNM header"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .unwrap()
            .parse()
            .map_err(|_| format_err(name, "PNM header value out of range"))?;
    }
    // Exactly one whitespace byte separates the header from a binary raster.
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(format_err(name, "missing whitespace after PNM header"));
    }
    let [w, h, maxval] = fields;
    if w == 0 || h == 0 || w > 1 << 16 || h > 1 << 16 {
        return Err(format_err(name, format!("unsupported PNM size {w}x{h}")));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(format_err(
            name,
            format!("PNM maxval {maxval} out of range"),
        ));
    }
    Ok(PnmHeader {
        width: w as usize,
        height: h as usize,
        maxval: maxval as u32,
        body: pos + 1,
    })
}

fn decode_pnm(bytes: &[u8], name: &str) -> Result<RawImage> {
    let h = pnm_header(bytes, name)?;
    let channels = if matches!(bytes[1], b'3' | b'6') {
        3
    } else {
        1
    };
    let count = h.width * h.height * channels;
    let scale = 1.0 / h.maxval as f64;
    let samples: Vec<u32> = if matches!(bytes[1], b'5' | b'6') {
        let wide = h.maxval > 255;
        let need = count * if wide { 2 } else { 1 };
        let raster = bytes
            .get(h.body..h.body + need)
            .ok_or_else(|| format_err(name, "PNM raster is truncated"))?;
        if wide {
            raster
                .chunks_exact(2)
                .map(|c| u16::from_be_bytes([c[0], c[1]]) as u32)
                .collect()
        } else {
            raster.iter().map(|&b| b as u32).collect()
        }
    } else {
        let text = std::str::from_utf8(&bytes[h.body..])
            .map_err(|_| format_err(name, "plain PNM raster is not ASCII"))?;
        let values: Vec<u32> = text
            .split_ascii_whitespace()
            .take(count)
            .map(|t| t.parse::<u32>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| format_err(name, "bad sample in plain PNM raster"))?;
        if values.len() != count {
            return Err(format_err(name, "PNM raster is truncated"));
        }
        values
    };
    if samples.iter().any(|&s| s > h.maxval) {
        return Err(format_err(name, "PNM sample exceeds maxval"));
    }
    let data = samples.into_iter().map(|s| s as f64 * scale).collect();
    RawImage::new(h.width, h.height, channels, data)
}

fn decode_png(bytes: &[u8], name: &str) -> Result<RawImage> {
    let png_err = |e: png::DecodingError| format_err(name, format!("PNG: {e}"));
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(png_err)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| format_err(name, "PNG too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(png_err)?;
    let (width, height) = (info.width as usize, info.height as usize);

    let (src_channels, keep) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        png::ColorType::Indexed => {
            return Err(format_err(name, "palette PNG was not expanded"));
        }
    };
    let wide = info.bit_depth == png::BitDepth::Sixteen;
    let bytes_per_sample = if wide { 2 } else { 1 };
    let max = if wide { 65535.0 } else { 255.0 };
    let mut data = Vec::with_capacity(width * height * keep);
    for row in buf.chunks(info.line_size).take(height) {
        for px in row
            .chunks_exact(src_channels * bytes_per_sample)
            .take(width)
        {
            for c in 0..keep {
                let v = if wide {
                    u16::from_be_bytes([px[2 * c], px[2 * c + 1]]) as f64
                } else {
                    px[c] as f64
                };
                data.push(v / max);
            }
        }
    }
    RawImage::new(width, height, keep, data)
}

/// Binary 16-bit PGM of a gray image in `[0, 1]`. Values are rounded to the
/// nearest of 65536 levels.
pub fn encode_pgm16(img: &RawImage) -> Vec<u8> {
    assert_eq!(img.channels, 1, "PGM holds one channel");
    let mut out = format!("P5\n{} {}\n65535\n", img.width, img.height).into_bytes();
    for &v in &img.data {
        out.extend_from_slice(&quantize16(v).to_be_bytes());
    }
    out
}

pub(crate) fn quantize16(v: f64) -> u16 {
    (v.clamp(0.0, 1.0) * 65535.0).round() as u16
}

/// Bilinear resize with half-pixel centers: output pixel `i` samples input
/// coordinate `(i + 0.5)·in/out − 0.5`, clamped to the image.
pub fn resize_bilinear(img: &RawImage, out_w: usize, out_h: usize) -> RawImage {
    let axis = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|i| {
                let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (inp - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(inp - 1);
                (lo, hi, src - lo as f64)
            })
            .collect()
    };
    let xs = axis(out_w, img.width);
    let ys = axis(out_h, img.height);
    let c = img.channels;
    let mut data = Vec::with_capacity(out_w * out_h * c);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            for ch in 0..c {
                let top = img.at(x0, y0, ch) * (1.0 - fx) + img.at(x1, y0, ch) * fx;
                let bottom = img.at(x0, y1, ch) * (1.0 - fx) + img.at(x1, y1, ch) * fx;
                data.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    RawImage {
        width: out_w,
        height: out_h,
        channels: c,
        data,
    }
}

/// Channel conversion, resize to `size × size`, then normalization into a
/// `[channels, size, size]` tensor with values in `[−1, 1]`.
pub fn to_tensor(img: &RawImage, size: usize, channels: usize) -> Result<Tensor> {
    if size == 0 || !matches!(channels, 1 | 3) {
        return Err(Error::Parameter(format!(
            "target must be non-empty with 1 or 3 channels, got {size}x{size}x{channels}"
        )));
    }
    let converted = if channels == 1 {
        img.to_gray()
    } else {
        img.to_rgb()
    };
    let resized = resize_bilinear(&converted, size, size);
    let plane = size * size;
    Tensor::new(
        vec![channels, size, size],
        (0..channels * plane)
            .map(|i| {
                let (c, p) = (i / plane, i % plane);
                (resized.data[p * channels + c] - NORM_MEAN) / NORM_STD
            })
            .collect(),
    )
}

/// Decode then [`to_tensor`].
pub fn preprocess(bytes: &[u8], name: &str, size: usize, channels: usize) -> Result<Tensor> {
    to_tensor(&decode(bytes, name)?, size, channels)
}
