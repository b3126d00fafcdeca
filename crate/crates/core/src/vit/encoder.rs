use rayon::prelude::*;

use super::{ModelParams, ViTConfig, LAYER_NORM_EPS};
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::patch::{embed_tokens, extract_patches, PatchEmbedVars, PatchGridSpec, TokenSequence};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub ln1_gamma: Var,
    pub ln1_beta: Var,
    pub qkv_weight: Var,
    pub qkv_bias: Var,
    pub out_weight: Var,
    pub out_bias: Var,
    pub ln2_gamma: Var,
    pub ln2_beta: Var,
    pub fc1_weight: Var,
    pub fc1_bias: Var,
    pub fc2_weight: Var,
    pub fc2_bias: Var,
}

/// Model parameters bound as tape leaves.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub embed: PatchEmbedVars,
    pub blocks: Vec<BlockVars>,
    pub norm_gamma: Var,
    pub norm_beta: Var,
    pub head: Var,
    /// Every leaf, in [`ModelParams`] order.
    pub all: Vec<Var>,
}

const BLOCK_PARAMS: usize = 12;

impl ModelVars {
    pub fn bind(tape: &mut Tape, params: &ModelParams, trainable: bool) -> Self {
        let vars: Vec<Var> = params
            .iter()
            .map(|(_, t)| tape.leaf(t.clone(), trainable))
            .collect();
        Self::from_vars(&vars)
    }

    /// Assigns leaves that were created in [`ModelParams`] order.
    pub fn from_vars(vars: &[Var]) -> Self {
        let depth = (vars.len() - 7) / BLOCK_PARAMS;
        assert_eq!(vars.len(), 7 + depth * BLOCK_PARAMS, "parameter layout");
        let blocks = vars[4..4 + depth * BLOCK_PARAMS]
            .chunks(BLOCK_PARAMS)
            .map(|b| BlockVars {
                ln1_gamma: b[0],
                ln1_beta: b[1],
                qkv_weight: b[2],
                qkv_bias: b[3],
                out_weight: b[4],
                out_bias: b[5],
                ln2_gamma: b[6],
                ln2_beta: b[7],
                fc1_weight: b[8],
                fc1_bias: b[9],
                fc2_weight: b[10],
                fc2_bias: b[11],
            })
            .collect();
        let tail = &vars[vars.len() - 3..];
        ModelVars {
            embed: PatchEmbedVars {
                proj_weight: vars[0],
                proj_bias: vars[1],
                pos: vars[2],
                cls: vars[3],
            },
            blocks,
            norm_gamma: tail[0],
            norm_beta: tail[1],
            head: tail[2],
            all: vars.to_vec(),
        }
    }
}

fn attention_inner(
    tape: &mut Tape,
    x: Var,
    batch: usize,
    len: usize,
    heads: usize,
    p: &BlockVars,
) -> Result<(Var, Vec<Var>)> {
    let (rows, width) = tape.value(x).dims2("attention")?;
    if heads == 0 || width % heads != 0 {
        return Err(Error::Config(format!(
            "width {width} is not divisible by {heads} heads"
        )));
    }
    if rows != batch * len {
        return Err(Error::dim(
            "attention",
            format!("{rows} rows for {batch} sequences of {len} tokens"),
        ));
    }
    let dh = width / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let qkv = tape.matmul(x, p.qkv_weight)?;
    let qkv = tape.add_row(qkv, p.qkv_bias)?;
    let mut weights = Vec::with_capacity(batch * heads);
    let mut sequences = Vec::with_capacity(batch);
    for b in 0..batch {
        let seq = tape.slice_rows(qkv, b * len, len)?;
        let mut head_outputs = Vec::with_capacity(heads);
        for h in 0..heads {
            let q = tape.slice_cols(seq, h * dh, dh)?;
            let k = tape.slice_cols(seq, width + h * dh, dh)?;
            let v = tape.slice_cols(seq, 2 * width + h * dh, dh)?;
            let kt = tape.transpose(k)?;
            let scores = tape.matmul(q, kt)?;
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax(scores, 1)?;
            weights.push(attn);
            head_outputs.push(tape.matmul(attn, v)?);
        }
        sequences.push(tape.concat_cols(&head_outputs)?);
    }
    let merged = tape.concat_rows(&sequences)?;
    let out = tape.matmul(merged, p.out_weight)?;
    let out = tape.add_row(out, p.out_bias)?;
    Ok((out, weights))
}

/// Multi-head scaled dot-product self-attention, including the output
/// projection, over `batch` stacked sequences of `len` tokens.
pub fn attention(
    tape: &mut Tape,
    x: Var,
    batch: usize,
    len: usize,
    heads: usize,
    params: &BlockVars,
) -> Result<Var> {
    attention_inner(tape, x, batch, len, heads, params).map(|(out, _)| out)
}

/// Like [`encoder_forward`], also returning every attention weight matrix
/// (`len × len`, one per layer, sequence and head).
pub fn encoder_forward_traced(
    tape: &mut Tape,
    tokens: TokenSequence,
    cfg: &ViTConfig,
    vars: &ModelVars,
) -> Result<(TokenSequence, Vec<Var>)> {
    if tokens.width != cfg.width {
        return Err(Error::dim(
            "encoder_forward",
            format!("token width {} but model width {}", tokens.width, cfg.width),
        ));
    }
    let mut x = tokens.tokens;
    let mut all_weights = Vec::new();
    for block in &vars.blocks {
        let h = tape.layer_norm(x, block.ln1_gamma, block.ln1_beta, LAYER_NORM_EPS)?;
        let (a, w) = attention_inner(tape, h, tokens.batch, tokens.len, cfg.heads, block)?;
        all_weights.extend(w);
        x = tape.add(x, a)?;

        let h = tape.layer_norm(x, block.ln2_gamma, block.ln2_beta, LAYER_NORM_EPS)?;
        let h = tape.matmul(h, block.fc1_weight)?;
        let h = tape.add_row(h, block.fc1_bias)?;
        let h = tape.gelu(h);
        let h = tape.matmul(h, block.fc2_weight)?;
        let h = tape.add_row(h, block.fc2_bias)?;
        x = tape.add(x, h)?;
    }
    let out = tape.layer_norm(x, vars.norm_gamma, vars.norm_beta, LAYER_NORM_EPS)?;
    Ok((
        TokenSequence {
            tokens: out,
            ..tokens
        },
        all_weights,
    ))
}

/// Pre-norm transformer stack followed by a final layer norm.
pub fn encoder_forward(
    tape: &mut Tape,
    tokens: TokenSequence,
    cfg: &ViTConfig,
    vars: &ModelVars,
) -> Result<TokenSequence> {
    encoder_forward_traced(tape, tokens, cfg, vars).map(|(t, _)| t)
}

/// Class-token readout projected to the embedding width and scaled to unit
/// norm. Returns `batch × embed_dim`.
pub fn extract_embedding(tape: &mut Tape, tokens: TokenSequence, head: Var) -> Result<Var> {
    let cls = tape.gather_rows(tokens.tokens, &tokens.class_rows())?;
    let projected = tape.matmul(cls, head)?;
    tape.l2_normalize_rows(projected)
}

/// Stacks the patch matrices of several images into `batch·N × C·P·P`.
pub fn stack_patches<'a>(
    images: impl IntoIterator<Item = &'a Tensor>,
    grid: &PatchGridSpec,
) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut rows = 0;
    let mut cols = 0;
    for img in images {
        let p = extract_patches(img, grid)?;
        rows += p.shape()[0];
        cols = p.shape()[1];
        data.extend_from_slice(p.data());
    }
    if rows == 0 {
        return Err(Error::dim("stack_patches", "no images"));
    }
    Tensor::matrix(rows, cols, data)
}

/// Patches → tokens → encoder → unit embeddings.
pub fn forward_embeddings(
    tape: &mut Tape,
    cfg: &ViTConfig,
    vars: &ModelVars,
    patches: Var,
    batch: usize,
) -> Result<Var> {
    let tokens = embed_tokens(tape, patches, batch, &cfg.grid, &vars.embed)?;
    let encoded = encoder_forward(tape, tokens, cfg, vars)?;
    extract_embedding(tape, encoded, vars.head)
}

const INFERENCE_CHUNK: usize = 16;

/// Embeds images with frozen parameters, in parallel over fixed-size chunks.
///
/// Every row of every operation is computed independently of the other
/// images in its chunk, so results do not depend on chunking or thread count.
pub fn embed_images(
    cfg: &ViTConfig,
    params: &ModelParams,
    images: &[Tensor],
) -> Result<Vec<Vec<f64>>> {
    let chunks: Vec<Vec<Vec<f64>>> = images
        .par_chunks(INFERENCE_CHUNK)
        .map(|chunk| {
            let mut tape = Tape::new();
            let vars = ModelVars::bind(&mut tape, params, false);
            let patches = tape.constant(stack_patches(chunk, &cfg.grid)?);
            let emb = forward_embeddings(&mut tape, cfg, &vars, patches, chunk.len())?;
            let t = tape.value(emb);
            Ok((0..chunk.len()).map(|r| t.row(r).to_vec()).collect())
        })
        .collect::<Result<_>>()?;
    Ok(chunks.into_iter().flatten().collect())
}
