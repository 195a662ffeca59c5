//! Graph-level building blocks of the encoder stack.

use crate::batch::Batch;
use crate::error::{Result, WrdError};
use crate::numerics::{AttnMask, Bound, Graph, Rng, SeqLayout, Tensor, Var};

use super::config::EncoderConfig;

pub(crate) const LN_EPS: f64 = 1e-6;

/// Sinusoidal position table: `PE[pos, 2k] = sin(pos / 10000^(2k/d))`,
/// `PE[pos, 2k+1] = cos(pos / 10000^(2k/d))`.
pub fn positional_encoding(len: usize, dim: usize) -> Result<Tensor> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(WrdError::Config(format!(
            "position encoding needs an even width, got {dim}"
        )));
    }
    if len == 0 {
        return Err(WrdError::Rank("position encoding for an empty sequence".into()));
    }
    let mut data = vec![0.0; len * dim];
    for pos in 0..len {
        for k in 0..dim / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * k as f64 / dim as f64);
            data[pos * dim + 2 * k] = angle.sin();
            data[pos * dim + 2 * k + 1] = angle.cos();
        }
    }
    Tensor::new(vec![len, dim], data)
}

/// Whether dropout is active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Applies dropout only in training mode.
pub(crate) fn maybe_dropout(g: &mut Graph, x: Var, p: f64, mode: Mode, rng: &mut Rng) -> Result<Var> {
    match mode {
        Mode::Train => g.dropout(x, p, rng),
        Mode::Eval => Ok(x),
    }
}

/// `x · W + b` with parameters `{prefix}.w` and `{prefix}.b`.
pub(crate) fn linear(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let w = p.var(&format!("{prefix}.w"))?;
    let b = p.var(&format!("{prefix}.b"))?;
    let xw = g.matmul(x, w)?;
    g.add_bias(xw, b)
}

/// Token embedding scaled by `sqrt(d)`, plus position encoding when enabled.
pub fn embed(g: &mut Graph, p: &Bound, cfg: &EncoderConfig, batch: &Batch, mode: Mode, rng: &mut Rng) -> Result<Var> {
    let table = p.var("encoder.embedding")?;
    let rows = g.gather_rows(table, &batch.ids)?;
    let mut x = g.scale(rows, (cfg.model_dim as f64).sqrt());
    if cfg.use_position_encoding {
        let pe = positional_encoding(batch.layout.max_len, cfg.model_dim)?;
        let d = cfg.model_dim;
        let mut full = Vec::with_capacity(batch.layout.rows() * d);
        for pos in batch.positions() {
            full.extend_from_slice(&pe.data()[pos * d..(pos + 1) * d]);
        }
        let pe = g.constant(Tensor::new(vec![batch.layout.rows(), d], full)?);
        x = g.add(x, pe)?;
    }
    maybe_dropout(g, x, cfg.dropout, mode, rng)
}

/// Concatenated per-head attention outputs, before the output projection.
pub fn attention_heads(
    g: &mut Graph,
    p: &Bound,
    prefix: &str,
    x: Var,
    layout: &SeqLayout,
    heads: &[AttnMask],
) -> Result<Var> {
    let qkv = linear(g, p, &format!("{prefix}.qkv"), x)?;
    g.attention(qkv, layout, heads)
}

/// Head masks for an attention sublayer: all unmasked for SAN; the first
/// half forward-masked and the second half backward-masked for DiSAN.
pub fn head_masks(cfg: &EncoderConfig) -> Result<Vec<AttnMask>> {
    use super::config::Arch;
    match cfg.arch {
        Arch::San => Ok(vec![AttnMask::Full; cfg.num_heads]),
        Arch::Disan => {
            if !cfg.num_heads.is_multiple_of(2) {
                return Err(WrdError::Config(format!(
                    "disan needs an even head count, got {}",
                    cfg.num_heads
                )));
            }
            let half = cfg.num_heads / 2;
            Ok([vec![AttnMask::Forward; half], vec![AttnMask::Backward; half]].concat())
        }
        Arch::Rnn => Err(WrdError::Config("rnn has no attention heads".into())),
    }
}

/// Multi-head self-attention sublayer (SAN or DiSAN, by `heads`).
pub fn attention_sublayer(
    g: &mut Graph,
    p: &Bound,
    prefix: &str,
    x: Var,
    layout: &SeqLayout,
    heads: &[AttnMask],
) -> Result<Var> {
    let h = attention_heads(g, p, prefix, x, layout, heads)?;
    linear(g, p, &format!("{prefix}.out"), h)
}

pub fn san_sublayer(
    g: &mut Graph,
    p: &Bound,
    prefix: &str,
    x: Var,
    layout: &SeqLayout,
    num_heads: usize,
) -> Result<Var> {
    attention_sublayer(g, p, prefix, x, layout, &vec![AttnMask::Full; num_heads])
}

pub fn disan_sublayer(
    g: &mut Graph,
    p: &Bound,
    prefix: &str,
    x: Var,
    layout: &SeqLayout,
    num_heads: usize,
) -> Result<Var> {
    if !num_heads.is_multiple_of(2) {
        return Err(WrdError::Config(format!(
            "disan needs an even head count, got {num_heads}"
        )));
    }
    let half = num_heads / 2;
    let heads = [vec![AttnMask::Forward; half], vec![AttnMask::Backward; half]].concat();
    attention_sublayer(g, p, prefix, x, layout, &heads)
}

/// One GRU direction: returns `[rows × d/2]` states.
pub fn gru_direction(g: &mut Graph, p: &Bound, prefix: &str, x: Var, layout: &SeqLayout, reverse: bool) -> Result<Var> {
    let gx = linear(g, p, prefix, x)?;
    let u = p.var(&format!("{prefix}.u"))?;
    g.gru(gx, u, layout, reverse)
}

/// Bidirectional GRU sublayer; forward states fill the first `d/2` columns.
pub fn rnn_sublayer(g: &mut Graph, p: &Bound, prefix: &str, x: Var, layout: &SeqLayout) -> Result<Var> {
    let d = g.value(x).last_dim();
    if !d.is_multiple_of(2) {
        return Err(WrdError::Config(format!(
            "bidirectional GRU needs an even width, got {d}"
        )));
    }
    let fwd = gru_direction(g, p, &format!("{prefix}.fwd"), x, layout, false)?;
    let bwd = gru_direction(g, p, &format!("{prefix}.bwd"), x, layout, true)?;
    g.concat_cols(&[fwd, bwd])
}

/// Residual connection followed by layer normalization.
pub(crate) fn add_norm(g: &mut Graph, p: &Bound, prefix: &str, x: Var, sub: Var) -> Result<Var> {
    let sum = g.add(x, sub)?;
    let gain = p.var(&format!("{prefix}.gain"))?;
    let bias = p.var(&format!("{prefix}.bias"))?;
    g.layer_norm(sum, gain, bias, LN_EPS)
}

pub(crate) fn feed_forward(g: &mut Graph, p: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let hidden = linear(g, p, &format!("{prefix}.in"), x)?;
    let hidden = g.relu(hidden);
    linear(g, p, &format!("{prefix}.out"), hidden)
}
