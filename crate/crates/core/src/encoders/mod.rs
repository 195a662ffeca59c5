//! Transformer-style encoder stack with an interchangeable sequence-modeling
//! sublayer (bidirectional GRU, SAN or DiSAN).
//!
//! Every layer is post-norm:
//!
//! ```text
//! x = LayerNorm(x + Dropout(Sublayer(x)))
//! x = LayerNorm(x + Dropout(W2 · relu(W1 · x)))
//! ```
//!
//! Only the sublayer differs between architectures; embedding, feed-forward
//! and normalization parameters have identical shapes.

mod config;
mod layers;

pub use config::{Arch, EncoderConfig};
pub use layers::{
    attention_heads, attention_sublayer, disan_sublayer, embed, gru_direction, head_masks, positional_encoding,
    rnn_sublayer, san_sublayer, Mode,
};

use crate::batch::Batch;
use crate::error::{Result, WrdError};
use crate::numerics::{init, Bound, Graph, ParamSet, Rng, Tensor, Var};

/// Per-layer representations of one forward pass; `per_layer[0]` is the
/// embedded input, `per_layer[num_layers]` the final output.
#[derive(Clone, Debug)]
pub struct EncoderVars {
    pub per_layer: Vec<Var>,
}

impl EncoderVars {
    pub fn final_layer(&self) -> Var {
        *self.per_layer.last().expect("at least the embedding layer")
    }
}

/// Value-level encoder output for a single sentence: `num_layers + 1`
/// matrices of shape `N×d`.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    pub per_layer: Vec<Tensor>,
}

impl EncoderOutput {
    pub fn final_layer(&self) -> &Tensor {
        self.per_layer.last().expect("at least the embedding layer")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub vocab_size: usize,
    pub params: ParamSet,
}

fn layer_prefix(l: usize) -> String {
    format!("encoder.layer{l}")
}

fn glorot_blocks(rows: usize, block: usize, count: usize, rng: &mut Rng) -> Tensor {
    let blocks: Vec<Tensor> = (0..count).map(|_| init::glorot(rows, block, rng)).collect();
    let mut data = Vec::with_capacity(rows * block * count);
    for r in 0..rows {
        for b in &blocks {
            data.extend_from_slice(b.row(r));
        }
    }
    Tensor::new(vec![rows, block * count], data).expect("shape matches")
}

impl Encoder {
    /// Randomly initialized encoder: Glorot-uniform matrices, zero biases,
    /// unit normalization gains.
    pub fn new(config: EncoderConfig, vocab_size: usize, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        if vocab_size < 2 {
            return Err(WrdError::Config(format!("vocabulary size {vocab_size} is too small")));
        }
        let d = config.model_dim;
        let f = config.ffn_dim;
        let mut p = ParamSet::new();
        p.insert("encoder.embedding", init::glorot(vocab_size, d, rng));
        for l in 0..config.num_layers {
            let pre = layer_prefix(l);
            match config.arch {
                Arch::San | Arch::Disan => {
                    p.insert(format!("{pre}.attn.qkv.w"), glorot_blocks(d, d, 3, rng));
                    p.insert(format!("{pre}.attn.qkv.b"), Tensor::zeros(&[3 * d]));
                    p.insert(format!("{pre}.attn.out.w"), init::glorot(d, d, rng));
                    p.insert(format!("{pre}.attn.out.b"), Tensor::zeros(&[d]));
                }
                Arch::Rnn => {
                    let h = d / 2;
                    for dir in ["fwd", "bwd"] {
                        p.insert(format!("{pre}.gru.{dir}.w"), glorot_blocks(d, h, 3, rng));
                        p.insert(format!("{pre}.gru.{dir}.b"), Tensor::zeros(&[3 * h]));
                        p.insert(format!("{pre}.gru.{dir}.u"), glorot_blocks(h, h, 3, rng));
                    }
                }
            }
            p.insert(format!("{pre}.ln1.gain"), Tensor::full(&[d], 1.0));
            p.insert(format!("{pre}.ln1.bias"), Tensor::zeros(&[d]));
            p.insert(format!("{pre}.ffn.in.w"), init::glorot(d, f, rng));
            p.insert(format!("{pre}.ffn.in.b"), Tensor::zeros(&[f]));
            p.insert(format!("{pre}.ffn.out.w"), init::glorot(f, d, rng));
            p.insert(format!("{pre}.ffn.out.b"), Tensor::zeros(&[d]));
            p.insert(format!("{pre}.ln2.gain"), Tensor::full(&[d], 1.0));
            p.insert(format!("{pre}.ln2.bias"), Tensor::zeros(&[d]));
        }
        Ok(Encoder {
            config,
            vocab_size,
            params: p,
        })
    }

    /// Rebuilds an encoder from stored arrays, checking every expected shape.
    pub fn from_params(config: EncoderConfig, vocab_size: usize, params: ParamSet) -> Result<Self> {
        let template = Encoder::new(config.clone(), vocab_size, &mut Rng::new(0))?;
        for (name, t) in template.params.iter() {
            let got = params.get(name)?;
            if got.shape() != t.shape() {
                return Err(WrdError::Dimension {
                    op: "encoder parameters",
                    left: t.shape().to_vec(),
                    right: got.shape().to_vec(),
                });
            }
        }
        let mut own = ParamSet::new();
        for (name, _) in template.params.iter() {
            own.insert(name, params.get(name)?.clone());
        }
        Ok(Encoder {
            config,
            vocab_size,
            params: own,
        })
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        self.params.bind(g, trainable)
    }

    /// Runs the stack over a padded batch.
    pub fn forward(&self, g: &mut Graph, p: &Bound, batch: &Batch, mode: Mode, rng: &mut Rng) -> Result<EncoderVars> {
        let cfg = &self.config;
        if let Some(&bad) = batch.ids.iter().find(|&&id| id >= self.vocab_size) {
            return Err(WrdError::Vocabulary {
                id: bad,
                size: self.vocab_size,
            });
        }
        let layout = &batch.layout;
        let mut x = embed(g, p, cfg, batch, mode, rng)?;
        let mut per_layer = vec![x];
        for l in 0..cfg.num_layers {
            let pre = layer_prefix(l);
            let sub = match cfg.arch {
                Arch::San => san_sublayer(g, p, &format!("{pre}.attn"), x, layout, cfg.num_heads)?,
                Arch::Disan => disan_sublayer(g, p, &format!("{pre}.attn"), x, layout, cfg.num_heads)?,
                Arch::Rnn => rnn_sublayer(g, p, &format!("{pre}.gru"), x, layout)?,
            };
            let sub = layers::maybe_dropout(g, sub, cfg.dropout, mode, rng)?;
            x = layers::add_norm(g, p, &format!("{pre}.ln1"), x, sub)?;
            let ff = layers::feed_forward(g, p, &format!("{pre}.ffn"), x)?;
            let ff = layers::maybe_dropout(g, ff, cfg.dropout, mode, rng)?;
            x = layers::add_norm(g, p, &format!("{pre}.ln2"), x, ff)?;
            per_layer.push(x);
        }
        Ok(EncoderVars { per_layer })
    }

    /// Encodes one sentence of token ids.
    pub fn encode(&self, tokens: &[usize], mode: Mode, rng: &mut Rng) -> Result<EncoderOutput> {
        let batch = Batch::single(tokens)?;
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let vars = self.forward(&mut g, &p, &batch, mode, rng)?;
        Ok(EncoderOutput {
            per_layer: vars.per_layer.iter().map(|&v| g.value(v).clone()).collect(),
        })
    }

    /// Names and shapes of the arrays outside the sequence sublayer.
    pub fn shared_shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.params
            .iter()
            .filter(|(n, _)| !n.contains(".attn.") && !n.contains(".gru."))
            .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
            .collect()
    }
}

/// Value-level [`Encoder::encode`].
pub fn encode(tokens: &[usize], encoder: &Encoder, mode: Mode, rng: &mut Rng) -> Result<EncoderOutput> {
    encoder.encode(tokens, mode, rng)
}
