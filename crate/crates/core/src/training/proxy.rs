//! Token-prediction proxy task for pretraining an encoder whose
//! representations are later probed.
//!
//! The head is one single-head attention sublayer with a residual, followed
//! by a projection to the vocabulary. It is discarded after training.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::batch::Batch;
use crate::detector::argmax;
use crate::encoders::{attention_sublayer, Encoder, Mode};
use crate::error::{Result, WrdError};
use crate::numerics::{init, AttnMask, Bound, Graph, ParamSet, Rng, Tensor, Var};
use crate::textdata::{Vocabulary, UNK};

use super::looper::{self, Trainable};
use super::TrainConfig;

const DENOISE_RATE: f64 = 0.15;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProxyObjective {
    /// Position `n` predicts token `N-1-n`.
    #[default]
    Reverse,
    /// Position `n` predicts token `n`.
    Copy,
    /// Copy from an input with 15% of tokens replaced by `<unk>`.
    Denoise,
}

impl fmt::Display for ProxyObjective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProxyObjective::Reverse => "reverse",
            ProxyObjective::Copy => "copy",
            ProxyObjective::Denoise => "denoise",
        })
    }
}

impl FromStr for ProxyObjective {
    type Err = WrdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reverse" => Ok(ProxyObjective::Reverse),
            "copy" => Ok(ProxyObjective::Copy),
            "denoise" => Ok(ProxyObjective::Denoise),
            other => Err(WrdError::Config(format!(
                "unknown proxy objective `{other}` (reverse | copy | denoise)"
            ))),
        }
    }
}

impl ProxyObjective {
    /// `(input, target)` ids for one sentence.
    pub fn pair(self, ids: &[usize], rng: &mut Rng) -> (Vec<usize>, Vec<usize>) {
        match self {
            ProxyObjective::Reverse => (ids.to_vec(), ids.iter().rev().copied().collect()),
            ProxyObjective::Copy => (ids.to_vec(), ids.to_vec()),
            ProxyObjective::Denoise => {
                let noisy = ids
                    .iter()
                    .map(|&t| if rng.uniform() < DENOISE_RATE { UNK } else { t })
                    .collect();
                (noisy, ids.to_vec())
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProxyPoint {
    pub step: usize,
    pub train_loss: f64,
    pub valid_token_acc: f64,
}

#[derive(Clone, Debug)]
pub struct ProxyOutcome {
    /// Best-on-validation encoder; the head is dropped.
    pub encoder: Encoder,
    pub best_step: usize,
    pub valid_token_acc: f64,
    pub curve: Vec<ProxyPoint>,
}

fn head_params(d: usize, vocab: usize, rng: &mut Rng) -> ParamSet {
    let mut p = ParamSet::new();
    let blocks: Vec<Tensor> = (0..3).map(|_| init::glorot(d, d, rng)).collect();
    let mut qkv = Vec::with_capacity(3 * d * d);
    for r in 0..d {
        for b in &blocks {
            qkv.extend_from_slice(b.row(r));
        }
    }
    p.insert(
        "proxy.attn.qkv.w",
        Tensor::new(vec![d, 3 * d], qkv).expect("shape matches"),
    );
    p.insert("proxy.attn.qkv.b", Tensor::zeros(&[3 * d]));
    p.insert("proxy.attn.out.w", init::glorot(d, d, rng));
    p.insert("proxy.attn.out.b", Tensor::zeros(&[d]));
    p.insert("proxy.vocab.w", init::glorot(d, vocab, rng));
    p.insert("proxy.vocab.b", Tensor::zeros(&[vocab]));
    p
}

#[derive(Clone)]
struct Proxy<'a> {
    encoder: Encoder,
    head: ParamSet,
    train: &'a [Vec<usize>],
    valid: &'a [(Vec<usize>, Vec<usize>)],
    objective: ProxyObjective,
}

impl Proxy<'_> {
    /// Vocabulary logits `[B·L × V]` for a batch of inputs.
    fn logits(&self, g: &mut Graph, bounds: &[Bound], batch: &Batch, mode: Mode, rng: &mut Rng) -> Result<Var> {
        let h = self.encoder.forward(g, &bounds[0], batch, mode, rng)?.final_layer();
        let a = attention_sublayer(g, &bounds[1], "proxy.attn", h, &batch.layout, &[AttnMask::Full])?;
        let x = g.add(h, a)?;
        let w = bounds[1].var("proxy.vocab.w")?;
        let b = bounds[1].var("proxy.vocab.b")?;
        let z = g.matmul(x, w)?;
        g.add_bias(z, b)
    }
}

impl Trainable for Proxy<'_> {
    fn bind(&self, g: &mut Graph) -> Vec<Bound> {
        vec![self.encoder.bind(g, true), self.head.bind(g, true)]
    }

    fn param_sets_mut(&mut self) -> Vec<&mut ParamSet> {
        vec![&mut self.encoder.params, &mut self.head]
    }

    fn batch_loss(&self, g: &mut Graph, bounds: &[Bound], batch: &[usize], rng: &mut Rng) -> Result<Var> {
        let pairs: Vec<_> = batch
            .iter()
            .map(|&k| self.objective.pair(&self.train[k], rng))
            .collect();
        let inputs: Vec<&[usize]> = pairs.iter().map(|p| p.0.as_slice()).collect();
        let b = Batch::new(&inputs)?;
        let logits = self.logits(g, bounds, &b, Mode::Train, rng)?;
        let v = self.encoder.vocab_size;
        let mut picks = Vec::new();
        for (s, (_, target)) in pairs.iter().enumerate() {
            let off = b.layout.offset(s);
            picks.extend(target.iter().enumerate().map(|(n, &t)| (off + n) * v + t));
        }
        let p = g.softmax(logits)?;
        let lp = g.log_floor(p, crate::detector::PROB_FLOOR);
        let lp = g.pick(lp, &picks)?;
        let total = g.sum(lp);
        Ok(g.scale(total, -1.0 / picks.len() as f64))
    }

    fn evaluate(&self) -> Result<Vec<f64>> {
        let v = self.encoder.vocab_size;
        let (mut right, mut total) = (0usize, 0usize);
        let mut rng = Rng::new(0);
        let lens: Vec<usize> = self.valid.iter().map(|p| p.0.len()).collect();
        for idx in super::wrd::sorted_chunks(&lens) {
            let chunk: Vec<_> = idx.iter().map(|&k| &self.valid[k]).collect();
            let inputs: Vec<&[usize]> = chunk.iter().map(|p| p.0.as_slice()).collect();
            let b = Batch::new(&inputs)?;
            let mut g = Graph::new();
            let bounds = vec![self.encoder.bind(&mut g, false), self.head.bind(&mut g, false)];
            let logits = self.logits(&mut g, &bounds, &b, Mode::Eval, &mut rng)?;
            let z = g.value(logits).data();
            for (s, (_, target)) in chunk.iter().enumerate() {
                let off = b.layout.offset(s);
                for (n, &t) in target.iter().enumerate() {
                    let row = (off + n) * v;
                    right += (argmax(&z[row..row + v]) == t) as usize;
                    total += 1;
                }
            }
        }
        Ok(vec![right as f64 / total as f64])
    }

    fn train_len(&self) -> usize {
        self.train.len()
    }

    fn item_len(&self, k: usize) -> usize {
        self.train[k].len()
    }

    fn model_dim(&self) -> usize {
        self.encoder.config.model_dim
    }
}

/// Trains `encoder` plus a throwaway head on a token-prediction proxy.
pub fn pretrain_proxy(
    encoder: Encoder,
    vocab: &Vocabulary,
    train: &[Vec<String>],
    valid: &[Vec<String>],
    objective: ProxyObjective,
    cfg: &TrainConfig,
) -> Result<ProxyOutcome> {
    if vocab.len() != encoder.vocab_size {
        return Err(WrdError::Config(format!(
            "vocabulary has {} entries, encoder expects {}",
            vocab.len(),
            encoder.vocab_size
        )));
    }
    let ids = |xs: &[Vec<String>]| -> Vec<Vec<usize>> {
        xs.iter().filter(|s| !s.is_empty()).map(|s| vocab.encode(s)).collect()
    };
    let train_ids = ids(train);
    let root = Rng::new(cfg.seed);
    let valid_pairs: Vec<_> = ids(valid)
        .iter()
        .enumerate()
        .map(|(k, s)| objective.pair(s, &mut root.derive("proxy-valid", k as u64)))
        .collect();
    if valid_pairs.is_empty() {
        return Err(WrdError::Input("empty validation set".into()));
    }
    let head = head_params(encoder.config.model_dim, vocab.len(), &mut root.derive("proxy-head", 0));
    let model = Proxy {
        encoder,
        head,
        train: &train_ids,
        valid: &valid_pairs,
        objective,
    };
    let out = looper::run(model, cfg)?;
    let curve: Vec<ProxyPoint> = out
        .curve
        .iter()
        .map(|(step, loss, m)| ProxyPoint {
            step: *step,
            train_loss: *loss,
            valid_token_acc: m[0],
        })
        .collect();
    let valid_token_acc = curve
        .iter()
        .find(|p| p.step == out.best_step)
        .expect("best step is on the curve")
        .valid_token_acc;
    Ok(ProxyOutcome {
        encoder: out.best.encoder,
        best_step: out.best_step,
        valid_token_acc,
        curve,
    })
}
