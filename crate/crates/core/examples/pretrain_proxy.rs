//! Pretrains a SAN on sentence reversal, with and without position encoding.
//! Without it the encoder cannot tell positions apart.
//!
//! cargo run --release --example pretrain_proxy

use wrdprobe::encoders::{Arch, Encoder, EncoderConfig};
use wrdprobe::numerics::Rng;
use wrdprobe::textdata::build_vocab;
use wrdprobe::training::{pretrain_proxy, ProxyObjective, TrainConfig};

/// Sentences of distinct made-up tokens, so reversal has a unique answer.
fn sentences(n: usize, seed: u64) -> Vec<Vec<String>> {
    let mut rng = Rng::new(seed);
    (0..n)
        .map(|_| {
            let mut pool: Vec<usize> = (0..40).collect();
            rng.shuffle(&mut pool);
            let len = 4 + rng.below(6);
            pool[..len].iter().map(|t| format!("w{t}")).collect()
        })
        .collect()
}

fn main() -> wrdprobe::Result<()> {
    let train = sentences(2000, 1);
    let valid = sentences(200, 2);
    let vocab = build_vocab(train.iter().map(Vec::as_slice), 100)?;
    let cfg = TrainConfig {
        batch_size: 32,
        max_steps: 400,
        eval_interval: 100,
        warmup_steps: 100,
        ..Default::default()
    };
    for pos in [true, false] {
        let mut ec = EncoderConfig::desk(Arch::San);
        ec.model_dim = 32;
        ec.ffn_dim = 64;
        ec.use_position_encoding = pos;
        let encoder = Encoder::new(ec, vocab.len(), &mut Rng::new(3))?;
        let out = pretrain_proxy(encoder, &vocab, &train, &valid, ProxyObjective::Reverse, &cfg)?;
        println!(
            "position encoding {pos}: reversal token accuracy {:.3}",
            out.valid_token_acc
        );
    }
    Ok(())
}
