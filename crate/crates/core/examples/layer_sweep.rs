//! Co-trains a small SAN, then probes every layer of the frozen result.
//!
//! cargo run --release --example layer_sweep

use std::path::Path;

use wrdprobe::detector::{Detector, DetectorMode};
use wrdprobe::encoders::{Arch, Encoder, EncoderConfig};
use wrdprobe::evaluation::layer_sweep;
use wrdprobe::numerics::Rng;
use wrdprobe::textdata::{build_vocab, generate_dataset, read_corpus, GenerationOptions, SplitCounts};
use wrdprobe::training::{train_wrd, TrainConfig};

fn main() -> wrdprobe::Result<()> {
    let corpus = read_corpus(Path::new(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/tests/data/english.txt"
    )))?;
    let mut opts = GenerationOptions::new(SplitCounts {
        train: 3000,
        valid: 300,
        test: 0,
    });
    opts.max_len = 30;
    let data = generate_dataset(&corpus, &opts, &Rng::new(9))?;
    let vocab = build_vocab(data.train.iter().map(|x| x.tokens.as_slice()), 3000)?;

    let mut cfg = EncoderConfig::desk(Arch::San);
    cfg.model_dim = 32;
    cfg.ffn_dim = 64;
    let mut rng = Rng::new(10);
    let encoder = Encoder::new(cfg, vocab.len(), &mut rng)?;
    let detector = Detector::new(32, DetectorMode::Joint, 0.1, &mut rng)?;
    let train_cfg = TrainConfig {
        batch_size: 32,
        max_steps: 300,
        eval_interval: 100,
        warmup_steps: 100,
        ..Default::default()
    };
    let trained = train_wrd(encoder, detector, &vocab, &data.train, &data.valid, &train_cfg)?;

    let rows = layer_sweep(
        &trained.encoder,
        &vocab,
        &data.train,
        &data.valid,
        11,
        DetectorMode::Joint,
        0.1,
        &train_cfg,
    )?;
    println!("layer\tinsert\torig\tboth");
    for (row, _) in rows {
        println!("{}\t{:.3}\t{:.3}\t{:.3}", row.layer, row.insert, row.orig, row.both);
    }
    Ok(())
}
