//! Co-trains a small encoder with the detector and prints the validation
//! curve.
//!
//! cargo run --release --example train_wrd -- [rnn|san|disan]

use std::path::Path;

use wrdprobe::detector::{Detector, DetectorMode};
use wrdprobe::encoders::{Arch, Encoder, EncoderConfig};
use wrdprobe::numerics::Rng;
use wrdprobe::textdata::{build_vocab, generate_dataset, read_corpus, GenerationOptions, SplitCounts};
use wrdprobe::training::{train_wrd, TrainConfig};

fn main() -> wrdprobe::Result<()> {
    let arch: Arch = std::env::args().nth(1).unwrap_or_else(|| "rnn".into()).parse()?;
    let corpus = read_corpus(Path::new(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/tests/data/english.txt"
    )))?;
    let mut opts = GenerationOptions::new(SplitCounts {
        train: 5000,
        valid: 300,
        test: 0,
    });
    opts.max_len = 30;
    let data = generate_dataset(&corpus, &opts, &Rng::new(1))?;
    let vocab = build_vocab(data.train.iter().map(|x| x.tokens.as_slice()), 3000)?;

    let mut cfg = EncoderConfig::desk(arch);
    cfg.model_dim = 32;
    cfg.ffn_dim = 64;
    let mut rng = Rng::new(7);
    let encoder = Encoder::new(cfg, vocab.len(), &mut rng)?;
    let detector = Detector::new(32, DetectorMode::Joint, 0.1, &mut rng)?;
    let train_cfg = TrainConfig {
        batch_size: 32,
        max_steps: 600,
        eval_interval: 100,
        warmup_steps: 200,
        ..Default::default()
    };
    let out = train_wrd(encoder, detector, &vocab, &data.train, &data.valid, &train_cfg)?;
    println!("step\tloss\tinsert\torig\tboth");
    for p in &out.curve {
        println!(
            "{}\t{:.3}\t{:.3}\t{:.3}\t{:.3}",
            p.step, p.train_loss, p.valid_insert_acc, p.valid_orig_acc, p.valid_both_acc
        );
    }
    println!("best step {} with Both {:.3}", out.best_step, out.valid.both);
    Ok(())
}
