//! Trains a small model, then breaks validation accuracy down by how far the
//! word moved and prints the report as TSV.
//!
//! cargo run --release --example distance_report

use std::path::Path;

use wrdprobe::detector::{Detector, DetectorMode};
use wrdprobe::encoders::{Arch, Encoder, EncoderConfig};
use wrdprobe::evaluation::{distance_buckets, score, ChanceBaseline, ProbeReport, DEFAULT_BUCKET_EDGES};
use wrdprobe::numerics::Rng;
use wrdprobe::textdata::{build_vocab, generate_dataset, read_corpus, GenerationOptions, SplitCounts};
use wrdprobe::training::{predict_wrd, train_wrd, TrainConfig};

fn main() -> wrdprobe::Result<()> {
    let corpus = read_corpus(Path::new(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/tests/data/english.txt"
    )))?;
    let mut opts = GenerationOptions::new(SplitCounts {
        train: 4000,
        valid: 500,
        test: 0,
    });
    opts.max_len = 30;
    let data = generate_dataset(&corpus, &opts, &Rng::new(2))?;
    let vocab = build_vocab(data.train.iter().map(|x| x.tokens.as_slice()), 3000)?;

    let mut cfg = EncoderConfig::desk(Arch::Rnn);
    cfg.model_dim = 32;
    cfg.ffn_dim = 64;
    let mut rng = Rng::new(3);
    let encoder = Encoder::new(cfg, vocab.len(), &mut rng)?;
    let detector = Detector::new(32, DetectorMode::Joint, 0.1, &mut rng)?;
    let train_cfg = TrainConfig {
        batch_size: 32,
        max_steps: 400,
        eval_interval: 100,
        warmup_steps: 200,
        ..Default::default()
    };
    let out = train_wrd(encoder, detector, &vocab, &data.train, &data.valid, &train_cfg)?;

    let ids: Vec<Vec<usize>> = data.valid.iter().map(|x| vocab.encode(&x.tokens)).collect();
    let preds = predict_wrd(&out.encoder, &out.detector, &ids)?;
    let mut report = ProbeReport::new("rnn", score(&preds, &data.valid)?, "example", 2);
    report.distance_buckets = distance_buckets(&preds, &data.valid, &DEFAULT_BUCKET_EDGES)?;
    report.curve = out.curve;
    print!("{}", report.to_tsv());

    let lengths: Vec<usize> = data.valid.iter().map(|x| x.len()).collect();
    let chance = ChanceBaseline::new(&preds, &lengths)?;
    println!(
        "\nchance Both {:.4} (standard error {:.4})",
        chance.mean, chance.std_err
    );
    Ok(())
}
