//! Probes one layer of a frozen encoder, then probes random vectors as a
//! control. The encoder's parameter hash is unchanged by probing.
//!
//! cargo run --release --example probe_frozen

use std::path::Path;

use wrdprobe::checkpoint::param_hash;
use wrdprobe::detector::{Detector, DetectorMode};
use wrdprobe::encoders::{Arch, Encoder, EncoderConfig};
use wrdprobe::evaluation::{score, ChanceBaseline};
use wrdprobe::numerics::Rng;
use wrdprobe::textdata::{build_vocab, generate_dataset, read_corpus, GenerationOptions, SplitCounts};
use wrdprobe::training::{predict_reprs, probe_frozen, ReprDump, ReprSource, TrainConfig};

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
    let data = generate_dataset(&corpus, &opts, &Rng::new(4))?;
    let vocab = build_vocab(data.train.iter().map(|x| x.tokens.as_slice()), 3000)?;

    let mut cfg = EncoderConfig::desk(Arch::Disan);
    cfg.model_dim = 32;
    cfg.ffn_dim = 64;
    let encoder = Encoder::new(cfg, vocab.len(), &mut Rng::new(5))?;
    let detector = || Detector::new(32, DetectorMode::Joint, 0.1, &mut Rng::new(6));
    let train_cfg = TrainConfig {
        batch_size: 32,
        max_steps: 300,
        eval_interval: 100,
        warmup_steps: 100,
        ..Default::default()
    };

    let before = param_hash(&encoder.params);
    let src = ReprSource::Encoder {
        encoder: &encoder,
        vocab: &vocab,
        layer: 2,
    };
    let out = probe_frozen(src, detector()?, &data.train, &data.valid, &train_cfg)?;
    println!("layer 2 of an untrained DiSAN: Both {:.3}", out.valid.both);
    println!("encoder hash unchanged: {}", param_hash(&encoder.params) == before);

    let mut rng = Rng::new(8);
    let train = ReprDump::random(&data.train, 32, &mut rng)?;
    let valid = ReprDump::random(&data.valid, 32, &mut rng)?;
    let out = probe_frozen(
        ReprSource::Dumps {
            train: &train,
            valid: &valid,
        },
        detector()?,
        &data.train,
        &data.valid,
        &train_cfg,
    )?;
    // Score the last detector: the best one was picked on this same split.
    let preds = predict_reprs(&out.last_detector, &valid.records)?;
    let lengths: Vec<usize> = data.valid.iter().map(|x| x.len()).collect();
    let chance = ChanceBaseline::new(&preds, &lengths)?;
    println!(
        "random vectors: Both {:.4}, chance {:.4} ± {:.4}",
        score(&preds, &data.valid)?.both,
        chance.mean,
        chance.std_err
    );
    Ok(())
}
