//! Samples a small WRD dataset from the bundled English corpus and prints a
//! few instances.
//!
//! cargo run --example gen_data -- [OUT_DIR]

use std::path::{Path, PathBuf};

use wrdprobe::numerics::Rng;
use wrdprobe::textdata::{generate_dataset, read_corpus, GenerationOptions, SplitCounts};

fn main() -> wrdprobe::Result<()> {
    let corpus = read_corpus(Path::new(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/tests/data/english.txt"
    )))?;
    let opts = GenerationOptions::new(SplitCounts {
        train: 1000,
        valid: 100,
        test: 100,
    });
    let data = generate_dataset(&corpus, &opts, &Rng::new(1))?;
    for x in data.train.iter().take(3) {
        println!("{}", x.tokens.join(" "));
        println!(
            "  moved word {:?} is at {}, came from {}\n",
            x.tokens[x.insert_idx], x.insert_idx, x.orig_idx
        );
    }
    if let Some(out) = std::env::args().nth(1).map(PathBuf::from) {
        data.write(&out)?;
        println!("wrote {}", out.display());
    }
    Ok(())
}
