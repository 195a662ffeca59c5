//! Corpus ingestion, vocabulary and word-reordering instance generation.

mod dataset;
mod instance;
mod vocab;

pub use dataset::{
    generate_dataset, read_corpus, read_jsonl, tokenize_lines, write_jsonl, DatasetManifest, GeneratedData,
    GenerationOptions, Split, SplitCounts, DEFAULT_MAX_LEN, SHARD_SIZE,
};
pub use instance::{apply_move, generate_instance, move_instance, sample_pair, verify_instance, WrdInstance};
pub use vocab::{build_vocab, Vocabulary, PAD, PAD_TOKEN, UNK, UNK_TOKEN};
