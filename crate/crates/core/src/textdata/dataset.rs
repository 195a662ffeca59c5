use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::instance::{generate_instance, WrdInstance};
use crate::error::{Result, WrdError};
use crate::numerics::Rng;

/// Instances generated per independently seeded shard.
pub const SHARD_SIZE: usize = 4096;
pub const DEFAULT_MAX_LEN: usize = 80;

/// Reads a one-sentence-per-line corpus, splitting on whitespace. Blank
/// lines are skipped.
pub fn read_corpus(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).map_err(|e| WrdError::io(path, e))?;
    Ok(tokenize_lines(&text))
}

pub fn tokenize_lines(text: &str) -> Vec<Vec<String>> {
    text.lines()
        .map(|l| l.split_whitespace().map(String::from).collect::<Vec<_>>())
        .filter(|s| !s.is_empty())
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }

    pub fn file_name(self) -> String {
        format!("{}.jsonl", self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenerationOptions {
    pub counts: SplitCounts,
    pub max_len: usize,
    /// Fraction of eligible source lines reserved for each held-out split.
    pub holdout_fraction: f64,
}

impl GenerationOptions {
    pub fn new(counts: SplitCounts) -> Self {
        GenerationOptions {
            counts,
            max_len: DEFAULT_MAX_LEN,
            holdout_fraction: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub max_len: usize,
    pub counts: SplitCounts,
    pub eligible_sentences: usize,
    pub pool_sizes: SplitCounts,
    pub shard_size: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedData {
    pub train: Vec<WrdInstance>,
    pub valid: Vec<WrdInstance>,
    pub test: Vec<WrdInstance>,
    pub manifest: DatasetManifest,
}

impl GeneratedData {
    pub fn split(&self, split: Split) -> &[WrdInstance] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    /// Writes `train.jsonl`, `valid.jsonl`, `test.jsonl` and
    /// `manifest.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| WrdError::io(dir, e))?;
        for split in Split::ALL {
            write_jsonl(&dir.join(split.file_name()), self.split(split))?;
        }
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&self.manifest).map_err(|e| WrdError::json(&path, e))?;
        fs::write(&path, text + "\n").map_err(|e| WrdError::io(&path, e))
    }
}

/// Samples WRD instances for the three splits.
///
/// Eligible sentences (2..=max_len tokens, not all one token, deduplicated)
/// are partitioned into disjoint per-split pools, then each split draws its
/// sentences with replacement from its own pool. Each split is produced in
/// shards of [`SHARD_SIZE`] instances with independently derived seeds, so
/// the output is a pure function of the seed.
pub fn generate_dataset(corpus: &[Vec<String>], opts: &GenerationOptions, rng: &Rng) -> Result<GeneratedData> {
    if opts.max_len < 2 {
        return Err(WrdError::Config(format!("max_len {} is below 2", opts.max_len)));
    }
    let mut seen = HashSet::new();
    let eligible: Vec<&[String]> = corpus
        .iter()
        .map(Vec::as_slice)
        .filter(|s| (2..=opts.max_len).contains(&s.len()))
        .filter(|s| s.iter().any(|t| t != &s[0]))
        .filter(|s| seen.insert(s.join(" ")))
        .collect();

    let mut order: Vec<usize> = (0..eligible.len()).collect();
    rng.derive("partition", 0).shuffle(&mut order);
    let n = eligible.len();
    let holdout = |count: usize| {
        if count == 0 {
            0
        } else {
            ((n as f64 * opts.holdout_fraction).round() as usize).max(1)
        }
    };
    let n_valid = holdout(opts.counts.valid).min(n);
    let n_test = holdout(opts.counts.test).min(n - n_valid);
    let (valid_pool, rest) = order.split_at(n_valid);
    let (test_pool, train_pool) = rest.split_at(n_test);

    let sample = |split: Split, pool: &[usize], count: usize| -> Result<Vec<WrdInstance>> {
        if count == 0 {
            return Ok(Vec::new());
        }
        if pool.is_empty() {
            return Err(WrdError::Input(format!(
                "no eligible sentences left for the {} split",
                split.name()
            )));
        }
        let mut out = Vec::with_capacity(count);
        for shard in 0..count.div_ceil(SHARD_SIZE) {
            let mut shard_rng = rng.derive(split.name(), shard as u64);
            let len = SHARD_SIZE.min(count - shard * SHARD_SIZE);
            for _ in 0..len {
                let sentence = eligible[pool[shard_rng.below(pool.len())]];
                out.push(generate_instance(sentence, &mut shard_rng)?);
            }
        }
        Ok(out)
    };

    let manifest = DatasetManifest {
        seed: rng.seed(),
        max_len: opts.max_len,
        counts: opts.counts,
        eligible_sentences: n,
        pool_sizes: SplitCounts {
            train: train_pool.len(),
            valid: valid_pool.len(),
            test: test_pool.len(),
        },
        shard_size: SHARD_SIZE,
    };
    Ok(GeneratedData {
        train: sample(Split::Train, train_pool, opts.counts.train)?,
        valid: sample(Split::Valid, valid_pool, opts.counts.valid)?,
        test: sample(Split::Test, test_pool, opts.counts.test)?,
        manifest,
    })
}

pub fn write_jsonl(path: &Path, instances: &[WrdInstance]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| WrdError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for inst in instances {
        let line = serde_json::to_string(inst).map_err(|e| WrdError::json(path, e))?;
        writeln!(w, "{line}").map_err(|e| WrdError::io(path, e))?;
    }
    w.flush().map_err(|e| WrdError::io(path, e))
}

/// Loads a JSONL dataset, rejecting malformed lines and invalid labels.
pub fn read_jsonl(path: &Path) -> Result<Vec<WrdInstance>> {
    let file = fs::File::open(path).map_err(|e| WrdError::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| WrdError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let inst: WrdInstance = serde_json::from_str(&line).map_err(|e| WrdError::json(path, e))?;
        inst.check_labels()
            .map_err(|e| WrdError::Input(format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.push(inst);
    }
    Ok(out)
}
