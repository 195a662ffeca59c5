//! Insert / Original / Both accuracy, distance buckets, chance baselines and
//! report files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detector::{Detector, DetectorMode};
use crate::encoders::Encoder;
use crate::error::{Result, WrdError};
use crate::numerics::Rng;
use crate::textdata::{Vocabulary, WrdInstance};
use crate::training::{probe_frozen, CurvePoint, ProbeOutcome, ReprSource, TrainConfig};

/// Default bucket lower edges: 1-2, 3-5, 6-10, 11+.
pub const DEFAULT_BUCKET_EDGES: [usize; 4] = [1, 3, 6, 11];

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub insert: f64,
    pub orig: f64,
    pub both: f64,
    pub count: usize,
}

/// Accuracy of `(insert, orig)` predictions against gold pairs.
pub fn score_pairs(preds: &[(usize, usize)], gold: &[(usize, usize)]) -> Result<Scores> {
    if preds.len() != gold.len() {
        return Err(WrdError::Input(format!(
            "{} predictions for {} gold instances",
            preds.len(),
            gold.len()
        )));
    }
    if preds.is_empty() {
        return Err(WrdError::Input("nothing to score".into()));
    }
    let (mut i, mut o, mut b) = (0usize, 0usize, 0usize);
    for (&(pi, po), &(gi, go)) in preds.iter().zip(gold) {
        i += (pi == gi) as usize;
        o += (po == go) as usize;
        b += (pi == gi && po == go) as usize;
    }
    let n = preds.len() as f64;
    Ok(Scores {
        insert: i as f64 / n,
        orig: o as f64 / n,
        both: b as f64 / n,
        count: preds.len(),
    })
}

pub fn score(preds: &[(usize, usize)], golds: &[WrdInstance]) -> Result<Scores> {
    let gold: Vec<_> = golds.iter().map(|g| (g.insert_idx, g.orig_idx)).collect();
    score_pairs(preds, &gold)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketRow {
    pub label: String,
    pub lo: usize,
    /// Inclusive upper bound; `None` for the open last bucket.
    pub hi: Option<usize>,
    pub count: usize,
    /// Both-accuracy; absent for an empty bucket.
    pub both_acc: Option<f64>,
}

/// Parses a comma-separated list of strictly increasing positive edges.
pub fn parse_bucket_edges(s: &str) -> Result<Vec<usize>> {
    let edges = s
        .split(',')
        .map(|t| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| WrdError::Usage(format!("bad bucket edge `{}`", t.trim())))
        })
        .collect::<Result<Vec<_>>>()?;
    check_edges(&edges)?;
    Ok(edges)
}

fn check_edges(edges: &[usize]) -> Result<()> {
    if edges.is_empty() || edges[0] == 0 || edges.windows(2).any(|w| w[0] >= w[1]) {
        return Err(WrdError::Usage(format!(
            "bucket edges must be positive and strictly increasing, got {edges:?}"
        )));
    }
    Ok(())
}

fn bucket_label(lo: usize, hi: Option<usize>) -> String {
    match hi {
        Some(h) if h == lo => lo.to_string(),
        Some(h) => format!("{lo}-{h}"),
        None => format!("{lo}+"),
    }
}

/// Both-accuracy grouped by gold distance `|insert - orig|`. Edges are the
/// lower bounds of the buckets; distances below `edges[0]` get their own
/// leading bucket.
pub fn distance_buckets(preds: &[(usize, usize)], golds: &[WrdInstance], edges: &[usize]) -> Result<Vec<BucketRow>> {
    check_edges(edges)?;
    if preds.len() != golds.len() {
        return Err(WrdError::Input(format!(
            "{} predictions for {} gold instances",
            preds.len(),
            golds.len()
        )));
    }
    let mut bounds: Vec<(usize, Option<usize>)> = Vec::new();
    if edges[0] > 1 {
        bounds.push((1, Some(edges[0] - 1)));
    }
    for (k, &lo) in edges.iter().enumerate() {
        bounds.push((lo, edges.get(k + 1).map(|&n| n - 1)));
    }
    let mut counts = vec![(0usize, 0usize); bounds.len()];
    for (p, g) in preds.iter().zip(golds) {
        let dist = g.distance();
        let k = bounds
            .iter()
            .position(|&(lo, hi)| dist >= lo && hi.is_none_or(|h| dist <= h))
            .expect("buckets cover every positive distance");
        counts[k].0 += 1;
        counts[k].1 += (p.0 == g.insert_idx && p.1 == g.orig_idx) as usize;
    }
    Ok(bounds
        .into_iter()
        .zip(counts)
        .map(|((lo, hi), (n, ok))| BucketRow {
            label: bucket_label(lo, hi),
            lo,
            hi,
            count: n,
            both_acc: (n > 0).then(|| ok as f64 / n as f64),
        })
        .collect())
}

/// Expected Both-accuracy of a predictor that knows nothing about the
/// instance beyond its length, together with its standard error.
///
/// For an instance of length `N` whose predicted pair is `(i, o)`, a gold
/// pair drawn uniformly from the `N(N-1)` ordered pairs with distinct entries
/// matches with probability `1/(N(N-1))` when `i != o` and `0` otherwise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChanceBaseline {
    pub mean: f64,
    pub std_err: f64,
}

impl ChanceBaseline {
    pub fn new(preds: &[(usize, usize)], lengths: &[usize]) -> Result<Self> {
        if preds.len() != lengths.len() || preds.is_empty() {
            return Err(WrdError::Input(
                "chance baseline needs one prediction per instance".into(),
            ));
        }
        let m = preds.len() as f64;
        let (mut sum, mut var) = (0.0, 0.0);
        for (&(i, o), &n) in preds.iter().zip(lengths) {
            let p = if i != o && n >= 2 {
                1.0 / (n * (n - 1)) as f64
            } else {
                0.0
            };
            sum += p;
            var += p * (1.0 - p);
        }
        Ok(ChanceBaseline {
            mean: sum / m,
            std_err: var.sqrt() / m,
        })
    }

    /// Whether `acc` lies within `k` standard errors of the baseline.
    pub fn within(&self, acc: f64, k: f64) -> bool {
        (acc - self.mean).abs() <= k * self.std_err
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRow {
    pub layer: usize,
    pub insert: f64,
    pub orig: f64,
    pub both: f64,
}

/// Probes every layer `0..=num_layers` of a frozen encoder, each with a
/// fresh detector initialized from `detector_seed`.
#[allow(clippy::too_many_arguments)]
pub fn layer_sweep(
    encoder: &Encoder,
    vocab: &Vocabulary,
    train: &[WrdInstance],
    valid: &[WrdInstance],
    detector_seed: u64,
    mode: DetectorMode,
    dropout: f64,
    cfg: &TrainConfig,
) -> Result<Vec<(LayerRow, ProbeOutcome)>> {
    (0..=encoder.config.num_layers)
        .map(|layer| {
            let det = Detector::new(encoder.config.model_dim, mode, dropout, &mut Rng::new(detector_seed))?;
            let src = ReprSource::Encoder { encoder, vocab, layer };
            let out = probe_frozen(src, det, train, valid, cfg)?;
            let row = LayerRow {
                layer,
                insert: out.valid.insert,
                orig: out.valid.orig,
                both: out.valid.both,
            };
            Ok((row, out))
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub model: String,
    pub insert_acc: f64,
    pub orig_acc: f64,
    pub both_acc: f64,
    pub count: usize,
    pub distance_buckets: Vec<BucketRow>,
    pub layer_accs: Option<Vec<LayerRow>>,
    pub curve: Vec<CurvePoint>,
    pub config_fingerprint: String,
    pub seed: u64,
}

impl ProbeReport {
    pub fn new(model: impl Into<String>, scores: Scores, fingerprint: impl Into<String>, seed: u64) -> Self {
        ProbeReport {
            model: model.into(),
            insert_acc: scores.insert,
            orig_acc: scores.orig,
            both_acc: scores.both,
            count: scores.count,
            distance_buckets: Vec::new(),
            layer_accs: None,
            curve: Vec::new(),
            config_fingerprint: fingerprint.into(),
            seed,
        }
    }

    /// Tab-separated tables: the accuracy triplet as percentages, then the
    /// bucket and layer tables when present.
    pub fn to_tsv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# seed={} config={}", self.seed, self.config_fingerprint);
        s.push_str("model\tinsert\toriginal\tboth\n");
        s.push_str(&table_row(&self.model, self.insert_acc, self.orig_acc, self.both_acc));
        if !self.distance_buckets.is_empty() {
            s.push_str("\ndistance\tcount\tboth\n");
            for b in &self.distance_buckets {
                let acc = b.both_acc.map_or("-".to_string(), |a| format!("{:.1}", 100.0 * a));
                let _ = writeln!(s, "{}\t{}\t{acc}", b.label, b.count);
            }
        }
        if let Some(layers) = &self.layer_accs {
            s.push_str("\nlayer\tinsert\toriginal\tboth\n");
            for r in layers {
                s.push_str(&table_row(&r.layer.to_string(), r.insert, r.orig, r.both));
            }
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map(|s| s + "\n")
            .map_err(|e| WrdError::json("<report>", e))
    }

    /// Writes `report.json` and `report.tsv` into `dir`.
    pub fn emit(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| WrdError::io(dir, e))?;
        let jp = dir.join("report.json");
        fs::write(&jp, self.to_json()?).map_err(|e| WrdError::io(&jp, e))?;
        let tp = dir.join("report.tsv");
        fs::write(&tp, self.to_tsv()).map_err(|e| WrdError::io(&tp, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| WrdError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| WrdError::json(path, e))
    }
}

/// One `model insert original both` row with percentages to one decimal.
pub fn table_row(model: &str, insert: f64, orig: f64, both: f64) -> String {
    format!(
        "{model}\t{:.1}\t{:.1}\t{:.1}\n",
        100.0 * insert,
        100.0 * orig,
        100.0 * both
    )
}
