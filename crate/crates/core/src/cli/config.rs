//! Flat `key = value` run configuration.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::detector::DetectorMode;
use crate::encoders::{Arch, EncoderConfig};
use crate::error::{Result, WrdError};
use crate::evaluation::{parse_bucket_edges, DEFAULT_BUCKET_EDGES};
use crate::textdata::{SplitCounts, DEFAULT_MAX_LEN};
use crate::training::{ProxyObjective, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regime {
    WrdCotrain,
    FrozenProbe,
    ProxyPretrain,
}

impl Regime {
    fn name(self) -> &'static str {
        match self {
            Regime::WrdCotrain => "wrd_cotrain",
            Regime::FrozenProbe => "frozen_probe",
            Regime::ProxyPretrain => "proxy_pretrain",
        }
    }
}

/// Which layer a probe reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerChoice {
    Final,
    Index(usize),
    All,
}

/// Every setting a run can take. Unknown keys are rejected.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub corpus: Option<PathBuf>,
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub dump_dir: Option<PathBuf>,

    pub counts: SplitCounts,
    pub max_len: usize,
    pub holdout_fraction: f64,
    pub vocab_size: usize,

    pub arch: Arch,
    pub layers: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub pos_emb: bool,
    pub dropout: f64,

    pub regime: Regime,
    pub batch_size: usize,
    pub max_steps: usize,
    pub seed: u64,
    pub eval_interval: usize,
    pub warmup_steps: usize,
    pub lr_scale: f64,
    pub detector_mode: DetectorMode,
    pub probe_layer: LayerChoice,
    pub proxy_objective: ProxyObjective,
    pub buckets: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let enc = EncoderConfig::desk(Arch::San);
        let tc = TrainConfig::default();
        RunConfig {
            corpus: None,
            data_dir: None,
            out_dir: None,
            checkpoint: None,
            dump_dir: None,
            counts: SplitCounts {
                train: 50_000,
                valid: 1_000,
                test: 1_000,
            },
            max_len: DEFAULT_MAX_LEN,
            holdout_fraction: 0.1,
            vocab_size: 10_000,
            arch: enc.arch,
            layers: enc.num_layers,
            model_dim: enc.model_dim,
            heads: enc.num_heads,
            ffn_dim: enc.ffn_dim,
            pos_emb: enc.use_position_encoding,
            dropout: enc.dropout,
            regime: Regime::WrdCotrain,
            batch_size: tc.batch_size,
            max_steps: tc.max_steps,
            seed: tc.seed,
            eval_interval: tc.eval_interval,
            warmup_steps: tc.warmup_steps,
            lr_scale: tc.lr_scale,
            detector_mode: DetectorMode::Joint,
            probe_layer: LayerChoice::Final,
            proxy_objective: ProxyObjective::Reverse,
            buckets: DEFAULT_BUCKET_EDGES.to_vec(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| WrdError::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(WrdError::Config(format!(
            "invalid value `{value}` for `{key}` (true | false)"
        ))),
    }
}

fn path_or_none(value: &str) -> Option<PathBuf> {
    (!value.is_empty() && value != "none").then(|| PathBuf::from(value))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or("none".into(), |p| p.display().to_string())
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "corpus" => self.corpus = path_or_none(v),
            "data_dir" => self.data_dir = path_or_none(v),
            "out_dir" => self.out_dir = path_or_none(v),
            "checkpoint" => self.checkpoint = path_or_none(v),
            "dump_dir" => self.dump_dir = path_or_none(v),
            "counts" => {
                let parts: Vec<usize> = v.split(',').map(|p| parse("counts", p.trim())).collect::<Result<_>>()?;
                let [train, valid, test] = parts[..] else {
                    return Err(WrdError::Config(format!("`counts` needs train,valid,test; got `{v}`")));
                };
                self.counts = SplitCounts { train, valid, test };
            }
            "max_len" => self.max_len = parse("max_len", v)?,
            "holdout_fraction" => self.holdout_fraction = parse("holdout_fraction", v)?,
            "vocab_size" => self.vocab_size = parse("vocab_size", v)?,
            "arch" => self.arch = v.parse()?,
            "layers" => self.layers = parse("layers", v)?,
            "model_dim" => self.model_dim = parse("model_dim", v)?,
            "heads" => self.heads = parse("heads", v)?,
            "ffn_dim" => self.ffn_dim = parse("ffn_dim", v)?,
            "pos_emb" => self.pos_emb = parse_bool("pos_emb", v)?,
            "dropout" => self.dropout = parse("dropout", v)?,
            "regime" => {
                self.regime = match v {
                    "wrd_cotrain" => Regime::WrdCotrain,
                    "frozen_probe" => Regime::FrozenProbe,
                    "proxy_pretrain" => Regime::ProxyPretrain,
                    _ => {
                        return Err(WrdError::Config(format!(
                            "invalid regime `{v}` (wrd_cotrain | frozen_probe | proxy_pretrain)"
                        )))
                    }
                }
            }
            "batch_size" => self.batch_size = parse("batch_size", v)?,
            "max_steps" => self.max_steps = parse("max_steps", v)?,
            "seed" => self.seed = parse("seed", v)?,
            "eval_interval" => self.eval_interval = parse("eval_interval", v)?,
            "warmup_steps" => self.warmup_steps = parse("warmup_steps", v)?,
            "lr_scale" => self.lr_scale = parse("lr_scale", v)?,
            "detector_mode" => self.detector_mode = v.parse()?,
            "probe_layer" => {
                self.probe_layer = match v {
                    "final" => LayerChoice::Final,
                    "all" => LayerChoice::All,
                    n => LayerChoice::Index(parse("probe_layer", n)?),
                }
            }
            "proxy_objective" => self.proxy_objective = v.parse()?,
            "buckets" => {
                self.buckets = parse_bucket_edges(v).map_err(|e| WrdError::Config(e.to_string()))?;
            }
            other => return Err(WrdError::Config(format!("unknown configuration key `{other}`"))),
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| WrdError::Config(format!("expected KEY=VALUE, got `{pair}`")))?;
        self.set(k, v)
    }

    /// Applies every `key = value` line of `text`; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| WrdError::Config(format!("{origin}:{}: expected `key = value`", n + 1)))?;
            self.set(k, v)
                .map_err(|e| WrdError::Config(format!("{origin}:{}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| WrdError::io(path, e))?;
        self.apply_text(&text, &path.display().to_string())
    }

    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let c = &self.counts;
        let layer = match self.probe_layer {
            LayerChoice::Final => "final".to_string(),
            LayerChoice::All => "all".to_string(),
            LayerChoice::Index(n) => n.to_string(),
        };
        let buckets: Vec<String> = self.buckets.iter().map(ToString::to_string).collect();
        vec![
            ("corpus", show_path(&self.corpus)),
            ("data_dir", show_path(&self.data_dir)),
            ("out_dir", show_path(&self.out_dir)),
            ("checkpoint", show_path(&self.checkpoint)),
            ("dump_dir", show_path(&self.dump_dir)),
            ("counts", format!("{},{},{}", c.train, c.valid, c.test)),
            ("max_len", self.max_len.to_string()),
            ("holdout_fraction", self.holdout_fraction.to_string()),
            ("vocab_size", self.vocab_size.to_string()),
            ("arch", self.arch.to_string()),
            ("layers", self.layers.to_string()),
            ("model_dim", self.model_dim.to_string()),
            ("heads", self.heads.to_string()),
            ("ffn_dim", self.ffn_dim.to_string()),
            ("pos_emb", self.pos_emb.to_string()),
            ("dropout", self.dropout.to_string()),
            ("regime", self.regime.name().to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("max_steps", self.max_steps.to_string()),
            ("seed", self.seed.to_string()),
            ("eval_interval", self.eval_interval.to_string()),
            ("warmup_steps", self.warmup_steps.to_string()),
            ("lr_scale", self.lr_scale.to_string()),
            ("detector_mode", self.detector_mode.to_string()),
            ("probe_layer", layer),
            ("proxy_objective", self.proxy_objective.to_string()),
            ("buckets", buckets.join(",")),
        ]
    }

    /// The effective configuration in the file format; reading it back
    /// reproduces `self`.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.entries() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// Short hash of the settings that affect results (paths excluded).
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in self.entries() {
            if !matches!(k, "corpus" | "data_dir" | "out_dir" | "checkpoint" | "dump_dir") {
                h.update(format!("{k}={v}\n"));
            }
        }
        h.finalize().iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn encoder_config(&self) -> Result<EncoderConfig> {
        let c = EncoderConfig {
            arch: self.arch,
            num_layers: self.layers,
            model_dim: self.model_dim,
            num_heads: self.heads,
            ffn_dim: self.ffn_dim,
            use_position_encoding: self.pos_emb,
            dropout: self.dropout,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = TrainConfig {
            batch_size: self.batch_size,
            max_steps: self.max_steps,
            seed: self.seed,
            eval_interval: self.eval_interval,
            warmup_steps: self.warmup_steps,
            lr_scale: self.lr_scale,
            stop_at: None,
        };
        t.validate()?;
        Ok(t)
    }

    /// A path setting that the current command cannot run without.
    pub fn require(&self, key: &'static str) -> Result<&Path> {
        let p = match key {
            "corpus" => &self.corpus,
            "data_dir" => &self.data_dir,
            "out_dir" => &self.out_dir,
            "checkpoint" => &self.checkpoint,
            "dump_dir" => &self.dump_dir,
            _ => unreachable!("not a path key: {key}"),
        };
        p.as_deref()
            .ok_or_else(|| WrdError::Usage(format!("missing required setting `{key}`")))
    }
}
