//! The `wrd` command line.
//!
//! Every command resolves a [`RunConfig`] from defaults, an optional
//! `--config` file, `--set KEY=VALUE` overrides and finally dedicated flags,
//! and echoes the result to `config.txt` in its output directory.

mod config;

use std::collections::HashSet;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

pub use config::{LayerChoice, Regime, RunConfig};

use crate::checkpoint::{param_hash, Checkpoint};
use crate::detector::Detector;
use crate::encoders::Encoder;
use crate::error::{Result, WrdError};
use crate::evaluation::{distance_buckets, layer_sweep, score, table_row, ProbeReport};
use crate::numerics::Rng;
use crate::textdata::{
    build_vocab, generate_dataset, read_corpus, read_jsonl, GenerationOptions, Split, Vocabulary, WrdInstance,
};
use crate::training::{
    predict_at_layer, predict_reprs, predict_wrd, pretrain_proxy, probe_frozen, train_wrd, write_curve, ProxyPoint,
    ReprDump, ReprSource,
};

const VOCAB_FILE: &str = "vocab.json";

#[derive(Parser, Debug)]
#[command(
    name = "wrd",
    version,
    about = "Word reordering detection: train, probe and evaluate sequence encoders"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Default)]
struct Common {
    /// Configuration file of `key = value` lines.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one configuration key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Args, Debug, Default)]
struct ModelFlags {
    /// rnn | san | disan
    #[arg(long)]
    arch: Option<String>,
    /// Disable the sinusoidal position encoding.
    #[arg(long)]
    no_pos_emb: bool,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample train/valid/test WRD instances from a tokenized corpus.
    GenData {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// train,valid,test instance counts
        #[arg(long)]
        counts: Option<String>,
        #[arg(long)]
        max_len: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Co-train an encoder with the detector (or dispatch on `regime`).
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        common: Common,
    },
    /// Pretrain an encoder on a token-prediction proxy task.
    PretrainProxy {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// reverse | copy | denoise
        #[arg(long)]
        objective: Option<String>,
        #[command(flatten)]
        model: ModelFlags,
        #[command(flatten)]
        common: Common,
    },
    /// Train only a detector on frozen representations.
    Probe {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Directory with `train/` and `valid/` representation dumps.
        #[arg(long)]
        dump: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Layer index, `final` or `all`.
        #[arg(long)]
        layer: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Score a checkpoint on the test split.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Directory with a `test/` dump, for detector-only checkpoints.
        #[arg(long)]
        dump: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Bucket lower edges, e.g. 1,3,6,11.
        #[arg(long)]
        buckets: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Collect `report.json` files into one accuracy table.
    Report {
        /// Run directories or report files.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("wrd: {e}");
            e.exit_code()
        }
    }
}

fn resolve(common: &Common, flags: &[(&str, Option<String>)]) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = &common.config {
        cfg.apply_file(path)?;
    }
    for pair in &common.set {
        cfg.set_pair(pair)?;
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    for (key, value) in flags {
        if let Some(v) = value {
            cfg.set(key, v)?;
        }
    }
    Ok(cfg)
}

fn path_flag(p: &Option<PathBuf>) -> Option<String> {
    p.as_ref().map(|p| p.display().to_string())
}

fn model_flags(m: &ModelFlags) -> Vec<(&'static str, Option<String>)> {
    vec![
        ("arch", m.arch.clone()),
        ("pos_emb", m.no_pos_emb.then(|| "false".to_string())),
        ("layers", m.layers.map(|v| v.to_string())),
        ("model_dim", m.dim.map(|v| v.to_string())),
    ]
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            corpus,
            out,
            counts,
            max_len,
            common,
        } => {
            let cfg = resolve(
                &common,
                &[
                    ("corpus", path_flag(&corpus)),
                    ("out_dir", path_flag(&out)),
                    ("counts", counts),
                    ("max_len", max_len.map(|v| v.to_string())),
                ],
            )?;
            cmd_gen_data(&cfg)
        }
        Command::Train {
            data,
            out,
            model,
            common,
        } => {
            let mut flags = vec![("data_dir", path_flag(&data)), ("out_dir", path_flag(&out))];
            flags.extend(model_flags(&model));
            let cfg = resolve(&common, &flags)?;
            match cfg.regime {
                Regime::WrdCotrain => cmd_train(&cfg),
                Regime::ProxyPretrain => cmd_pretrain(&cfg),
                Regime::FrozenProbe => cmd_probe(&cfg),
            }
        }
        Command::PretrainProxy {
            data,
            out,
            objective,
            model,
            common,
        } => {
            let mut flags = vec![
                ("data_dir", path_flag(&data)),
                ("out_dir", path_flag(&out)),
                ("proxy_objective", objective),
                ("regime", Some("proxy_pretrain".into())),
            ];
            flags.extend(model_flags(&model));
            cmd_pretrain(&resolve(&common, &flags)?)
        }
        Command::Probe {
            checkpoint,
            dump,
            data,
            out,
            layer,
            common,
        } => {
            let cfg = resolve(
                &common,
                &[
                    ("checkpoint", path_flag(&checkpoint)),
                    ("dump_dir", path_flag(&dump)),
                    ("data_dir", path_flag(&data)),
                    ("out_dir", path_flag(&out)),
                    ("probe_layer", layer),
                    ("regime", Some("frozen_probe".into())),
                ],
            )?;
            cmd_probe(&cfg)
        }
        Command::Eval {
            checkpoint,
            dump,
            data,
            out,
            buckets,
            common,
        } => {
            let cfg = resolve(
                &common,
                &[
                    ("checkpoint", path_flag(&checkpoint)),
                    ("dump_dir", path_flag(&dump)),
                    ("data_dir", path_flag(&data)),
                    ("out_dir", path_flag(&out)),
                    ("buckets", buckets),
                ],
            )?;
            cmd_eval(&cfg)
        }
        Command::Report { runs, out } => cmd_report(&runs, out.as_deref()),
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| WrdError::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| WrdError::io(path, e))
}

/// Creates the output directory and echoes the effective configuration.
fn prepare_out(cfg: &RunConfig) -> Result<PathBuf> {
    let out = cfg.require("out_dir")?.to_path_buf();
    fs::create_dir_all(&out).map_err(|e| WrdError::io(&out, e))?;
    write_text(&out.join("config.txt"), &cfg.render())?;
    Ok(out)
}

struct Data {
    vocab: Vocabulary,
    train: Vec<WrdInstance>,
    valid: Vec<WrdInstance>,
    test: Vec<WrdInstance>,
}

fn load_vocab(path: &Path) -> Result<Vocabulary> {
    let text = fs::read_to_string(path).map_err(|e| WrdError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| WrdError::json(path, e))
}

fn load_data(cfg: &RunConfig) -> Result<Data> {
    let dir = cfg.require("data_dir")?;
    if !dir.is_dir() {
        return Err(WrdError::Usage(format!(
            "data_dir `{}` is not a directory",
            dir.display()
        )));
    }
    Ok(Data {
        vocab: load_vocab(&dir.join(VOCAB_FILE))?,
        train: read_jsonl(&dir.join(Split::Train.file_name()))?,
        valid: read_jsonl(&dir.join(Split::Valid.file_name()))?,
        test: read_jsonl(&dir.join(Split::Test.file_name()))?,
    })
}

fn cmd_gen_data(cfg: &RunConfig) -> Result<()> {
    let corpus_path = cfg.require("corpus")?;
    let out = prepare_out(cfg)?;
    let corpus = read_corpus(corpus_path)?;
    let mut opts = GenerationOptions::new(cfg.counts);
    opts.max_len = cfg.max_len;
    opts.holdout_fraction = cfg.holdout_fraction;
    let data = generate_dataset(&corpus, &opts, &Rng::new(cfg.seed))?;
    data.write(&out)?;
    let vocab = build_vocab(data.train.iter().map(|x| x.tokens.as_slice()), cfg.vocab_size)?;
    let vp = out.join(VOCAB_FILE);
    let text = serde_json::to_string(&vocab).map_err(|e| WrdError::json(&vp, e))?;
    write_text(&vp, &(text + "\n"))?;
    println!(
        "wrote {} / {} / {} instances and a {}-entry vocabulary to {}",
        data.train.len(),
        data.valid.len(),
        data.test.len(),
        vocab.len(),
        out.display()
    );
    Ok(())
}

fn new_detector(cfg: &RunConfig, d: usize) -> Result<Detector> {
    Detector::new(
        d,
        cfg.detector_mode,
        cfg.dropout,
        &mut Rng::new(cfg.seed).derive("detector-init", 0),
    )
}

fn test_report(model: &str, cfg: &RunConfig, preds: &[(usize, usize)], test: &[WrdInstance]) -> Result<ProbeReport> {
    let mut report = ProbeReport::new(model, score(preds, test)?, cfg.fingerprint(), cfg.seed);
    report.distance_buckets = distance_buckets(preds, test, &cfg.buckets)?;
    Ok(report)
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let data = load_data(cfg)?;
    let enc_cfg = cfg.encoder_config()?;
    let tc = cfg.train_config()?;
    let out = prepare_out(cfg)?;
    let encoder = Encoder::new(
        enc_cfg,
        data.vocab.len(),
        &mut Rng::new(cfg.seed).derive("encoder-init", 0),
    )?;
    let detector = new_detector(cfg, cfg.model_dim)?;
    let result = train_wrd(encoder, detector, &data.vocab, &data.train, &data.valid, &tc)?;
    let ck = Checkpoint {
        encoder: Some(result.encoder.clone()),
        detector: Some(result.detector.clone()),
        vocab: Some(data.vocab.clone()),
        probe_layer: None,
    };
    ck.save(out.join("checkpoint"))?;
    write_curve(out.join("curve.csv"), &result.curve)?;
    let ids: Vec<_> = data.test.iter().map(|x| data.vocab.encode(&x.tokens)).collect();
    let preds = predict_wrd(&result.encoder, &result.detector, &ids)?;
    let mut report = test_report(&model_name(cfg), cfg, &preds, &data.test)?;
    report.curve = result.curve;
    report.emit(&out)?;
    println!("best validation step {}", result.best_step);
    print!("{}", report.to_tsv());
    Ok(())
}

fn model_name(cfg: &RunConfig) -> String {
    if cfg.pos_emb {
        cfg.arch.to_string()
    } else {
        format!("{}-pos_emb", cfg.arch)
    }
}

/// Distinct source sentences of a split, in first-seen order.
fn sources(instances: &[WrdInstance]) -> Vec<Vec<String>> {
    let mut seen = HashSet::new();
    instances
        .iter()
        .filter(|x| seen.insert(x.source.clone()))
        .map(|x| x.source.split_whitespace().map(str::to_string).collect())
        .collect()
}

fn cmd_pretrain(cfg: &RunConfig) -> Result<()> {
    let data = load_data(cfg)?;
    let enc_cfg = cfg.encoder_config()?;
    let tc = cfg.train_config()?;
    let out = prepare_out(cfg)?;
    let encoder = Encoder::new(
        enc_cfg,
        data.vocab.len(),
        &mut Rng::new(cfg.seed).derive("encoder-init", 0),
    )?;
    let result = pretrain_proxy(
        encoder,
        &data.vocab,
        &sources(&data.train),
        &sources(&data.valid),
        cfg.proxy_objective,
        &tc,
    )?;
    let ck = Checkpoint {
        encoder: Some(result.encoder),
        detector: None,
        vocab: Some(data.vocab),
        probe_layer: None,
    };
    ck.save(out.join("checkpoint"))?;
    write_text(&out.join("curve.csv"), &proxy_curve_csv(&result.curve))?;
    println!(
        "proxy `{}`: best validation token accuracy {:.4} at step {}",
        cfg.proxy_objective, result.valid_token_acc, result.best_step
    );
    Ok(())
}

fn proxy_curve_csv(curve: &[ProxyPoint]) -> String {
    let mut s = String::from("step,train_loss,valid_token_acc\n");
    for p in curve {
        let _ = writeln!(s, "{},{},{}", p.step, p.train_loss, p.valid_token_acc);
    }
    s
}

fn cmd_probe(cfg: &RunConfig) -> Result<()> {
    let data = load_data(cfg)?;
    let tc = cfg.train_config()?;
    match (&cfg.checkpoint, &cfg.dump_dir) {
        (Some(_), Some(_)) => Err(WrdError::Usage(
            "give either `checkpoint` or `dump_dir`, not both".into(),
        )),
        (None, None) => Err(WrdError::Usage(
            "missing required setting `checkpoint` or `dump_dir`".into(),
        )),
        (Some(path), None) => {
            let ck = Checkpoint::load(path)?;
            let encoder = ck.require_encoder()?;
            let vocab = ck.require_vocab()?;
            let out = prepare_out(cfg)?;
            let before = param_hash(&encoder.params);
            let layer = match cfg.probe_layer {
                LayerChoice::All => {
                    let rows = layer_sweep(
                        encoder,
                        vocab,
                        &data.train,
                        &data.valid,
                        cfg.seed,
                        cfg.detector_mode,
                        cfg.dropout,
                        &tc,
                    )?;
                    check_frozen(&before, &param_hash(&encoder.params))?;
                    let (_, last) = rows.last().expect("at least one layer");
                    let scores = last.valid;
                    let mut report =
                        ProbeReport::new(encoder.config.arch.to_string(), scores, cfg.fingerprint(), cfg.seed);
                    report.layer_accs = Some(rows.iter().map(|(r, _)| r.clone()).collect());
                    report.distance_buckets = distance_buckets(&last.valid_preds, &data.valid, &cfg.buckets)?;
                    report.curve = last.curve.clone();
                    report.emit(&out)?;
                    println!("encoder parameters unchanged: {before}");
                    print!("{}", report.to_tsv());
                    return Ok(());
                }
                LayerChoice::Final => encoder.config.num_layers,
                LayerChoice::Index(n) => n,
            };
            let det = new_detector(cfg, encoder.config.model_dim)?;
            let src = ReprSource::Encoder { encoder, vocab, layer };
            let result = probe_frozen(src, det, &data.train, &data.valid, &tc)?;
            let (b, a) = result.encoder_hash.clone().expect("encoder source");
            check_frozen(&b, &a)?;
            let head = Checkpoint {
                encoder: Some(encoder.clone()),
                detector: Some(result.detector.clone()),
                vocab: Some(vocab.clone()),
                probe_layer: Some(layer),
            };
            head.save(out.join("checkpoint"))?;
            write_curve(out.join("curve.csv"), &result.curve)?;
            let mut report = ProbeReport::new(
                format!("{} layer {layer}", encoder.config.arch),
                result.valid,
                cfg.fingerprint(),
                cfg.seed,
            );
            report.distance_buckets = distance_buckets(&result.valid_preds, &data.valid, &cfg.buckets)?;
            report.curve = result.curve;
            report.emit(&out)?;
            println!("encoder parameters unchanged: {b}");
            print!("{}", report.to_tsv());
            Ok(())
        }
        (None, Some(dir)) => {
            if cfg.probe_layer == LayerChoice::All {
                return Err(WrdError::Usage(
                    "`probe_layer = all` needs an encoder checkpoint".into(),
                ));
            }
            let train = ReprDump::load(dir.join("train"))?;
            let valid = ReprDump::load(dir.join("valid"))?;
            let out = prepare_out(cfg)?;
            let det = new_detector(cfg, train.d)?;
            let result = probe_frozen(
                ReprSource::Dumps {
                    train: &train,
                    valid: &valid,
                },
                det,
                &data.train,
                &data.valid,
                &tc,
            )?;
            let head = Checkpoint {
                detector: Some(result.detector.clone()),
                ..Default::default()
            };
            head.save(out.join("checkpoint"))?;
            write_curve(out.join("curve.csv"), &result.curve)?;
            let mut report = ProbeReport::new(
                format!("dump: {}", train.producer),
                result.valid,
                cfg.fingerprint(),
                cfg.seed,
            );
            report.distance_buckets = distance_buckets(&result.valid_preds, &data.valid, &cfg.buckets)?;
            report.curve = result.curve;
            report.emit(&out)?;
            print!("{}", report.to_tsv());
            Ok(())
        }
    }
}

fn check_frozen(before: &str, after: &str) -> Result<()> {
    if before != after {
        return Err(WrdError::Numeric(format!(
            "encoder parameters changed during probing ({before} -> {after})"
        )));
    }
    Ok(())
}

fn cmd_eval(cfg: &RunConfig) -> Result<()> {
    let path = cfg.require("checkpoint")?;
    let ck = Checkpoint::load(path)?;
    let data = load_data(cfg)?;
    let detector = ck.require_detector()?;
    let (model, preds) = match &ck.encoder {
        Some(encoder) => {
            let vocab = ck.require_vocab()?;
            let ids: Vec<_> = data.test.iter().map(|x| vocab.encode(&x.tokens)).collect();
            match ck.probe_layer {
                Some(layer) => (
                    format!("{} layer {layer}", encoder.config.arch),
                    predict_at_layer(encoder, detector, &ids, layer)?,
                ),
                None => (encoder.config.arch.to_string(), predict_wrd(encoder, detector, &ids)?),
            }
        }
        None => {
            let dir = cfg.require("dump_dir")?;
            let dump = ReprDump::load(dir.join("test"))?;
            dump.check_alignment(&data.test)?;
            if dump.d != detector.model_dim {
                return Err(WrdError::Alignment(format!(
                    "dump width {} differs from detector width {}",
                    dump.d, detector.model_dim
                )));
            }
            (
                format!("dump: {}", dump.producer),
                predict_reprs(detector, &dump.records)?,
            )
        }
    };
    let report = test_report(&model, cfg, &preds, &data.test)?;
    if cfg.out_dir.is_some() {
        let out = prepare_out(cfg)?;
        report.emit(&out)?;
    }
    print!("{}", report.to_tsv());
    Ok(())
}

fn cmd_report(runs: &[PathBuf], out: Option<&Path>) -> Result<()> {
    let mut table = String::from("model\tinsert\toriginal\tboth\n");
    for run in runs {
        let path = if run.is_dir() {
            run.join("report.json")
        } else {
            run.clone()
        };
        let r = ProbeReport::load(&path)?;
        table.push_str(&table_row(&r.model, r.insert_acc, r.orig_acc, r.both_acc));
        if let Some(layers) = &r.layer_accs {
            for l in layers {
                table.push_str(&table_row(
                    &format!("{} layer {}", r.model, l.layer),
                    l.insert,
                    l.orig,
                    l.both,
                ));
            }
        }
    }
    if let Some(out) = out {
        write_text(out, &table)?;
    }
    print!("{table}");
    Ok(())
}
