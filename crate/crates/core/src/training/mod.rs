//! Co-trained WRD models, frozen-representation probes and proxy
//! pretraining of encoders.

mod dump;
mod looper;
mod proxy;
mod wrd;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, WrdError};
use crate::textdata::{Vocabulary, WrdInstance};

pub use dump::ReprDump;
pub use proxy::{pretrain_proxy, ProxyObjective, ProxyOutcome, ProxyPoint};
pub use wrd::{
    evaluate_wrd, predict_at_layer, predict_reprs, predict_wrd, probe_frozen, train_wrd, ProbeOutcome, ReprSource,
    TrainOutcome,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Sentences per step.
    pub batch_size: usize,
    pub max_steps: usize,
    pub seed: u64,
    /// Validation runs every this many steps and after the last step.
    pub eval_interval: usize,
    pub warmup_steps: usize,
    /// Multiplier on the learning-rate schedule.
    pub lr_scale: f64,
    /// Stop once the validation selection metric reaches this value.
    pub stop_at: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            max_steps: 20_000,
            seed: 1,
            eval_interval: 500,
            warmup_steps: 1000,
            lr_scale: 1.0,
            stop_at: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_steps == 0 || self.eval_interval == 0 || self.warmup_steps == 0 {
            return Err(WrdError::Config(
                "batch_size, max_steps, eval_interval and warmup_steps must be positive".into(),
            ));
        }
        if !(self.lr_scale.is_finite() && self.lr_scale > 0.0) {
            return Err(WrdError::Config(format!("lr_scale {} must be positive", self.lr_scale)));
        }
        Ok(())
    }
}

/// One validation point of a WRD learning curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    /// Mean training loss since the previous point.
    pub train_loss: f64,
    pub valid_insert_acc: f64,
    pub valid_orig_acc: f64,
    pub valid_both_acc: f64,
}

pub const CURVE_HEADER: &str = "step,train_loss,valid_insert_acc,valid_orig_acc,valid_both_acc";

pub fn curve_csv(curve: &[CurvePoint]) -> String {
    let mut s = format!("{CURVE_HEADER}\n");
    for p in curve {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            p.step, p.train_loss, p.valid_insert_acc, p.valid_orig_acc, p.valid_both_acc
        );
    }
    s
}

pub fn write_curve(path: impl AsRef<Path>, curve: &[CurvePoint]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, curve_csv(curve)).map_err(|e| WrdError::io(path, e))
}

/// Token ids plus gold `(insert, orig)` of one instance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Encoded {
    pub ids: Vec<usize>,
    pub gold: (usize, usize),
}

pub fn encode_instances(vocab: &Vocabulary, instances: &[WrdInstance]) -> Vec<Encoded> {
    instances
        .iter()
        .map(|x| Encoded {
            ids: vocab.encode(&x.tokens),
            gold: (x.insert_idx, x.orig_idx),
        })
        .collect()
}
