//! On-disk model checkpoints.
//!
//! A checkpoint is a directory holding `manifest.json` (configs, vocabulary
//! and the ordered list of arrays with their shapes) and `params.bin` (all
//! array entries as little-endian `f64`, in manifest order). Encoder arrays
//! live under `encoder.*`, detector arrays under `detector.*`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detector::{Detector, DetectorMode};
use crate::encoders::{Encoder, EncoderConfig};
use crate::error::{Result, WrdError};
use crate::numerics::{ParamSet, Tensor};
use crate::textdata::Vocabulary;

pub const FORMAT: &str = "wrdprobe-checkpoint";
pub const VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderMeta {
    pub config: EncoderConfig,
    pub vocab_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorMeta {
    pub model_dim: usize,
    pub mode: DetectorMode,
    pub dropout: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArrayEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub encoder: Option<EncoderMeta>,
    pub detector: Option<DetectorMeta>,
    pub vocab: Option<Vocabulary>,
    /// Layer whose representations the detector was trained on, for probes.
    pub probe_layer: Option<usize>,
    pub arrays: Vec<ArrayEntry>,
}

/// Any combination of encoder, detector and vocabulary.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub encoder: Option<Encoder>,
    pub detector: Option<Detector>,
    pub vocab: Option<Vocabulary>,
    pub probe_layer: Option<usize>,
}

impl Checkpoint {
    pub fn manifest(&self) -> Manifest {
        let mut arrays = Vec::new();
        for set in self.param_sets() {
            arrays.extend(set.iter().map(|(n, t)| ArrayEntry {
                name: n.to_string(),
                shape: t.shape().to_vec(),
            }));
        }
        Manifest {
            format: FORMAT.into(),
            version: VERSION,
            encoder: self.encoder.as_ref().map(|e| EncoderMeta {
                config: e.config.clone(),
                vocab_size: e.vocab_size,
            }),
            detector: self.detector.as_ref().map(|d| DetectorMeta {
                model_dim: d.model_dim,
                mode: d.mode,
                dropout: d.dropout,
            }),
            vocab: self.vocab.clone(),
            probe_layer: self.probe_layer,
            arrays,
        }
    }

    fn param_sets(&self) -> impl Iterator<Item = &ParamSet> {
        self.encoder
            .iter()
            .map(|e| &e.params)
            .chain(self.detector.iter().map(|d| &d.params))
    }

    /// Contents of `params.bin`.
    pub fn params_bytes(&self) -> Vec<u8> {
        self.param_sets()
            .flat_map(|set| set.iter())
            .flat_map(|(_, t)| t.data().iter().flat_map(|v| v.to_le_bytes()))
            .collect()
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| WrdError::io(dir, e))?;
        let manifest = serde_json::to_string_pretty(&self.manifest()).map_err(|e| WrdError::json(dir, e))?;
        let mpath = dir.join(MANIFEST_FILE);
        fs::write(&mpath, manifest + "\n").map_err(|e| WrdError::io(&mpath, e))?;
        let ppath = dir.join(PARAMS_FILE);
        fs::write(&ppath, self.params_bytes()).map_err(|e| WrdError::io(&ppath, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mpath = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&mpath).map_err(|e| WrdError::io(&mpath, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| WrdError::json(&mpath, e))?;
        if manifest.format != FORMAT || manifest.version != VERSION {
            return Err(WrdError::Input(format!(
                "{}: unsupported checkpoint format {} v{}",
                mpath.display(),
                manifest.format,
                manifest.version
            )));
        }
        let ppath = dir.join(PARAMS_FILE);
        let values = read_f64_le(&ppath)?;
        let expected: usize = manifest.arrays.iter().map(|a| a.shape.iter().product::<usize>()).sum();
        if values.len() != expected {
            return Err(WrdError::Input(format!(
                "{}: holds {} values, manifest lists {expected}",
                ppath.display(),
                values.len()
            )));
        }
        let (mut enc_params, mut det_params) = (ParamSet::new(), ParamSet::new());
        let mut at = 0;
        for a in &manifest.arrays {
            let n: usize = a.shape.iter().product();
            let t = Tensor::new(a.shape.clone(), values[at..at + n].to_vec())?;
            at += n;
            if a.name.starts_with("encoder.") {
                enc_params.insert(a.name.clone(), t);
            } else if a.name.starts_with("detector.") {
                det_params.insert(a.name.clone(), t);
            } else {
                return Err(WrdError::Input(format!(
                    "{}: unknown array namespace `{}`",
                    mpath.display(),
                    a.name
                )));
            }
        }
        let encoder = match manifest.encoder {
            Some(m) => Some(Encoder::from_params(m.config, m.vocab_size, enc_params)?),
            None => None,
        };
        let detector = match manifest.detector {
            Some(m) => Some(Detector::from_params(m.model_dim, m.mode, m.dropout, det_params)?),
            None => None,
        };
        Ok(Checkpoint {
            encoder,
            detector,
            vocab: manifest.vocab,
            probe_layer: manifest.probe_layer,
        })
    }

    pub fn require_encoder(&self) -> Result<&Encoder> {
        self.encoder
            .as_ref()
            .ok_or_else(|| WrdError::Input("checkpoint holds no encoder".into()))
    }

    pub fn require_detector(&self) -> Result<&Detector> {
        self.detector
            .as_ref()
            .ok_or_else(|| WrdError::Input("checkpoint holds no detector".into()))
    }

    pub fn require_vocab(&self) -> Result<&Vocabulary> {
        self.vocab
            .as_ref()
            .ok_or_else(|| WrdError::Input("checkpoint holds no vocabulary".into()))
    }
}

/// Serialized bytes of a parameter set: names, shapes and values.
pub fn param_bytes(set: &ParamSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(set.scalar_count() * 8);
    for (name, t) in set.iter() {
        out.extend(name.as_bytes());
        out.push(0);
        for &s in t.shape() {
            out.extend((s as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend(v.to_le_bytes());
        }
    }
    out
}

/// Hex SHA-256 of [`param_bytes`].
pub fn param_hash(set: &ParamSet) -> String {
    let digest = Sha256::digest(param_bytes(set));
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn write_f64_le(path: impl Into<PathBuf>, values: &[f64]) -> Result<()> {
    let path = path.into();
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(&path, bytes).map_err(|e| WrdError::io(&path, e))
}

pub fn read_f64_le(path: impl Into<PathBuf>) -> Result<Vec<f64>> {
    let path = path.into();
    let bytes = fs::read(&path).map_err(|e| WrdError::io(&path, e))?;
    if bytes.len() % 8 != 0 {
        return Err(WrdError::Input(format!(
            "{}: length {} is not a multiple of 8",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}
