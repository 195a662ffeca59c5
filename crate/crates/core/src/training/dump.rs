use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{read_f64_le, write_f64_le};
use crate::encoders::Encoder;
use crate::error::{Result, WrdError};
use crate::numerics::{Rng, Tensor};
use crate::textdata::{Vocabulary, WrdInstance};

const MANIFEST: &str = "manifest.json";
const VECTORS: &str = "vectors.bin";

/// Per-token vectors for every instance of a dataset split, in dataset
/// order. Stored as a directory with `manifest.json` and `vectors.bin`.
#[derive(Clone, Debug, PartialEq)]
pub struct ReprDump {
    pub d: usize,
    pub producer: String,
    pub records: Vec<Tensor>,
}

#[derive(Serialize, Deserialize)]
struct DumpManifest {
    d: usize,
    records: usize,
    token_counts: Vec<usize>,
    producer: String,
}

impl ReprDump {
    /// Independent standard-normal vectors, one per token.
    pub fn random(instances: &[WrdInstance], d: usize, rng: &mut Rng) -> Result<Self> {
        let records = instances
            .iter()
            .map(|x| Tensor::new(vec![x.len(), d], (0..x.len() * d).map(|_| rng.normal()).collect()))
            .collect::<Result<_>>()?;
        Ok(ReprDump {
            d,
            producer: format!("random normal, seed {}", rng.seed()),
            records,
        })
    }

    /// Layer `layer` of `encoder` in eval mode.
    pub fn from_encoder(
        encoder: &Encoder,
        vocab: &Vocabulary,
        instances: &[WrdInstance],
        layer: usize,
    ) -> Result<Self> {
        let ids: Vec<Vec<usize>> = instances.iter().map(|x| vocab.encode(&x.tokens)).collect();
        let records = super::wrd::encode_layer(encoder, &ids, layer)?;
        Ok(ReprDump {
            d: encoder.config.model_dim,
            producer: format!("{} encoder, layer {layer}", encoder.config.arch),
            records,
        })
    }

    /// Checks one record per instance with matching token counts.
    pub fn check_alignment(&self, instances: &[WrdInstance]) -> Result<()> {
        if self.records.len() != instances.len() {
            return Err(WrdError::Alignment(format!(
                "dump has {} records for {} instances",
                self.records.len(),
                instances.len()
            )));
        }
        for (k, (r, x)) in self.records.iter().zip(instances).enumerate() {
            if r.shape() != [x.len(), self.d] {
                return Err(WrdError::Alignment(format!(
                    "instance {k}: dump record has shape {:?}, expected [{}, {}]",
                    r.shape(),
                    x.len(),
                    self.d
                )));
            }
        }
        Ok(())
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| WrdError::io(dir, e))?;
        let m = DumpManifest {
            d: self.d,
            records: self.records.len(),
            token_counts: self.records.iter().map(|r| r.shape()[0]).collect(),
            producer: self.producer.clone(),
        };
        let mp = dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(&m).map_err(|e| WrdError::json(&mp, e))?;
        fs::write(&mp, text + "\n").map_err(|e| WrdError::io(&mp, e))?;
        let values: Vec<f64> = self.records.iter().flat_map(|r| r.data().iter().copied()).collect();
        write_f64_le(dir.join(VECTORS), &values)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mp = dir.join(MANIFEST);
        let text = fs::read_to_string(&mp).map_err(|e| WrdError::io(&mp, e))?;
        let m: DumpManifest = serde_json::from_str(&text).map_err(|e| WrdError::json(&mp, e))?;
        if m.token_counts.len() != m.records || m.d == 0 || m.token_counts.contains(&0) {
            return Err(WrdError::Alignment(format!(
                "{}: inconsistent record counts",
                mp.display()
            )));
        }
        let values = read_f64_le(dir.join(VECTORS))?;
        let total: usize = m.token_counts.iter().sum::<usize>() * m.d;
        if values.len() != total {
            return Err(WrdError::Alignment(format!(
                "{}: {} values, manifest implies {total}",
                dir.join(VECTORS).display(),
                values.len()
            )));
        }
        let mut at = 0;
        let records = m
            .token_counts
            .iter()
            .map(|&n| {
                let t = Tensor::new(vec![n, m.d], values[at..at + n * m.d].to_vec());
                at += n * m.d;
                t
            })
            .collect::<Result<_>>()?;
        Ok(ReprDump {
            d: m.d,
            producer: m.producer,
            records,
        })
    }
}
