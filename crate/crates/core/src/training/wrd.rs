use crate::batch::Batch;
use crate::checkpoint::param_hash;
use crate::detector::Detector;
use crate::encoders::{Encoder, Mode};
use crate::error::{Result, WrdError};
use crate::evaluation::{score_pairs, Scores};
use crate::numerics::{Bound, Graph, ParamSet, Rng, SeqLayout, Tensor, Var};
use crate::textdata::{Vocabulary, WrdInstance};

use super::looper::{self, Trainable};
use super::{encode_instances, CurvePoint, Encoded, ReprDump, TrainConfig};

const EVAL_BATCH: usize = 128;

fn curve_points(raw: &[(usize, f64, Vec<f64>)]) -> Vec<CurvePoint> {
    raw.iter()
        .map(|(step, loss, m)| CurvePoint {
            step: *step,
            train_loss: *loss,
            valid_insert_acc: m[0],
            valid_orig_acc: m[1],
            valid_both_acc: m[2],
        })
        .collect()
}

fn scores_vec(s: Scores) -> Vec<f64> {
    vec![s.insert, s.orig, s.both]
}

fn check_layer(encoder: &Encoder, layer: usize) -> Result<()> {
    if layer > encoder.config.num_layers {
        return Err(WrdError::Config(format!(
            "probe layer {layer} out of range for a {}-layer encoder",
            encoder.config.num_layers
        )));
    }
    Ok(())
}

/// Indices grouped into evaluation batches of similar length.
pub(crate) fn sorted_chunks(lens: &[usize]) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..lens.len()).collect();
    idx.sort_by_key(|&k| lens[k]);
    idx.chunks(EVAL_BATCH).map(<[usize]>::to_vec).collect()
}

/// Eval-mode representations of `layer` for every sequence.
pub(crate) fn encode_layer(encoder: &Encoder, ids: &[Vec<usize>], layer: usize) -> Result<Vec<Tensor>> {
    check_layer(encoder, layer)?;
    let d = encoder.config.model_dim;
    let mut out = vec![None; ids.len()];
    let mut rng = Rng::new(0);
    let lens: Vec<usize> = ids.iter().map(Vec::len).collect();
    for chunk in sorted_chunks(&lens) {
        let seqs: Vec<&[usize]> = chunk.iter().map(|&k| ids[k].as_slice()).collect();
        let batch = Batch::new(&seqs)?;
        let mut g = Graph::new();
        let p = encoder.bind(&mut g, false);
        let vars = encoder.forward(&mut g, &p, &batch, Mode::Eval, &mut rng)?;
        let h = g.value(vars.per_layer[layer]).data();
        for (b, (&n, &k)) in batch.layout.lengths.iter().zip(&chunk).enumerate() {
            let off = batch.layout.offset(b) * d;
            out[k] = Some(Tensor::new(vec![n, d], h[off..off + n * d].to_vec())?);
        }
    }
    Ok(out
        .into_iter()
        .map(|t| t.expect("every index is in one chunk"))
        .collect())
}

/// Stacks per-sentence matrices into one zero-padded `[B·L × d]` matrix.
fn pad_reps(reps: &[&Tensor], d: usize) -> Result<(Tensor, SeqLayout)> {
    let layout = SeqLayout::new(reps.iter().map(|r| r.shape()[0]).collect())?;
    let mut data = vec![0.0; layout.rows() * d];
    for (b, r) in reps.iter().enumerate() {
        let off = layout.offset(b) * d;
        data[off..off + r.len()].copy_from_slice(r.data());
    }
    Ok((Tensor::new(vec![layout.rows(), d], data)?, layout))
}

/// Argmax `(insert, orig)` predictions of a co-trained model.
pub fn predict_wrd(encoder: &Encoder, detector: &Detector, ids: &[Vec<usize>]) -> Result<Vec<(usize, usize)>> {
    let mut preds = vec![(0, 0); ids.len()];
    let mut rng = Rng::new(0);
    let lens: Vec<usize> = ids.iter().map(Vec::len).collect();
    for chunk in sorted_chunks(&lens) {
        let seqs: Vec<&[usize]> = chunk.iter().map(|&k| ids[k].as_slice()).collect();
        let batch = Batch::new(&seqs)?;
        let mut g = Graph::new();
        let pe = encoder.bind(&mut g, false);
        let pd = detector.bind(&mut g, false);
        let h = encoder
            .forward(&mut g, &pe, &batch, Mode::Eval, &mut rng)?
            .final_layer();
        let out = detector.forward(&mut g, &pd, h, &batch.layout, Mode::Eval, &mut rng)?;
        for (&k, p) in chunk.iter().zip(Detector::decode_batch(&g, &out)) {
            preds[k] = p;
        }
    }
    Ok(preds)
}

/// Predictions of a detector reading layer `layer` of a frozen encoder.
pub fn predict_at_layer(
    encoder: &Encoder,
    detector: &Detector,
    ids: &[Vec<usize>],
    layer: usize,
) -> Result<Vec<(usize, usize)>> {
    predict_reprs(detector, &encode_layer(encoder, ids, layer)?)
}

/// Scores a co-trained model on labeled instances.
pub fn evaluate_wrd(
    encoder: &Encoder,
    detector: &Detector,
    vocab: &Vocabulary,
    instances: &[WrdInstance],
) -> Result<Scores> {
    let enc = encode_instances(vocab, instances);
    let ids: Vec<_> = enc.iter().map(|e| e.ids.clone()).collect();
    let gold: Vec<_> = enc.iter().map(|e| e.gold).collect();
    score_pairs(&predict_wrd(encoder, detector, &ids)?, &gold)
}

/// Argmax predictions of `detector` on fixed per-sentence representations.
pub fn predict_reprs(detector: &Detector, reps: &[Tensor]) -> Result<Vec<(usize, usize)>> {
    let mut preds = vec![(0, 0); reps.len()];
    let mut rng = Rng::new(0);
    let lens: Vec<usize> = reps.iter().map(|r| r.shape()[0]).collect();
    for chunk in sorted_chunks(&lens) {
        let refs: Vec<&Tensor> = chunk.iter().map(|&k| &reps[k]).collect();
        let (h, layout) = pad_reps(&refs, detector.model_dim)?;
        let mut g = Graph::new();
        let pd = detector.bind(&mut g, false);
        let h = g.constant(h);
        let out = detector.forward(&mut g, &pd, h, &layout, Mode::Eval, &mut rng)?;
        for (&k, p) in chunk.iter().zip(Detector::decode_batch(&g, &out)) {
            preds[k] = p;
        }
    }
    Ok(preds)
}

#[derive(Clone)]
struct CoTrain<'a> {
    encoder: Encoder,
    detector: Detector,
    train: &'a [Encoded],
    valid: &'a [Encoded],
}

impl Trainable for CoTrain<'_> {
    fn bind(&self, g: &mut Graph) -> Vec<Bound> {
        vec![self.encoder.bind(g, true), self.detector.bind(g, true)]
    }

    fn param_sets_mut(&mut self) -> Vec<&mut ParamSet> {
        vec![&mut self.encoder.params, &mut self.detector.params]
    }

    fn batch_loss(&self, g: &mut Graph, bounds: &[Bound], batch: &[usize], rng: &mut Rng) -> Result<Var> {
        let seqs: Vec<&[usize]> = batch.iter().map(|&k| self.train[k].ids.as_slice()).collect();
        let gold: Vec<_> = batch.iter().map(|&k| self.train[k].gold).collect();
        let b = Batch::new(&seqs)?;
        let h = self.encoder.forward(g, &bounds[0], &b, Mode::Train, rng)?.final_layer();
        let out = self.detector.forward(g, &bounds[1], h, &b.layout, Mode::Train, rng)?;
        self.detector.loss(g, &out, &gold)
    }

    fn evaluate(&self) -> Result<Vec<f64>> {
        let ids: Vec<_> = self.valid.iter().map(|e| e.ids.clone()).collect();
        let gold: Vec<_> = self.valid.iter().map(|e| e.gold).collect();
        let preds = predict_wrd(&self.encoder, &self.detector, &ids)?;
        Ok(scores_vec(score_pairs(&preds, &gold)?))
    }

    fn train_len(&self) -> usize {
        self.train.len()
    }

    fn item_len(&self, k: usize) -> usize {
        self.train[k].ids.len()
    }

    fn model_dim(&self) -> usize {
        self.encoder.config.model_dim
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Best-on-validation encoder and detector.
    pub encoder: Encoder,
    pub detector: Detector,
    pub best_step: usize,
    pub valid: Scores,
    pub curve: Vec<CurvePoint>,
    /// Parameters after the final step.
    pub last_encoder: Encoder,
    pub last_detector: Detector,
}

/// Co-trains a randomly initialized (or given) encoder with the detector.
pub fn train_wrd(
    encoder: Encoder,
    detector: Detector,
    vocab: &Vocabulary,
    train: &[WrdInstance],
    valid: &[WrdInstance],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if detector.model_dim != encoder.config.model_dim {
        return Err(WrdError::Config(format!(
            "detector width {} differs from encoder width {}",
            detector.model_dim, encoder.config.model_dim
        )));
    }
    if valid.is_empty() {
        return Err(WrdError::Input("empty validation set".into()));
    }
    let train = encode_instances(vocab, train);
    let valid_enc = encode_instances(vocab, valid);
    let model = CoTrain {
        encoder,
        detector,
        train: &train,
        valid: &valid_enc,
    };
    let out = looper::run(model, cfg)?;
    let curve = curve_points(&out.curve);
    let best_point = curve
        .iter()
        .find(|p| p.step == out.best_step)
        .expect("best step is on the curve");
    Ok(TrainOutcome {
        valid: Scores {
            insert: best_point.valid_insert_acc,
            orig: best_point.valid_orig_acc,
            both: best_point.valid_both_acc,
            count: valid.len(),
        },
        encoder: out.best.encoder,
        detector: out.best.detector,
        best_step: out.best_step,
        curve,
        last_encoder: out.last.encoder,
        last_detector: out.last.detector,
    })
}

#[derive(Clone)]
struct Probe<'a> {
    detector: Detector,
    train: &'a [Tensor],
    train_gold: &'a [(usize, usize)],
    valid: &'a [Tensor],
    valid_gold: &'a [(usize, usize)],
}

impl Trainable for Probe<'_> {
    fn bind(&self, g: &mut Graph) -> Vec<Bound> {
        vec![self.detector.bind(g, true)]
    }

    fn param_sets_mut(&mut self) -> Vec<&mut ParamSet> {
        vec![&mut self.detector.params]
    }

    fn batch_loss(&self, g: &mut Graph, bounds: &[Bound], batch: &[usize], rng: &mut Rng) -> Result<Var> {
        let reps: Vec<&Tensor> = batch.iter().map(|&k| &self.train[k]).collect();
        let gold: Vec<_> = batch.iter().map(|&k| self.train_gold[k]).collect();
        let (h, layout) = pad_reps(&reps, self.detector.model_dim)?;
        let h = g.constant(h);
        let out = self.detector.forward(g, &bounds[0], h, &layout, Mode::Train, rng)?;
        self.detector.loss(g, &out, &gold)
    }

    fn evaluate(&self) -> Result<Vec<f64>> {
        let preds = predict_reprs(&self.detector, self.valid)?;
        Ok(scores_vec(score_pairs(&preds, self.valid_gold)?))
    }

    fn train_len(&self) -> usize {
        self.train.len()
    }

    fn item_len(&self, k: usize) -> usize {
        self.train[k].shape()[0]
    }

    fn model_dim(&self) -> usize {
        self.detector.model_dim
    }
}

/// Where a probe reads its fixed representations from.
pub enum ReprSource<'a> {
    /// Layer `layer` (0 = embeddings) of a frozen encoder, eval mode.
    Encoder {
        encoder: &'a Encoder,
        vocab: &'a Vocabulary,
        layer: usize,
    },
    /// Precomputed vectors aligned to the train and validation splits.
    Dumps { train: &'a ReprDump, valid: &'a ReprDump },
}

#[derive(Clone, Debug)]
pub struct ProbeOutcome {
    /// Best-on-validation detector.
    pub detector: Detector,
    pub best_step: usize,
    pub valid: Scores,
    pub valid_preds: Vec<(usize, usize)>,
    pub curve: Vec<CurvePoint>,
    /// Encoder parameter hash before and after probing, for encoder sources.
    pub encoder_hash: Option<(String, String)>,
    /// Detector after the final step.
    pub last_detector: Detector,
}

/// Trains only the detector on fixed representations.
pub fn probe_frozen(
    source: ReprSource<'_>,
    detector: Detector,
    train: &[WrdInstance],
    valid: &[WrdInstance],
    cfg: &TrainConfig,
) -> Result<ProbeOutcome> {
    if valid.is_empty() {
        return Err(WrdError::Input("empty validation set".into()));
    }
    let (train_reps, valid_reps, hash) = match source {
        ReprSource::Encoder { encoder, vocab, layer } => {
            let before = param_hash(&encoder.params);
            let ids = |xs: &[WrdInstance]| xs.iter().map(|x| vocab.encode(&x.tokens)).collect::<Vec<_>>();
            let tr = encode_layer(encoder, &ids(train), layer)?;
            let va = encode_layer(encoder, &ids(valid), layer)?;
            (tr, va, Some((before, param_hash(&encoder.params))))
        }
        ReprSource::Dumps { train: dt, valid: dv } => {
            dt.check_alignment(train)?;
            dv.check_alignment(valid)?;
            (dt.records.clone(), dv.records.clone(), None)
        }
    };
    let d = train_reps.first().map_or(detector.model_dim, |t| t.last_dim());
    if d != detector.model_dim {
        return Err(WrdError::Alignment(format!(
            "representations have width {d}, detector expects {}",
            detector.model_dim
        )));
    }
    let train_gold: Vec<_> = train.iter().map(|x| (x.insert_idx, x.orig_idx)).collect();
    let valid_gold: Vec<_> = valid.iter().map(|x| (x.insert_idx, x.orig_idx)).collect();
    let model = Probe {
        detector,
        train: &train_reps,
        train_gold: &train_gold,
        valid: &valid_reps,
        valid_gold: &valid_gold,
    };
    let out = looper::run(model, cfg)?;
    let valid_preds = predict_reprs(&out.best.detector, &valid_reps)?;
    Ok(ProbeOutcome {
        valid: score_pairs(&valid_preds, &valid_gold)?,
        valid_preds,
        detector: out.best.detector,
        best_step: out.best_step,
        curve: curve_points(&out.curve),
        encoder_hash: hash,
        last_detector: out.last.detector,
    })
}
