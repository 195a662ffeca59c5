//! Pointer-style output layer mapping per-token representations `H` to a
//! distribution over the inserted position and one over the original
//! position.
//!
//! ```text
//! P_I = softmax(tanh(H W_I) u_I)
//! E   = P_I (H W_Q)
//! P_O = softmax((H W_K) E / sqrt(d))
//! ```
//!
//! In [`DetectorMode::Independent`] the original-position distribution is
//! instead scored like `P_I`, from its own `W_O`, `u_O`, and does not look at
//! `E`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoders::Mode;
use crate::error::{Result, WrdError};
use crate::numerics::kernels::softmax_row;
use crate::numerics::{init, Bound, Graph, ParamSet, Rng, SeqLayout, Tensor, Var};

/// Floor applied to probabilities inside the log of the loss.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetectorMode {
    /// `P_O` attends with the soft popped-word embedding.
    #[default]
    Joint,
    /// `P_I` and `P_O` scored separately.
    Independent,
}

impl fmt::Display for DetectorMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DetectorMode::Joint => "joint",
            DetectorMode::Independent => "independent",
        })
    }
}

impl FromStr for DetectorMode {
    type Err = WrdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(DetectorMode::Joint),
            "independent" => Ok(DetectorMode::Independent),
            other => Err(WrdError::Config(format!(
                "unknown detector mode `{other}` (joint | independent)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Detector {
    pub model_dim: usize,
    pub mode: DetectorMode,
    /// Dropout on `H` in training mode.
    pub dropout: f64,
    pub params: ParamSet,
}

/// Graph handles of a batched detector pass. Distributions are `[B × L]`
/// with exact zeros on padding; `popped` is `[B × 1 × d]`.
#[derive(Clone, Debug)]
pub struct DetectorVars {
    pub p_insert: Var,
    pub p_orig: Var,
    pub popped: Var,
    pub orig_scores: Var,
    pub layout: SeqLayout,
}

/// Value-level result for one sentence.
#[derive(Clone, Debug, PartialEq)]
pub struct DetectorOutput {
    pub p_insert: Vec<f64>,
    pub p_orig: Vec<f64>,
    pub popped_embedding: Vec<f64>,
}

fn shape_check(t: &Tensor, want: &[usize], name: &str) -> Result<()> {
    if t.shape() != want {
        return Err(WrdError::Input(format!(
            "detector array `{name}` has shape {:?}, expected {want:?}",
            t.shape()
        )));
    }
    Ok(())
}

impl Detector {
    pub fn new(model_dim: usize, mode: DetectorMode, dropout: f64, rng: &mut Rng) -> Result<Self> {
        if model_dim == 0 {
            return Err(WrdError::Config("detector width must be positive".into()));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(WrdError::Config(format!("dropout {dropout} not in [0, 1)")));
        }
        let d = model_dim;
        let mut p = ParamSet::new();
        p.insert("detector.w_i", init::glorot(d, d, rng));
        p.insert("detector.u_i", init::glorot_vector(d, rng));
        p.insert("detector.w_q", init::glorot(d, d, rng));
        p.insert("detector.w_k", init::glorot(d, d, rng));
        if mode == DetectorMode::Independent {
            p.insert("detector.w_o", init::glorot(d, d, rng));
            p.insert("detector.u_o", init::glorot_vector(d, rng));
        }
        Ok(Detector {
            model_dim,
            mode,
            dropout,
            params: p,
        })
    }

    /// Builds a joint-mode detector from explicit arrays (row-major `d×d`
    /// matrices acting on row vectors: `h · W`).
    pub fn from_arrays(w_i: Tensor, u_i: Tensor, w_q: Tensor, w_k: Tensor) -> Result<Self> {
        let d = u_i.len();
        let mut p = ParamSet::new();
        p.insert("detector.w_i", w_i);
        p.insert("detector.u_i", u_i);
        p.insert("detector.w_q", w_q);
        p.insert("detector.w_k", w_k);
        Self::from_params(d, DetectorMode::Joint, 0.0, p)
    }

    pub fn from_params(model_dim: usize, mode: DetectorMode, dropout: f64, params: ParamSet) -> Result<Self> {
        let d = model_dim;
        let mut names = vec![
            ("detector.w_i", vec![d, d]),
            ("detector.u_i", vec![d]),
            ("detector.w_q", vec![d, d]),
            ("detector.w_k", vec![d, d]),
        ];
        if mode == DetectorMode::Independent {
            names.push(("detector.w_o", vec![d, d]));
            names.push(("detector.u_o", vec![d]));
        }
        let mut own = ParamSet::new();
        for (name, shape) in names {
            let t = params.get(name)?;
            shape_check(t, &shape, name)?;
            if !t.is_finite() {
                return Err(WrdError::Numeric(format!("detector array `{name}` is not finite")));
            }
            own.insert(name, t.clone());
        }
        Ok(Detector {
            model_dim,
            mode,
            dropout,
            params: own,
        })
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        self.params.bind(g, trainable)
    }

    /// Batched forward over `h` of shape `[B·L × d]` laid out by `layout`.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        h: Var,
        layout: &SeqLayout,
        mode: Mode,
        rng: &mut Rng,
    ) -> Result<DetectorVars> {
        let d = self.model_dim;
        let (b, l) = (layout.batch(), layout.max_len);
        if g.value(h).shape() != [b * l, d] {
            return Err(WrdError::Dimension {
                op: "detector input",
                left: vec![b * l, d],
                right: g.value(h).shape().to_vec(),
            });
        }
        if let Some(n) = layout.lengths.iter().find(|&&n| n < 2) {
            return Err(WrdError::Instance(format!(
                "detector needs at least 2 positions, got {n}"
            )));
        }
        let h = match mode {
            Mode::Train => g.dropout(h, self.dropout, rng)?,
            Mode::Eval => h,
        };
        let mask = layout.valid_mask();

        let p_insert = self.pointer_scores(g, p, h, "detector.w_i", "detector.u_i", b, l)?;
        let p_insert = g.masked_softmax(p_insert, Some(&mask))?;

        let w_q = p.var("detector.w_q")?;
        let q = g.matmul(h, w_q)?;
        let q = g.reshape(q, &[b, l, d])?;
        let weights = g.reshape(p_insert, &[b, 1, l])?;
        let popped = g.batch_matmul(weights, q, false)?;

        let (orig_scores, p_orig) = match self.mode {
            DetectorMode::Joint => {
                let w_k = p.var("detector.w_k")?;
                let k = g.matmul(h, w_k)?;
                let k = g.reshape(k, &[b, l, d])?;
                let s = g.batch_matmul(k, popped, true)?;
                let s = g.reshape(s, &[b, l])?;
                let s = g.scale(s, 1.0 / (d as f64).sqrt());
                (s, g.masked_softmax(s, Some(&mask))?)
            }
            DetectorMode::Independent => {
                let s = self.pointer_scores(g, p, h, "detector.w_o", "detector.u_o", b, l)?;
                (s, g.masked_softmax(s, Some(&mask))?)
            }
        };
        Ok(DetectorVars {
            p_insert,
            p_orig,
            popped,
            orig_scores,
            layout: layout.clone(),
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn pointer_scores(&self, g: &mut Graph, p: &Bound, h: Var, w: &str, u: &str, b: usize, l: usize) -> Result<Var> {
        let w = p.var(w)?;
        let u = p.var(u)?;
        let u = g.reshape(u, &[self.model_dim, 1])?;
        let a = g.matmul(h, w)?;
        let a = g.tanh(a);
        let s = g.matmul(a, u)?;
        g.reshape(s, &[b, l])
    }

    /// Batch-mean WRD loss, `-(log P_I[gold I] + log P_O[gold O])`.
    pub fn loss(&self, g: &mut Graph, out: &DetectorVars, gold: &[(usize, usize)]) -> Result<Var> {
        let layout = &out.layout;
        if gold.len() != layout.batch() {
            return Err(WrdError::Input(format!(
                "{} gold labels for a batch of {}",
                gold.len(),
                layout.batch()
            )));
        }
        let mut ins = Vec::with_capacity(gold.len());
        let mut ori = Vec::with_capacity(gold.len());
        for (b, (&(i, o), &n)) in gold.iter().zip(&layout.lengths).enumerate() {
            if i >= n || o >= n {
                return Err(WrdError::Instance(format!(
                    "gold ({i}, {o}) out of range for length {n}"
                )));
            }
            ins.push(layout.offset(b) + i);
            ori.push(layout.offset(b) + o);
        }
        let li = g.log_floor(out.p_insert, PROB_FLOOR);
        let li = g.pick(li, &ins)?;
        let lo = g.log_floor(out.p_orig, PROB_FLOOR);
        let lo = g.pick(lo, &ori)?;
        let total = g.add(li, lo)?;
        let total = g.sum(total);
        Ok(g.scale(total, -1.0 / gold.len() as f64))
    }

    /// Argmax predictions for every sentence of a batched pass.
    pub fn decode_batch(g: &Graph, out: &DetectorVars) -> Vec<(usize, usize)> {
        let layout = &out.layout;
        let (pi, po) = (g.value(out.p_insert).data(), g.value(out.p_orig).data());
        layout
            .lengths
            .iter()
            .enumerate()
            .map(|(b, &n)| {
                let off = layout.offset(b);
                (argmax(&pi[off..off + n]), argmax(&po[off..off + n]))
            })
            .collect()
    }

    /// Runs the detector on one sentence's representations `h` (`N×d`).
    pub fn run(&self, h: &Tensor) -> Result<DetectorOutput> {
        let (out, g) = self.run_graph(h)?;
        Ok(DetectorOutput {
            p_insert: g.value(out.p_insert).data().to_vec(),
            p_orig: g.value(out.p_orig).data().to_vec(),
            popped_embedding: g.value(out.popped).data().to_vec(),
        })
    }

    /// Pre-softmax scores of the original-position distribution.
    pub fn orig_scores(&self, h: &Tensor) -> Result<Vec<f64>> {
        let (out, g) = self.run_graph(h)?;
        Ok(g.value(out.orig_scores).data().to_vec())
    }

    fn run_graph(&self, h: &Tensor) -> Result<(DetectorVars, Graph)> {
        let n = match *h.shape() {
            [n, d] if d == self.model_dim => n,
            _ => {
                return Err(WrdError::Dimension {
                    op: "detector input",
                    left: vec![h.shape()[0], self.model_dim],
                    right: h.shape().to_vec(),
                })
            }
        };
        if n < 2 {
            return Err(WrdError::Instance(format!(
                "detector needs at least 2 positions, got {n}"
            )));
        }
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let hv = g.constant(h.clone());
        let out = self.forward(&mut g, &p, hv, &SeqLayout::single(n)?, Mode::Eval, &mut Rng::new(0))?;
        Ok((out, g))
    }
}

/// `P_I` for one sentence.
pub fn insert_distribution(h: &Tensor, det: &Detector) -> Result<Vec<f64>> {
    Ok(det.run(h)?.p_insert)
}

/// `E = Σ_n p[n] · (h_n W_Q)` for an arbitrary distribution `p_insert`.
pub fn popped_embedding(h: &Tensor, p_insert: &[f64], det: &Detector) -> Result<Vec<f64>> {
    let d = det.model_dim;
    let n = h.shape()[0];
    if p_insert.len() != n || h.last_dim() != d {
        return Err(WrdError::Dimension {
            op: "popped_embedding",
            left: h.shape().to_vec(),
            right: vec![p_insert.len()],
        });
    }
    let w_q = det.params.get("detector.w_q")?;
    let mut e = vec![0.0; d];
    for (row, &w) in p_insert.iter().enumerate() {
        let hr = h.row(row);
        for (c, ec) in e.iter_mut().enumerate() {
            let proj: f64 = (0..d).map(|k| hr[k] * w_q.at(k, c)).sum();
            *ec += w * proj;
        }
    }
    Ok(e)
}

/// `P_O = softmax((H W_K) E / sqrt(d))` for an arbitrary `E`.
pub fn orig_distribution(h: &Tensor, e: &[f64], det: &Detector) -> Result<Vec<f64>> {
    let d = det.model_dim;
    if e.len() != d || h.last_dim() != d {
        return Err(WrdError::Dimension {
            op: "orig_distribution",
            left: h.shape().to_vec(),
            right: vec![e.len()],
        });
    }
    let w_k = det.params.get("detector.w_k")?;
    let n = h.shape()[0];
    let scale = 1.0 / (d as f64).sqrt();
    let mut s: Vec<f64> = (0..n)
        .map(|row| {
            let hr = h.row(row);
            (0..d)
                .map(|c| (0..d).map(|k| hr[k] * w_k.at(k, c)).sum::<f64>() * e[c])
                .sum::<f64>()
                * scale
        })
        .collect();
    softmax_row(&mut s, None);
    Ok(s)
}

/// `-(ln max(P_I[i], 1e-12) + ln max(P_O[o], 1e-12))`.
pub fn wrd_loss(out: &DetectorOutput, insert_idx: usize, orig_idx: usize) -> Result<f64> {
    let n = out.p_insert.len();
    if insert_idx >= n || orig_idx >= out.p_orig.len() {
        return Err(WrdError::Instance(format!(
            "gold ({insert_idx}, {orig_idx}) out of range for length {n}"
        )));
    }
    let log = |p: f64| if p.is_nan() { p } else { p.max(PROB_FLOOR).ln() };
    Ok(-(log(out.p_insert[insert_idx]) + log(out.p_orig[orig_idx])))
}

/// Independent argmax of both distributions.
pub fn decode(out: &DetectorOutput) -> (usize, usize) {
    (argmax(&out.p_insert), argmax(&out.p_orig))
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in p.iter().enumerate().skip(1) {
        if v > p[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_h(n: usize, d: usize, rng: &mut Rng) -> Tensor {
        Tensor::new(vec![n, d], (0..n * d).map(|_| rng.normal()).collect()).unwrap()
    }

    fn out(pi: Vec<f64>, po: Vec<f64>) -> DetectorOutput {
        DetectorOutput {
            p_insert: pi,
            p_orig: po,
            popped_embedding: vec![],
        }
    }

    #[test]
    fn zero_u_gives_uniform_insert() {
        let mut rng = Rng::new(1);
        let mut det = Detector::new(4, DetectorMode::Joint, 0.0, &mut rng).unwrap();
        det.params.insert("detector.u_i", Tensor::zeros(&[4]));
        let p = insert_distribution(&random_h(5, 4, &mut rng), &det).unwrap();
        assert!(p.iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn two_position_scores() {
        // W_I = I, u_I = (2, 0): score_n = 2 tanh(h_n0); pick h so the scores are (0, ln 3).
        let eye = Tensor::eye(2);
        let det = Detector::from_arrays(eye.clone(), Tensor::vector(vec![2.0, 0.0]), eye.clone(), eye).unwrap();
        let h = Tensor::from_rows(&[vec![0.0, 0.0], vec![(3f64.ln() / 2.0).atanh(), 0.0]]).unwrap();
        let p = insert_distribution(&h, &det).unwrap();
        assert!((p[0] - 0.25).abs() < 1e-12 && (p[1] - 0.75).abs() < 1e-12, "{p:?}");
    }

    #[test]
    fn distributions_sum_to_one() {
        let mut rng = Rng::new(7);
        for mode in [DetectorMode::Joint, DetectorMode::Independent] {
            let det = Detector::new(6, mode, 0.0, &mut rng).unwrap();
            for n in 2..9 {
                let o = det.run(&random_h(n, 6, &mut rng)).unwrap();
                for p in [&o.p_insert, &o.p_orig] {
                    assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                    assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
                }
            }
        }
    }

    #[test]
    fn popped_embedding_selection_and_average() {
        let mut rng = Rng::new(3);
        let det = Detector::new(3, DetectorMode::Joint, 0.0, &mut rng).unwrap();
        let h = random_h(4, 3, &mut rng);
        let proj: Vec<Vec<f64>> = (0..4)
            .map(|k| popped_embedding(&h, &one_hot(4, k), &det).unwrap())
            .collect();
        let mean = popped_embedding(&h, &[0.25; 4], &det).unwrap();
        for c in 0..3 {
            let m: f64 = proj.iter().map(|r| r[c]).sum::<f64>() / 4.0;
            assert!((mean[c] - m).abs() < 1e-12);
        }
        // graph path agrees with the direct computation
        let o = det.run(&h).unwrap();
        let direct = popped_embedding(&h, &o.p_insert, &det).unwrap();
        for (a, b) in o.popped_embedding.iter().zip(&direct) {
            assert!((a - b).abs() < 1e-12);
        }
        let po = orig_distribution(&h, &direct, &det).unwrap();
        for (a, b) in o.p_orig.iter().zip(&po) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn one_hot(n: usize, k: usize) -> Vec<f64> {
        (0..n).map(|i| if i == k { 1.0 } else { 0.0 }).collect()
    }

    #[test]
    fn popped_embedding_one_hot_is_exact_projection() {
        let mut rng = Rng::new(4);
        let det = Detector::new(3, DetectorMode::Joint, 0.0, &mut rng).unwrap();
        let h = random_h(3, 3, &mut rng);
        let w_q = det.params.get("detector.w_q").unwrap();
        let e = popped_embedding(&h, &one_hot(3, 1), &det).unwrap();
        for (c, &got) in e.iter().enumerate() {
            let want: f64 = (0..3).map(|k| h.at(1, k) * w_q.at(k, c)).sum();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn identical_keys_give_uniform_orig() {
        let mut rng = Rng::new(5);
        let det = Detector::new(4, DetectorMode::Joint, 0.0, &mut rng).unwrap();
        let row: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        let h = Tensor::from_rows(&[row.clone(), row.clone(), row]).unwrap();
        let p = det.run(&h).unwrap().p_orig;
        assert!(p.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-12));
    }

    #[test]
    fn uniform_loss_value() {
        let o = out(vec![0.25; 4], vec![0.25; 4]);
        let l = wrd_loss(&o, 0, 3).unwrap();
        assert!((l - 2.0 * 4f64.ln()).abs() < 1e-12);
        assert!((l - 2.77259).abs() < 1e-5);
        assert!(matches!(wrd_loss(&o, 4, 0), Err(WrdError::Instance(_))));
        let floor = wrd_loss(&out(vec![1.0, 0.0], vec![0.0, 1.0]), 1, 0).unwrap();
        assert!(floor.is_finite() && floor > 0.0);
    }

    #[test]
    fn decode_examples() {
        let pi = vec![0.1, 0.1, 0.1, 0.4, 0.1, 0.1, 0.1];
        let po = vec![0.1, 0.4, 0.1, 0.1, 0.1, 0.1, 0.1];
        assert_eq!(decode(&out(pi, po)), (3, 1));
        assert_eq!(decode(&out(vec![0.5, 0.5], vec![0.5, 0.5])), (0, 0));
        assert_eq!(decode(&out(vec![0.0, 0.0, 1.0], vec![0.0, 1.0, 0.0])), (2, 1));
    }

    #[test]
    fn single_position_rejected() {
        let det = Detector::new(2, DetectorMode::Joint, 0.0, &mut Rng::new(0)).unwrap();
        let h = Tensor::new(vec![1, 2], vec![0.1, 0.2]).unwrap();
        assert!(matches!(det.run(&h), Err(WrdError::Instance(_))));
    }
}
