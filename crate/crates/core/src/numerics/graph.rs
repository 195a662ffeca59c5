//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is an append-only tape. Every op pushes a node holding its
//! forward value and enough bookkeeping to run its adjoint; [`Graph::backward`]
//! walks the tape once in reverse. Nodes are addressed by [`Var`] handles,
//! which are only meaningful for the graph that issued them.
//!
//! Values and gradients are stored in separate vectors so an adjoint can read
//! any forward value while accumulating into any gradient buffer, including
//! the case where an op consumes the same input twice.

use super::kernels::{gemm, sigmoid, softmax_row, softmax_row_backward};
use super::rng::Rng;
use super::tensor::Tensor;
use crate::error::{Result, WrdError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Row layout of a padded batch: sentence `b` occupies rows
/// `b * max_len .. b * max_len + lengths[b]`; the remaining rows are padding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeqLayout {
    pub max_len: usize,
    pub lengths: Vec<usize>,
}

impl SeqLayout {
    pub fn new(lengths: Vec<usize>) -> Result<Self> {
        if lengths.is_empty() || lengths.contains(&0) {
            return Err(WrdError::Input(
                "sequence layout needs at least one nonempty sequence".into(),
            ));
        }
        let max_len = *lengths.iter().max().unwrap();
        Ok(SeqLayout { max_len, lengths })
    }

    pub fn single(len: usize) -> Result<Self> {
        Self::new(vec![len])
    }

    pub fn batch(&self) -> usize {
        self.lengths.len()
    }

    pub fn rows(&self) -> usize {
        self.batch() * self.max_len
    }

    pub fn offset(&self, b: usize) -> usize {
        b * self.max_len
    }

    /// `true` for real (non-padding) rows, `false` for padding.
    pub fn valid_mask(&self) -> Vec<bool> {
        let mut m = Vec::with_capacity(self.rows());
        for &len in &self.lengths {
            m.extend((0..self.max_len).map(|n| n < len));
        }
        m
    }
}

/// Direction constraint for one attention head.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttnMask {
    Full,
    /// Position `n` attends to keys `0..=n`.
    Forward,
    /// Position `n` attends to keys `n..len`.
    Backward,
}

impl AttnMask {
    #[inline]
    fn allows(self, query: usize, key: usize) -> bool {
        match self {
            AttnMask::Full => true,
            AttnMask::Forward => key <= query,
            AttnMask::Backward => key >= query,
        }
    }
}

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias {
        x: Var,
        bias: Var,
    },
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Softmax(Var),
    LogFloor {
        x: Var,
        floor: f64,
    },
    Pick {
        x: Var,
        idx: Vec<usize>,
    },
    Sum(Var),
    Reshape(Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatCols(Vec<Var>),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Attention {
        qkv: Var,
        layout: SeqLayout,
        heads: Vec<AttnMask>,
        probs: Vec<f64>,
    },
    Gru {
        gx: Var,
        u: Var,
        layout: SeqLayout,
        reverse: bool,
        gates: Vec<f64>,
    },
}

#[derive(Default)]
pub struct Graph {
    values: Vec<Tensor>,
    grads: Vec<Option<Vec<f64>>>,
    requires: Vec<bool>,
    ops: Vec<Op>,
}

fn dim_err(op: &'static str, left: &[usize], right: &[usize]) -> WrdError {
    WrdError::Dimension {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Leaf that receives a gradient on [`backward`](Self::backward).
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    /// Gradient of the last backward pass, shaped like the value.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.values[v.0].shape().to_vec(), g.clone()).expect("grad matches value shape"))
    }

    /// Attention probabilities recorded by an [`attention`](Self::attention)
    /// node, laid out per sentence then per head as `len×len` blocks.
    pub fn attention_probs(&self, v: Var) -> Option<&[f64]> {
        match &self.ops[v.0] {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires: bool) -> Var {
        self.values.push(value);
        self.grads.push(None);
        self.requires.push(requires);
        self.ops.push(op);
        Var(self.values.len() - 1)
    }

    fn any_requires(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.requires[v.0])
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(WrdError::Rank(format!("{op} expects a matrix, got {s:?}"))),
        }
    }

    // ----- linear algebra -------------------------------------------------

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a[m×k] · b[n×k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (br, bc) = self.matrix_dims(b, "matmul")?;
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(dim_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.values[a.0].data(),
            k,
            false,
            self.values[b.0].data(),
            bc,
            trans_b,
            &mut out,
            n,
            false,
        );
        let req = self.any_requires(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b, trans_b }, req))
    }

    /// Batched product `a[B×m×k] · b[B×k×n]` (or `b[B×n×k]ᵀ` when `trans_b`).
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (&[ba, m, k], &[bb, r, c]) = (&sa[..], &sb[..]) else {
            return Err(WrdError::Rank(format!(
                "batch_matmul expects rank-3 tensors, got {sa:?} and {sb:?}"
            )));
        };
        let (kb, n) = if trans_b { (c, r) } else { (r, c) };
        if ba != bb || k != kb {
            return Err(dim_err("batch_matmul", &sa, &sb));
        }
        let mut out = vec![0.0; ba * m * n];
        let (av, bv) = (self.values[a.0].data(), self.values[b.0].data());
        for i in 0..ba {
            gemm(
                m,
                k,
                n,
                &av[i * m * k..],
                k,
                false,
                &bv[i * r * c..],
                c,
                trans_b,
                &mut out[i * m * n..],
                n,
                false,
            );
        }
        let req = self.any_requires(&[a, b]);
        Ok(self.push(
            Tensor::new(vec![ba, m, n], out)?,
            Op::BatchMatMul { a, b, trans_b },
            req,
        ))
    }

    // ----- elementwise ----------------------------------------------------

    fn zip_same(&mut self, a: Var, b: Var, op: Op, name: &'static str, f: fn(f64, f64) -> f64) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(name, self.shape(a), self.shape(b)));
        }
        let data = self.values[a.0]
            .data()
            .iter()
            .zip(self.values[b.0].data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let req = self.any_requires(&[a, b]);
        Ok(self.push(value, op, req))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    /// Adds a vector along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let n = self.values[x.0].last_dim();
        if self.shape(bias) != [n] {
            return Err(dim_err("add_bias", self.shape(x), self.shape(bias)));
        }
        let mut value = self.values[x.0].clone();
        let b = self.values[bias.0].data();
        for row in value.data_mut().chunks_mut(n) {
            add_into(row, b);
        }
        let req = self.any_requires(&[x, bias]);
        Ok(self.push(value, Op::AddBias { x, bias }, req))
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let src = &self.values[x.0];
        let data = src.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(src.shape().to_vec(), data).expect("same shape");
        let req = self.requires[x.0];
        self.push(value, op, req)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.map(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, Op::Tanh(x), f64::tanh)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.map(x, Op::Relu(x), |v| v.max(0.0))
    }

    /// `ln(max(x, floor))`; the floor keeps log-probabilities finite. NaN
    /// stays NaN.
    pub fn log_floor(&mut self, x: Var, floor: f64) -> Var {
        self.map(x, Op::LogFloor { x, floor }, move |v| {
            if v.is_nan() {
                v
            } else {
                v.max(floor).ln()
            }
        })
    }

    /// Inverted dropout: zero entries with probability `p`, scale survivors
    /// by `1/(1-p)`. Identity when `p == 0`.
    pub fn dropout(&mut self, x: Var, p: f64, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(WrdError::Config(format!("dropout rate {p} not in [0, 1)")));
        }
        if p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.values[x.0].len())
            .map(|_| if rng.uniform() < p { 0.0 } else { keep })
            .collect();
        let src = &self.values[x.0];
        let data = src.data().iter().zip(&mask).map(|(v, m)| v * m).collect();
        let value = Tensor::new(src.shape().to_vec(), data)?;
        let req = self.requires[x.0];
        Ok(self.push(value, Op::Dropout { x, mask }, req))
    }

    // ----- reductions and reshaping --------------------------------------

    /// Softmax over the last axis. Entries whose `mask` is `false` are
    /// excluded and come out exactly zero.
    pub fn masked_softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let mut value = self.values[x.0].clone();
        if let Some(m) = mask {
            if m.len() != value.len() {
                return Err(dim_err("masked_softmax", value.shape(), &[m.len()]));
            }
        }
        let n = value.last_dim();
        for (r, row) in value.data_mut().chunks_mut(n).enumerate() {
            let row_mask = mask.map(|m| &m[r * n..(r + 1) * n]);
            if !softmax_row(row, row_mask) {
                return Err(WrdError::InvalidMask { row: r });
            }
        }
        let req = self.requires[x.0];
        Ok(self.push(value, Op::Softmax(x), req))
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.masked_softmax(x, None)
    }

    /// Selects entries by flat index into a 1-D tensor.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let src = self.values[x.0].data();
        if let Some(&bad) = idx.iter().find(|&&i| i >= src.len()) {
            return Err(dim_err("pick", self.shape(x), &[bad]));
        }
        if idx.is_empty() {
            return Err(WrdError::Rank("pick with no indices".into()));
        }
        let data = idx.iter().map(|&i| src[i]).collect();
        let req = self.requires[x.0];
        Ok(self.push(Tensor::vector(data), Op::Pick { x, idx: idx.to_vec() }, req))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.values[x.0].data().iter().sum();
        let req = self.requires[x.0];
        self.push(Tensor::scalar(s), Op::Sum(x), req)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.values[x.0].clone().reshape(shape)?;
        let req = self.requires[x.0];
        Ok(self.push(value, Op::Reshape(x), req))
    }

    /// Row lookup `table[ids[i], :]`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.matrix_dims(table, "gather_rows")?;
        let t = self.values[table.0].data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(WrdError::Vocabulary { id, size: vocab });
            }
            out.extend_from_slice(&t[id * d..(id + 1) * d]);
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        let req = self.requires[table.0];
        Ok(self.push(
            value,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            req,
        ))
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.matrix_dims(parts[0], "concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.matrix_dims(p, "concat_cols")?;
            if r != rows {
                return Err(dim_err("concat_cols", self.shape(parts[0]), self.shape(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.values[p.0].data()[r * w..(r + 1) * w]);
            }
        }
        let req = self.any_requires(parts);
        Ok(self.push(
            Tensor::new(vec![rows, total], out)?,
            Op::ConcatCols(parts.to_vec()),
            req,
        ))
    }

    /// Per-row layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let n = self.values[x.0].last_dim();
        if self.shape(gain) != [n] || self.shape(bias) != [n] {
            return Err(dim_err("layer_norm", self.shape(x), self.shape(gain)));
        }
        let src = self.values[x.0].data();
        let (g, b) = (self.values[gain.0].data(), self.values[bias.0].data());
        let rows = src.len() / n;
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let xh = (row[j] - mean) * is;
                xhat[r * n + j] = xh;
                out[r * n + j] = g[j] * xh + b[j];
            }
        }
        let value = Tensor::new(self.shape(x).to_vec(), out)?;
        let req = self.any_requires(&[x, gain, bias]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            req,
        ))
    }

    // ----- sequence ops ---------------------------------------------------

    /// Multi-head scaled dot-product self-attention.
    ///
    /// `qkv` is `[rows × 3d]` holding query, key and value projections side by
    /// side. Head `h` uses columns `h*dh..(h+1)*dh` of each block and the
    /// direction constraint `heads[h]`. Keys outside a sentence's length are
    /// masked; padding rows of the output are zero.
    pub fn attention(&mut self, qkv: Var, layout: &SeqLayout, heads: &[AttnMask]) -> Result<Var> {
        let (rows, width) = self.matrix_dims(qkv, "attention")?;
        if rows != layout.rows() || width % 3 != 0 {
            return Err(dim_err("attention", self.shape(qkv), &[layout.rows(), width]));
        }
        let d = width / 3;
        if heads.is_empty() || d % heads.len() != 0 {
            return Err(WrdError::Config(format!(
                "model width {d} not divisible into {} heads",
                heads.len()
            )));
        }
        let dh = d / heads.len();
        let scale = 1.0 / (dh as f64).sqrt();
        let src = self.values[qkv.0].data();
        let mut out = vec![0.0; rows * d];
        let prob_len: usize = layout.lengths.iter().map(|l| l * l).sum::<usize>() * heads.len();
        let mut probs = vec![0.0; prob_len];
        let mut p_off = 0;
        let mut mask = Vec::new();
        for (b, &len) in layout.lengths.iter().enumerate() {
            let base = layout.offset(b) * width;
            for (h, &kind) in heads.iter().enumerate() {
                let q = &src[base + h * dh..];
                let k = &src[base + d + h * dh..];
                let v = &src[base + 2 * d + h * dh..];
                let p = &mut probs[p_off..p_off + len * len];
                gemm(len, dh, len, q, width, false, k, width, true, p, len, false);
                mask.clear();
                for i in 0..len {
                    mask.extend((0..len).map(|j| kind.allows(i, j)));
                }
                for (i, row) in p.chunks_mut(len).enumerate() {
                    row.iter_mut().for_each(|s| *s *= scale);
                    softmax_row(row, Some(&mask[i * len..(i + 1) * len]));
                }
                let o = &mut out[layout.offset(b) * d + h * dh..];
                gemm(len, len, dh, p, len, false, v, width, false, o, d, false);
                p_off += len * len;
            }
        }
        let value = Tensor::new(vec![rows, d], out)?;
        let req = self.requires[qkv.0];
        Ok(self.push(
            value,
            Op::Attention {
                qkv,
                layout: layout.clone(),
                heads: heads.to_vec(),
                probs,
            },
            req,
        ))
    }

    /// GRU recurrence over each sentence of `layout`.
    ///
    /// `gx` is `[rows × 3h]`: the input projections `x·W + b` for the update,
    /// reset and candidate gates, in that column order. `u` is `[h × 3h]`,
    /// the recurrent weights in the same order. With `reverse` the scan runs
    /// from each sentence's last token to its first. The initial state is
    /// zero; padding rows of the output are zero.
    pub fn gru(&mut self, gx: Var, u: Var, layout: &SeqLayout, reverse: bool) -> Result<Var> {
        let (rows, width) = self.matrix_dims(gx, "gru")?;
        let (h, uw) = self.matrix_dims(u, "gru")?;
        if rows != layout.rows() || width != 3 * h || uw != 3 * h {
            return Err(dim_err("gru", self.shape(gx), self.shape(u)));
        }
        let x = self.values[gx.0].data();
        let w = self.values[u.0].data();
        let mut out = vec![0.0; rows * h];
        // z, r and candidate per row.
        let mut gates = vec![0.0; rows * 3 * h];
        let mut acc = vec![0.0; 3 * h];
        let mut rh = vec![0.0; h];
        for (b, &len) in layout.lengths.iter().enumerate() {
            let base = layout.offset(b);
            let mut prev: Option<usize> = None;
            for step in 0..len {
                let t = base + if reverse { len - 1 - step } else { step };
                acc.copy_from_slice(&x[t * width..(t + 1) * width]);
                if let Some(p) = prev {
                    let hp = &out[p * h..(p + 1) * h];
                    for (i, &hv) in hp.iter().enumerate() {
                        let urow = &w[i * width..i * width + 2 * h];
                        for (a, &uv) in acc[..2 * h].iter_mut().zip(urow) {
                            *a += hv * uv;
                        }
                    }
                }
                let g = &mut gates[t * width..(t + 1) * width];
                for j in 0..2 * h {
                    g[j] = sigmoid(acc[j]);
                }
                if let Some(p) = prev {
                    for i in 0..h {
                        rh[i] = g[h + i] * out[p * h + i];
                    }
                    for (i, &rv) in rh.iter().enumerate() {
                        let urow = &w[i * width + 2 * h..(i + 1) * width];
                        for (a, &uv) in acc[2 * h..].iter_mut().zip(urow) {
                            *a += rv * uv;
                        }
                    }
                }
                for j in 0..h {
                    let c = acc[2 * h + j].tanh();
                    g[2 * h + j] = c;
                    let hp = prev.map_or(0.0, |p| out[p * h + j]);
                    let z = g[j];
                    out[t * h + j] = (1.0 - z) * hp + z * c;
                }
                prev = Some(t);
            }
        }
        let value = Tensor::new(vec![rows, h], out)?;
        let req = self.any_requires(&[gx, u]);
        Ok(self.push(
            value,
            Op::Gru {
                gx,
                u,
                layout: layout.clone(),
                reverse,
                gates,
            },
            req,
        ))
    }

    // ----- backward ------------------------------------------------------

    /// Accumulates gradients of the scalar `loss` into every reachable node
    /// that requires one. Gradients from earlier backward passes are
    /// discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.values[loss.0].len() != 1 {
            return Err(WrdError::Rank(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.values[loss.0].shape()
            )));
        }
        self.grads.iter_mut().for_each(|g| *g = None);
        if !self.requires[loss.0] {
            return Ok(());
        }
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn buf(&mut self, v: Var) -> Option<&mut Vec<f64>> {
        if !self.requires[v.0] {
            return None;
        }
        let n = self.values[v.0].len();
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        // The op is moved out for the duration so `self` stays borrowable.
        let op = std::mem::replace(&mut self.ops[i], Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => self.back_matmul(i, *a, *b, *trans_b, g),
            Op::BatchMatMul { a, b, trans_b } => self.back_bmm(*a, *b, *trans_b, g),
            Op::Add(a, b) => {
                if let Some(da) = self.buf(*a) {
                    add_into(da, g);
                }
                if let Some(db) = self.buf(*b) {
                    add_into(db, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(da) = self.buf(*a) {
                    add_into(da, g);
                }
                if let Some(db) = self.buf(*b) {
                    db.iter_mut().zip(g).for_each(|(d, s)| *d -= s);
                }
            }
            Op::Mul(a, b) => {
                if self.requires[a.0] {
                    let contrib: Vec<f64> = g.iter().zip(self.values[b.0].data()).map(|(x, y)| x * y).collect();
                    add_into(self.buf(*a).unwrap(), &contrib);
                }
                if self.requires[b.0] {
                    let contrib: Vec<f64> = g.iter().zip(self.values[a.0].data()).map(|(x, y)| x * y).collect();
                    add_into(self.buf(*b).unwrap(), &contrib);
                }
            }
            Op::AddBias { x, bias } => {
                if let Some(dx) = self.buf(*x) {
                    add_into(dx, g);
                }
                if let Some(db) = self.buf(*bias) {
                    let n = db.len();
                    for row in g.chunks(n) {
                        add_into(db, row);
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(dx) = self.buf(*x) {
                    dx.iter_mut().zip(g).for_each(|(d, s)| *d += c * s);
                }
            }
            Op::Tanh(x) => self.back_unary(i, *x, g, |y, _| 1.0 - y * y),
            Op::Sigmoid(x) => self.back_unary(i, *x, g, |y, _| y * (1.0 - y)),
            Op::Relu(x) => self.back_unary(i, *x, g, |_, x| if x > 0.0 { 1.0 } else { 0.0 }),
            Op::LogFloor { x, floor } => {
                let floor = *floor;
                self.back_unary(i, *x, g, move |_, x| if x > floor { 1.0 / x } else { 0.0 })
            }
            Op::Dropout { x, mask } => {
                if let Some(dx) = self.buf(*x) {
                    for ((d, s), m) in dx.iter_mut().zip(g).zip(mask) {
                        *d += s * m;
                    }
                }
            }
            Op::Softmax(x) => {
                if self.requires[x.0] {
                    let y = self.values[i].data().to_vec();
                    let n = self.values[i].last_dim();
                    let dx = self.buf(*x).unwrap();
                    for ((p, dp), d) in y.chunks(n).zip(g.chunks(n)).zip(dx.chunks_mut(n)) {
                        softmax_row_backward(p, dp, d);
                    }
                }
            }
            Op::Pick { x, idx } => {
                if let Some(dx) = self.buf(*x) {
                    for (&j, s) in idx.iter().zip(g) {
                        dx[j] += s;
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = self.buf(*x) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Reshape(x) => {
                if let Some(dx) = self.buf(*x) {
                    add_into(dx, g);
                }
            }
            Op::Gather { table, ids } => {
                if let Some(dt) = self.buf(*table) {
                    let d = g.len() / ids.len();
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut dt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let widths: Vec<usize> = parts.iter().map(|p| self.values[p.0].last_dim()).collect();
                let total: usize = widths.iter().sum();
                let rows = g.len() / total;
                let mut off = 0;
                for (&p, &w) in parts.iter().zip(&widths) {
                    if let Some(dp) = self.buf(p) {
                        for r in 0..rows {
                            add_into(&mut dp[r * w..(r + 1) * w], &g[r * total + off..r * total + off + w]);
                        }
                    }
                    off += w;
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => self.back_layer_norm(*x, *gain, *bias, xhat, inv_std, g),
            Op::Attention {
                qkv,
                layout,
                heads,
                probs,
            } => self.back_attention(*qkv, layout, heads, probs, g),
            Op::Gru {
                gx,
                u,
                layout,
                reverse,
                gates,
            } => self.back_gru(i, *gx, *u, layout, *reverse, gates, g),
        }
        self.ops[i] = op;
    }

    fn back_unary(&mut self, i: usize, x: Var, g: &[f64], deriv: impl Fn(f64, f64) -> f64) {
        if !self.requires[x.0] {
            return;
        }
        let contrib: Vec<f64> = self.values[i]
            .data()
            .iter()
            .zip(self.values[x.0].data())
            .zip(g)
            .map(|((&y, &xv), &s)| s * deriv(y, xv))
            .collect();
        add_into(self.buf(x).unwrap(), &contrib);
    }

    fn back_matmul(&mut self, i: usize, a: Var, b: Var, trans_b: bool, g: &[f64]) {
        let (m, n) = (self.values[i].shape()[0], self.values[i].shape()[1]);
        let k = self.values[a.0].shape()[1];
        let bc = self.values[b.0].shape()[1];
        if self.requires[a.0] {
            // dA = dC · op(B)ᵀ
            let mut da = vec![0.0; m * k];
            gemm(
                m,
                n,
                k,
                g,
                n,
                false,
                self.values[b.0].data(),
                bc,
                !trans_b,
                &mut da,
                k,
                false,
            );
            add_into(self.buf(a).unwrap(), &da);
        }
        if self.requires[b.0] {
            let mut db = vec![0.0; k * n];
            if trans_b {
                // B is n×k: dB = dCᵀ · A
                gemm(
                    n,
                    m,
                    k,
                    g,
                    n,
                    true,
                    self.values[a.0].data(),
                    k,
                    false,
                    &mut db,
                    k,
                    false,
                );
            } else {
                // B is k×n: dB = Aᵀ · dC
                gemm(
                    k,
                    m,
                    n,
                    self.values[a.0].data(),
                    k,
                    true,
                    g,
                    n,
                    false,
                    &mut db,
                    n,
                    false,
                );
            }
            add_into(self.buf(b).unwrap(), &db);
        }
    }

    fn back_bmm(&mut self, a: Var, b: Var, trans_b: bool, g: &[f64]) {
        let [batch, m, k] = self.values[a.0].shape()[..] else {
            unreachable!()
        };
        let [_, r, c] = self.values[b.0].shape()[..] else {
            unreachable!()
        };
        let n = if trans_b { r } else { c };
        if self.requires[a.0] {
            let mut da = vec![0.0; batch * m * k];
            let bv = self.values[b.0].data();
            for t in 0..batch {
                gemm(
                    m,
                    n,
                    k,
                    &g[t * m * n..],
                    n,
                    false,
                    &bv[t * r * c..],
                    c,
                    !trans_b,
                    &mut da[t * m * k..],
                    k,
                    false,
                );
            }
            add_into(self.buf(a).unwrap(), &da);
        }
        if self.requires[b.0] {
            let mut db = vec![0.0; batch * r * c];
            let av = self.values[a.0].data();
            for t in 0..batch {
                let (gs, as_, ds) = (&g[t * m * n..], &av[t * m * k..], &mut db[t * r * c..]);
                if trans_b {
                    gemm(n, m, k, gs, n, true, as_, k, false, ds, k, false);
                } else {
                    gemm(k, m, n, as_, k, true, gs, n, false, ds, n, false);
                }
            }
            add_into(self.buf(b).unwrap(), &db);
        }
    }

    fn back_layer_norm(&mut self, x: Var, gain: Var, bias: Var, xhat: &[f64], inv_std: &[f64], g: &[f64]) {
        let n = self.values[gain.0].len();
        if self.requires[x.0] {
            let gv = self.values[gain.0].data();
            let mut dx = vec![0.0; g.len()];
            for (r, &is) in inv_std.iter().enumerate() {
                let dy = &g[r * n..(r + 1) * n];
                let xh = &xhat[r * n..(r + 1) * n];
                let mut mean_d = 0.0;
                let mut mean_dx = 0.0;
                for j in 0..n {
                    let dxh = dy[j] * gv[j];
                    mean_d += dxh;
                    mean_dx += dxh * xh[j];
                }
                mean_d /= n as f64;
                mean_dx /= n as f64;
                for j in 0..n {
                    dx[r * n + j] = is * (dy[j] * gv[j] - mean_d - xh[j] * mean_dx);
                }
            }
            add_into(self.buf(x).unwrap(), &dx);
        }
        if let Some(dg) = self.buf(gain) {
            for (dy, xh) in g.chunks(n).zip(xhat.chunks(n)) {
                for j in 0..n {
                    dg[j] += dy[j] * xh[j];
                }
            }
        }
        if let Some(db) = self.buf(bias) {
            for dy in g.chunks(n) {
                add_into(db, dy);
            }
        }
    }

    fn back_attention(&mut self, qkv: Var, layout: &SeqLayout, heads: &[AttnMask], probs: &[f64], g: &[f64]) {
        if !self.requires[qkv.0] {
            return;
        }
        let width = self.values[qkv.0].last_dim();
        let d = width / 3;
        let dh = d / heads.len();
        let scale = 1.0 / (dh as f64).sqrt();
        let src = self.values[qkv.0].data().to_vec();
        let dst = self.buf(qkv).unwrap();
        let mut p_off = 0;
        let mut dp = Vec::new();
        let mut ds = Vec::new();
        for (b, &len) in layout.lengths.iter().enumerate() {
            let row0 = layout.offset(b);
            let base = row0 * width;
            for h in 0..heads.len() {
                let p = &probs[p_off..p_off + len * len];
                let go = &g[row0 * d + h * dh..];
                // dV += Pᵀ · dO
                gemm(
                    len,
                    len,
                    dh,
                    p,
                    len,
                    true,
                    go,
                    d,
                    false,
                    &mut dst[base + 2 * d + h * dh..],
                    width,
                    true,
                );
                // dP = dO · Vᵀ
                dp.clear();
                dp.resize(len * len, 0.0);
                gemm(
                    len,
                    dh,
                    len,
                    go,
                    d,
                    false,
                    &src[base + 2 * d + h * dh..],
                    width,
                    true,
                    &mut dp,
                    len,
                    false,
                );
                ds.clear();
                ds.resize(len * len, 0.0);
                for r in 0..len {
                    let rr = r * len..(r + 1) * len;
                    softmax_row_backward(&p[rr.clone()], &dp[rr.clone()], &mut ds[rr]);
                }
                ds.iter_mut().for_each(|v| *v *= scale);
                // dQ += dS · K ; dK += dSᵀ · Q
                gemm(
                    len,
                    len,
                    dh,
                    &ds,
                    len,
                    false,
                    &src[base + d + h * dh..],
                    width,
                    false,
                    &mut dst[base + h * dh..],
                    width,
                    true,
                );
                gemm(
                    len,
                    len,
                    dh,
                    &ds,
                    len,
                    true,
                    &src[base + h * dh..],
                    width,
                    false,
                    &mut dst[base + d + h * dh..],
                    width,
                    true,
                );
                p_off += len * len;
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn back_gru(&mut self, i: usize, gx: Var, u: Var, layout: &SeqLayout, reverse: bool, gates: &[f64], g: &[f64]) {
        let h = self.values[u.0].shape()[0];
        let width = 3 * h;
        let out = self.values[i].data();
        let w = self.values[u.0].data();
        let mut dgx = vec![0.0; self.values[gx.0].len()];
        let mut du = vec![0.0; w.len()];
        let mut dh = vec![0.0; h];
        let mut carry = vec![0.0; h];
        let mut pre = vec![0.0; width];
        let mut d_rh = vec![0.0; h];
        for (b, &len) in layout.lengths.iter().enumerate() {
            let base = layout.offset(b);
            let pos = |step: usize| base + if reverse { len - 1 - step } else { step };
            carry.iter_mut().for_each(|c| *c = 0.0);
            for step in (0..len).rev() {
                let t = pos(step);
                let prev = (step > 0).then(|| pos(step - 1));
                let hp = |j: usize| prev.map_or(0.0, |p| out[p * h + j]);
                let gt = &gates[t * width..(t + 1) * width];
                for j in 0..h {
                    dh[j] = g[t * h + j] + carry[j];
                }
                for j in 0..h {
                    let (z, c) = (gt[j], gt[2 * h + j]);
                    let hpj = hp(j);
                    pre[j] = dh[j] * (c - hpj) * z * (1.0 - z);
                    pre[2 * h + j] = dh[j] * z * (1.0 - c * c);
                }
                // d(r⊙h_prev) = U_c · dc_pre
                for k in 0..h {
                    let urow = &w[k * width + 2 * h..(k + 1) * width];
                    d_rh[k] = urow.iter().zip(&pre[2 * h..]).map(|(a, b)| a * b).sum();
                }
                for j in 0..h {
                    let r = gt[h + j];
                    pre[h + j] = d_rh[j] * hp(j) * r * (1.0 - r);
                }
                dgx[t * width..(t + 1) * width].copy_from_slice(&pre);
                for k in 0..h {
                    let z = gt[k];
                    let r = gt[h + k];
                    let urow = &w[k * width..(k + 1) * width];
                    let recur: f64 = urow[..2 * h].iter().zip(&pre[..2 * h]).map(|(a, b)| a * b).sum();
                    carry[k] = dh[k] * (1.0 - z) + d_rh[k] * r + recur;
                }
                if let Some(p) = prev {
                    for k in 0..h {
                        let hk = out[p * h + k];
                        let rhk = gt[h + k] * hk;
                        let drow = &mut du[k * width..(k + 1) * width];
                        for j in 0..2 * h {
                            drow[j] += hk * pre[j];
                        }
                        for j in 2 * h..width {
                            drow[j] += rhk * pre[j];
                        }
                    }
                }
            }
        }
        if let Some(dst) = self.buf(gx) {
            add_into(dst, &dgx);
        }
        if let Some(dst) = self.buf(u) {
            add_into(dst, &du);
        }
    }
}
