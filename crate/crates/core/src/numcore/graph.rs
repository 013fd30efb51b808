//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Nodes are appended in execution order, so the node vector is already a
//! topological order and backward is a single reverse sweep.

use serde::{Deserialize, Serialize};

use super::kernels;
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Floor applied to both arguments of [`Graph::kl_div`] before taking logs.
pub const KL_EPS: f64 = 1e-12;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How reads outside an `H×W` grid are resolved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Border {
    /// Out-of-range reads return zero.
    Zero,
    /// Indices are clamped to the nearest edge pixel.
    #[default]
    Clamp,
    /// Columns wrap around (360° continuity); rows clamp.
    WrapHorizontal,
}

impl Border {
    /// Maps a possibly out-of-range `(row, col)` to a flat pixel index.
    #[inline]
    pub(crate) fn resolve(self, y: isize, x: isize, h: usize, w: usize) -> Option<usize> {
        let (h, w) = (h as isize, w as isize);
        let (y, x) = match self {
            Border::Zero => {
                if y < 0 || y >= h || x < 0 || x >= w {
                    return None;
                }
                (y, x)
            }
            Border::Clamp => (y.clamp(0, h - 1), x.clamp(0, w - 1)),
            Border::WrapHorizontal => (y.clamp(0, h - 1), x.rem_euclid(w)),
        };
        Some((y * w + x) as usize)
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Reshape(Var),
    ColSlice {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Gather {
        x: Var,
        map: Vec<u32>,
    },
    BilinearSample {
        f: Var,
        coords: Var,
        groups: usize,
        border: Border,
    },
    Upsample {
        x: Var,
        rows: Vec<kernels::Tap>,
        cols: Vec<kernels::Tap>,
    },
    Clamp {
        x: Var,
        lo: Vec<f64>,
        hi: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<u8>,
        ignore: u8,
        probs: Vec<f64>,
        count: usize,
    },
    KlDiv {
        p_ref: Var,
        p: Var,
        mask: Option<Vec<bool>>,
        count: usize,
    },
    Mean(Var),
    Sum(Vec<Var>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Gelu(..) => "gelu",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layernorm",
            Op::Reshape(..) => "reshape",
            Op::ColSlice { .. } => "col_slice",
            Op::ConcatCols(..) => "concat_cols",
            Op::Gather { .. } => "gather",
            Op::BilinearSample { .. } => "bilinear_sample",
            Op::Upsample { .. } => "upsample_bilinear",
            Op::Clamp { .. } => "clamp",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::KlDiv { .. } => "kl_div",
            Op::Mean(..) => "mean",
            Op::Sum(..) => "sum",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    /// Reverse-mode sweeps flip sign on bilinear coordinate gradients when set.
    /// Only used to demonstrate that the gradient checker catches a broken rule.
    fault_bilinear_sign: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    #[doc(hidden)]
    pub fn inject_bilinear_sign_fault(&mut self) {
        self.fault_bilinear_sign = true;
    }

    fn push(&mut self, value: Tensor, op: Op, param: Option<ParamId>) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(op.name()));
        }
        let requires_grad = param.is_some() || self.op_inputs_require_grad(&op);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn op_inputs_require_grad(&self, op: &Op) -> bool {
        let rg = |v: &Var| self.nodes[v.0].requires_grad;
        match op {
            Op::Leaf => false,
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddRow(a, b) | Op::Mul(a, b) => {
                rg(a) || rg(b)
            }
            Op::Transpose(x)
            | Op::Scale(x, _)
            | Op::Gelu(x)
            | Op::Reshape(x)
            | Op::Mean(x)
            | Op::Softmax { x, .. }
            | Op::ColSlice { x, .. }
            | Op::Gather { x, .. }
            | Op::Upsample { x, .. }
            | Op::Clamp { x, .. } => rg(x),
            Op::LayerNorm { x, gamma, beta, .. } => rg(x) || rg(gamma) || rg(beta),
            Op::ConcatCols(xs) | Op::Sum(xs) => xs.iter().any(rg),
            Op::BilinearSample { f, coords, .. } => rg(f) || rg(coords),
            Op::CrossEntropy { logits, .. } => rg(logits),
            Op::KlDiv { p_ref, p, .. } => rg(p_ref) || rg(p),
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, None)
    }

    /// A leaf whose gradient is tracked (used for probes and gradient checks).
    pub fn input(&mut self, t: Tensor) -> Result<Var> {
        let v = self.push(t, Op::Leaf, None)?;
        self.nodes[v.0].requires_grad = true;
        Ok(v)
    }

    /// A leaf bound to a trainable parameter.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        self.push(store.get(id).clone(), Op::Leaf, Some(id))
    }

    // ------------------------------------------------------------------
    // Forward operations

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Shape(format!("matmul {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), None)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(Error::Shape(format!("transpose needs rank 2, got {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let out = kernels::transpose(self.value(a).data(), r, c);
        self.push(Tensor::new(&[c, r], out)?, Op::Transpose(a), None)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "add {:?} + {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(&shape, out)?, Op::Add(a, b), None)
    }

    /// Adds a bias vector along the last axis.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let c = self.value(a).last_dim();
        if self.shape(bias) != [c] {
            return Err(Error::Shape(format!(
                "add_row {:?} + {:?}",
                self.shape(a),
                self.shape(bias)
            )));
        }
        let b = self.value(bias).data();
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + b[i % c])
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(&shape, out)?, Op::AddRow(a, bias), None)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape(format!(
                "mul {:?} * {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(&shape, out)?, Op::Mul(a, b), None)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let out: Vec<f64> = self.value(a).data().iter().map(|x| x * s).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(&shape, out)?, Op::Scale(a, s), None)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .map(|&x| kernels::gelu(x).0)
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(&shape, out)?, Op::Gelu(a), None)
    }

    /// Max-subtracted softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape(format!("softmax axis {axis} on {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let out = kernels::softmax(self.value(a).data(), outer, len, inner);
        self.push(
            Tensor::new(&shape, out)?,
            Op::Softmax {
                x: a,
                outer,
                len,
                inner,
            },
            None,
        )
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layernorm(&mut self, a: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let c = self.value(a).last_dim();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::Shape(format!(
                "layernorm over {c} channels with gamma {:?}, beta {:?}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let x = self.value(a).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = x.len() / c.max(1);
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + b[j];
            }
        }
        let shape = self.shape(a).to_vec();
        self.push(
            Tensor::new(&shape, out)?,
            Op::LayerNorm {
                x: a,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            None,
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape)?;
        self.push(t, Op::Reshape(a), None)
    }

    /// Columns `start..start+len` of a rank-2 tensor.
    pub fn col_slice(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 || start + len > s[1] {
            return Err(Error::Shape(format!("col_slice {start}+{len} of {s:?}")));
        }
        let (r, c) = (s[0], s[1]);
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&x[i * c + start..i * c + start + len]);
        }
        self.push(Tensor::new(&[r, len], out)?, Op::ColSlice { x: a, start }, None)
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let rows = match xs.first() {
            Some(&v) => self.shape(v).first().copied().unwrap_or(0),
            None => return Err(Error::Shape("concat of nothing".into())),
        };
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != 2 || s[0] != rows {
                return Err(Error::Shape(format!("concat_cols row mismatch at {s:?}")));
            }
            total += s[1];
        }
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &v in xs {
                let c = self.shape(v)[1];
                out.extend_from_slice(&self.value(v).data()[i * c..(i + 1) * c]);
            }
        }
        self.push(Tensor::new(&[rows, total], out)?, Op::ConcatCols(xs.to_vec()), None)
    }

    /// Extracts `k×k` patches of an `H×W×C` map at positions `stride·(i, j) − pad`.
    ///
    /// Output is `[(H/stride)·(W/stride), k·k·C]` with columns ordered `(u, v, c)`.
    pub fn unfold(
        &mut self,
        a: Var,
        kernel: usize,
        stride: usize,
        pad: usize,
        border: Border,
    ) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 || stride == 0 || kernel == 0 || s[0] % stride != 0 || s[1] % stride != 0
        {
            return Err(Error::Shape(format!(
                "unfold k={kernel} stride={stride} on {s:?}"
            )));
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let (ho, wo) = (h / stride, w / stride);
        let cols = kernel * kernel * c;
        let mut map = Vec::with_capacity(ho * wo * cols);
        for i in 0..ho {
            for j in 0..wo {
                for u in 0..kernel {
                    for v in 0..kernel {
                        let y = (i * stride + u) as isize - pad as isize;
                        let x = (j * stride + v) as isize - pad as isize;
                        match border.resolve(y, x, h, w) {
                            Some(p) => map.extend((0..c).map(|ch| (p * c + ch) as u32)),
                            None => map.extend(std::iter::repeat(u32::MAX).take(c)),
                        }
                    }
                }
            }
        }
        let x = self.value(a).data();
        let out: Vec<f64> = map
            .iter()
            .map(|&m| if m == u32::MAX { 0.0 } else { x[m as usize] })
            .collect();
        self.push(
            Tensor::new(&[ho * wo, cols], out)?,
            Op::Gather { x: a, map },
            None,
        )
    }

    /// Bilinear reads of an `H×W×C` map at fractional `(row, col)` positions.
    ///
    /// `coords` is `[N, 2]` (all channels share the position) or `[N, G, 2]`
    /// where channel `c` reads at group `c mod G`. Output is `[N, C]`.
    pub fn bilinear_sample(&mut self, f: Var, coords: Var, border: Border) -> Result<Var> {
        let fs = self.shape(f).to_vec();
        let cs = self.shape(coords).to_vec();
        if fs.len() != 3 {
            return Err(Error::Shape(format!("bilinear_sample on {fs:?}")));
        }
        let (n, groups) = match cs.as_slice() {
            [n, 2] => (*n, 1),
            [n, g, 2] if *g > 0 => (*n, *g),
            _ => return Err(Error::Shape(format!("bilinear coords {cs:?}"))),
        };
        let c = fs[2];
        let out = kernels::bilinear_forward(
            self.value(f).data(),
            (fs[0], fs[1], c),
            self.value(coords).data(),
            n,
            groups,
            border,
        );
        self.push(
            Tensor::new(&[n, c], out)?,
            Op::BilinearSample {
                f,
                coords,
                groups,
                border,
            },
            None,
        )
    }

    /// Bilinear resize of an `H×W×C` map, half-pixel (align-corners = false).
    pub fn upsample_bilinear(&mut self, a: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 || out_h == 0 || out_w == 0 {
            return Err(Error::Shape(format!(
                "upsample {s:?} to {out_h}x{out_w}"
            )));
        }
        let rows = kernels::resize_taps(s[0], out_h);
        let cols = kernels::resize_taps(s[1], out_w);
        let out = kernels::resize_forward(self.value(a).data(), (s[0], s[1], s[2]), &rows, &cols);
        self.push(
            Tensor::new(&[out_h, out_w, s[2]], out)?,
            Op::Upsample { x: a, rows, cols },
            None,
        )
    }

    /// Element-wise hard clamp; bounds cycle along the last axis.
    ///
    /// Gradient is 1 strictly inside `[lo, hi]` (inclusive) and 0 outside.
    pub fn clamp(&mut self, a: Var, lo: &[f64], hi: &[f64]) -> Result<Var> {
        let c = self.value(a).last_dim();
        if lo.len() != c || hi.len() != c || lo.iter().zip(hi).any(|(l, h)| l >= h) {
            return Err(Error::Shape(format!(
                "clamp bounds {lo:?}..{hi:?} for last dim {c}"
            )));
        }
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x.clamp(lo[i % c], hi[i % c]))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(
            Tensor::new(&shape, out)?,
            Op::Clamp {
                x: a,
                lo: lo.to_vec(),
                hi: hi.to_vec(),
            },
            None,
        )
    }

    /// Mean negative log-softmax over positions whose label is not `ignore`.
    ///
    /// Logits are `[..., K]`; `labels` has one entry per position. With no
    /// valid position the loss is 0 with zero gradient.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[u8], ignore: u8) -> Result<Var> {
        let k = self.value(logits).last_dim();
        let x = self.value(logits).data();
        let positions = x.len() / k.max(1);
        if labels.len() != positions {
            return Err(Error::Shape(format!(
                "cross_entropy: {positions} positions, {} labels",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l != ignore && l as usize >= k) {
            return Err(Error::Data(format!("label {bad} outside [0, {k})")));
        }
        let probs = kernels::softmax(x, positions, k, 1);
        let mut total = 0.0;
        let mut count = 0;
        for (p, &l) in labels.iter().enumerate() {
            if l == ignore {
                continue;
            }
            let row = &x[p * k..(p + 1) * k];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += lse - row[l as usize];
            count += 1;
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                ignore,
                probs,
                count,
            },
            None,
        )
    }

    /// `KL(p_ref ‖ p)` along the last axis, averaged over (unmasked) positions.
    ///
    /// Both arguments are floored at [`KL_EPS`] inside the logarithms.
    pub fn kl_div(&mut self, p_ref: Var, p: Var, mask: Option<&[bool]>) -> Result<Var> {
        if self.shape(p_ref) != self.shape(p) {
            return Err(Error::Shape(format!(
                "kl_div {:?} vs {:?}",
                self.shape(p_ref),
                self.shape(p)
            )));
        }
        let k = self.value(p).last_dim();
        let (r, q) = (self.value(p_ref).data(), self.value(p).data());
        let positions = q.len() / k.max(1);
        if let Some(m) = mask {
            if m.len() != positions {
                return Err(Error::Shape(format!(
                    "kl_div mask has {} entries for {positions} positions",
                    m.len()
                )));
            }
        }
        let mut total = 0.0;
        let mut count = 0;
        for pos in 0..positions {
            if mask.is_some_and(|m| !m[pos]) {
                continue;
            }
            count += 1;
            for j in pos * k..(pos + 1) * k {
                total += r[j] * (r[j].max(KL_EPS).ln() - q[j].max(KL_EPS).ln());
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        self.push(
            Tensor::scalar(loss),
            Op::KlDiv {
                p_ref,
                p,
                mask: mask.map(|m| m.to_vec()),
                count,
            },
            None,
        )
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a).data();
        let m = if x.is_empty() {
            0.0
        } else {
            x.iter().sum::<f64>() / x.len() as f64
        };
        self.push(Tensor::scalar(m), Op::Mean(a), None)
    }

    /// Element-wise sum of equally shaped tensors, accumulated left to right.
    pub fn sum(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::Shape("sum of nothing".into()))?;
        let shape = self.shape(first).to_vec();
        let mut out = self.value(first).data().to_vec();
        for &v in &xs[1..] {
            if self.shape(v) != shape.as_slice() {
                return Err(Error::Shape(format!(
                    "sum {shape:?} with {:?}",
                    self.shape(v)
                )));
            }
            for (o, x) in out.iter_mut().zip(self.value(v).data()) {
                *o += x;
            }
        }
        self.push(Tensor::new(&shape, out)?, Op::Sum(xs.to_vec()), None)
    }

    // ------------------------------------------------------------------
    // Reverse sweep

    /// Back-propagates from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar, got {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.backward_node(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        for (g, n) in grads.iter().zip(&self.nodes) {
            if let Some(g) = g {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(n.op.name()));
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot =
            grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
        f(slot);
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |ga| kernels::matmul_nt_acc(g, bv, m, n, k, ga));
                self.accumulate(grads, *b, |gb| kernels::matmul_tn_acc(av, g, m, k, n, gb));
            }
            Op::Transpose(a) => {
                let s = self.shape(*a);
                let (r, c) = (s[0], s[1]);
                self.accumulate(grads, *a, |ga| {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |ga| add_into(ga, g));
                self.accumulate(grads, *b, |gb| add_into(gb, g));
            }
            Op::AddRow(a, bias) => {
                self.accumulate(grads, *a, |ga| add_into(ga, g));
                let c = self.value(*bias).len();
                self.accumulate(grads, *bias, |gb| {
                    for (i, v) in g.iter().enumerate() {
                        gb[i % c] += v;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                });
            }
            Op::Scale(a, s) => {
                self.accumulate(grads, *a, |ga| {
                    for (o, v) in ga.iter_mut().zip(g) {
                        *o += v * s;
                    }
                });
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                self.accumulate(grads, *a, |ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * kernels::gelu(x[i]).1;
                    }
                });
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                let y = node.value.data();
                self.accumulate(grads, *x, |gx| {
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let at = |t: usize| (o * len + t) * inner + i;
                            let dot: f64 = (0..*len).map(|t| g[at(t)] * y[at(t)]).sum();
                            for t in 0..*len {
                                gx[at(t)] += y[at(t)] * (g[at(t)] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = self.value(*gamma).len();
                let gv = self.value(*gamma).data();
                let rows = inv_std.len();
                self.accumulate(grads, *gamma, |gg| {
                    for i in 0..g.len() {
                        gg[i % c] += g[i] * xhat[i];
                    }
                });
                self.accumulate(grads, *beta, |gb| add_cycled(gb, g));
                self.accumulate(grads, *x, |gx| {
                    for r in 0..rows {
                        let off = r * c;
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..c {
                            let dh = g[off + j] * gv[j];
                            s1 += dh;
                            s2 += dh * xhat[off + j];
                        }
                        let (m1, m2) = (s1 / c as f64, s2 / c as f64);
                        for j in 0..c {
                            let dh = g[off + j] * gv[j];
                            gx[off + j] += inv_std[r] * (dh - m1 - xhat[off + j] * m2);
                        }
                    }
                });
            }
            Op::Reshape(a) => self.accumulate(grads, *a, |ga| add_into(ga, g)),
            Op::ColSlice { x, start } => {
                let c = self.shape(*x)[1];
                let len = node.value.shape()[1];
                self.accumulate(grads, *x, |gx| {
                    for (i, row) in g.chunks_exact(len).enumerate() {
                        add_into(&mut gx[i * c + start..i * c + start + len], row);
                    }
                });
            }
            Op::ConcatCols(xs) => {
                let total = node.value.shape()[1];
                let mut off = 0;
                for &v in xs {
                    let c = self.shape(v)[1];
                    self.accumulate(grads, v, |gv| {
                        for (i, row) in gv.chunks_exact_mut(c).enumerate() {
                            add_into(row, &g[i * total + off..i * total + off + c]);
                        }
                    });
                    off += c;
                }
            }
            Op::Gather { x, map } => {
                self.accumulate(grads, *x, |gx| {
                    for (&m, v) in map.iter().zip(g) {
                        if m != u32::MAX {
                            gx[m as usize] += v;
                        }
                    }
                });
            }
            Op::BilinearSample {
                f,
                coords,
                groups,
                border,
            } => {
                let fs = self.shape(*f);
                let dims = (fs[0], fs[1], fs[2]);
                let n = node.value.shape()[0];
                let cv = self.value(*coords).data();
                let fv = self.value(*f).data();
                self.accumulate(grads, *f, |gf| {
                    kernels::bilinear_backward_f(g, dims, cv, n, *groups, *border, gf)
                });
                let sign = if self.fault_bilinear_sign { -1.0 } else { 1.0 };
                self.accumulate(grads, *coords, |gc| {
                    kernels::bilinear_backward_coords(
                        g, fv, dims, cv, n, *groups, *border, sign, gc,
                    )
                });
            }
            Op::Upsample { x, rows, cols } => {
                let s = self.shape(*x);
                let dims = (s[0], s[1], s[2]);
                self.accumulate(grads, *x, |gx| {
                    kernels::resize_backward(g, dims, rows, cols, gx)
                });
            }
            Op::Clamp { x, lo, hi } => {
                let xv = self.value(*x).data();
                let c = lo.len();
                self.accumulate(grads, *x, |gx| {
                    for i in 0..g.len() {
                        let v = xv[i];
                        if v >= lo[i % c] && v <= hi[i % c] {
                            gx[i] += g[i];
                        }
                    }
                });
            }
            Op::CrossEntropy {
                logits,
                labels,
                ignore,
                probs,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let k = self.value(*logits).last_dim();
                let scale = g[0] / *count as f64;
                self.accumulate(grads, *logits, |gl| {
                    for (p, &l) in labels.iter().enumerate() {
                        if l == *ignore {
                            continue;
                        }
                        for j in 0..k {
                            let target = if j == l as usize { 1.0 } else { 0.0 };
                            gl[p * k + j] += scale * (probs[p * k + j] - target);
                        }
                    }
                });
            }
            Op::KlDiv {
                p_ref,
                p,
                mask,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let k = self.value(*p).last_dim();
                let (r, q) = (self.value(*p_ref).data(), self.value(*p).data());
                let scale = g[0] / *count as f64;
                let valid = |j: usize| mask.as_ref().map_or(true, |m| m[j / k]);
                self.accumulate(grads, *p_ref, |gr| {
                    for j in 0..r.len() {
                        if valid(j) {
                            let own = if r[j] > KL_EPS { 1.0 } else { 0.0 };
                            gr[j] += scale * (r[j].max(KL_EPS).ln() - q[j].max(KL_EPS).ln() + own);
                        }
                    }
                });
                self.accumulate(grads, *p, |gq| {
                    for j in 0..q.len() {
                        if valid(j) && q[j] > KL_EPS {
                            gq[j] -= scale * r[j] / q[j];
                        }
                    }
                });
            }
            Op::Mean(a) => {
                let n = self.value(*a).len().max(1) as f64;
                self.accumulate(grads, *a, |ga| {
                    for v in ga.iter_mut() {
                        *v += g[0] / n;
                    }
                });
            }
            Op::Sum(xs) => {
                for &v in xs {
                    self.accumulate(grads, v, |gv| add_into(gv, g));
                }
            }
        }
    }

    /// Gradients of every parameter leaf, merged per parameter id in node order.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<(ParamId, Vec<f64>)> {
        let mut out: Vec<(ParamId, Vec<f64>)> = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            let (Some(id), Some(Some(g))) = (node.param, grads.grads.get(i)) else {
                continue;
            };
            match out.iter_mut().find(|(pid, _)| *pid == id) {
                Some((_, acc)) => add_into(acc, g),
                None => out.push((id, g.clone())),
            }
        }
        out
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn add_cycled(dst: &mut [f64], src: &[f64]) {
    let c = dst.len();
    for (i, s) in src.iter().enumerate() {
        dst[i % c] += s;
    }
}
