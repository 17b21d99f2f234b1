//! Reverse-mode tape.
//!
//! Ops push nodes onto the tape and return a [`Var`] handle; the node index
//! doubles as a topological order, so `backward` is a single reverse sweep.
//! Gradients are dense buffers allocated on first contribution. Nodes that
//! do not require gradients (constants and anything derived only from them)
//! are skipped during accumulation, so masks and positional tables cost
//! nothing at backward time.
//!
//! Masking convention: masked attention logits carry an additive -1e9. After
//! max subtraction inside softmax the masked exponents underflow to exactly
//! 0.0, so masked positions contribute bit-exact zero to both the forward
//! value and the gradient.

use super::{Scalar, Tensor};
use crate::{Error, Result};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Differentiable operations. Stored inputs are node ids; auxiliary data
/// (masks, argmaxes, saved activations) travels with the op.
#[derive(Debug, Clone)]
pub enum Op {
    Leaf,
    /// a·b, optionally transposing b's trailing two axes. `b` may be rank-2
    /// and shared across a's leading (batch) dims.
    MatMul { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var },
    /// Broadcast-add a row vector over the last axis.
    AddRow { a: Var, v: Var },
    Mul { a: Var, b: Var },
    /// Multiply by a compile-time constant.
    Scale { a: Var, c: f64 },
    /// Multiply by a scalar variable (shape [1]).
    ScaleVar { a: Var, s: Var },
    Relu { a: Var },
    Sigmoid { a: Var },
    Tanh { a: Var },
    /// Inverted-dropout mask, entries 0 or 1/(1-p), fixed at forward time.
    Dropout { a: Var, mask: Vec<f64> },
    Softmax { a: Var, axis: usize },
    LogSoftmax { a: Var, axis: usize },
    /// Normalize over the last axis, then scale by `gain` and shift by `bias`.
    LayerNorm { x: Var, gain: Var, bias: Var, eps: f64 },
    Concat { parts: Vec<Var>, axis: usize },
    /// Slice `len` extents starting at `start` along `axis`.
    Narrow { a: Var, axis: usize, start: usize, len: usize },
    Transpose2d { a: Var },
    Reshape { a: Var },
    /// Gather rows of a rank-2 input; repeated indices scatter-add on backward.
    IndexSelect { a: Var, indices: Vec<usize> },
    /// out[i] = a[i, cols[i]] for rank-2 a.
    Pick { a: Var, cols: Vec<usize> },
    /// Max over the middle (time) axis of [n, l, c]; winner index per (n, c).
    MaxPoolTime { a: Var, argmax: Vec<usize> },
    /// im2col for width-w 1-d convolution over [n, l, c]:
    /// out[(n, t), (j, c)] = a[n, t + j, c], t in 0..l-w+1.
    Unfold1d { a: Var, width: usize },
    Sum { a: Var },
    /// Deliberately broken square (backward drops the factor 2). Exists so
    /// gradient-check failure paths stay exercised; never used by models.
    BadSquare { a: Var },
}

struct Node<T> {
    op: Op,
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
}

/// Append-only computation tape.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            grad: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable input.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Non-trainable input (masks, position tables, targets).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient buffer, if any contribution reached this node.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// Gradient with zeros standing in for "never touched".
    pub fn grad_or_zeros(&self, v: Var) -> Vec<T> {
        match &self.nodes[v.0].grad {
            Some(g) => g.clone(),
            None => vec![T::zero(); self.nodes[v.0].value.numel()],
        }
    }

    fn add_grad(&mut self, v: Var, contrib: &[T]) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        let g = node
            .grad
            .get_or_insert_with(|| vec![T::zero(); node.value.numel()]);
        debug_assert_eq!(g.len(), contrib.len());
        for (gi, ci) in g.iter_mut().zip(contrib) {
            *gi = *gi + *ci;
        }
    }

    // ---- op constructors ----

    /// Matrix product. `a` is [.., m, k]; `b` is [.., k, n] (batched, leading
    /// dims equal to a's) or [k, n] (shared). With `trans_b`, b's stored
    /// trailing axes are [n, k] and it is used as its transpose.
    pub fn matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let ash = self.shape(a).to_vec();
        let bsh = self.shape(b).to_vec();
        if ash.len() < 2 || bsh.len() < 2 {
            return Err(Error::shape("matmul", &ash, &bsh));
        }
        let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let (bk, bn) = {
            let (r, c) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
            if trans_b {
                (c, r)
            } else {
                (r, c)
            }
        };
        if bk != k {
            return Err(Error::shape("matmul", &ash, &bsh));
        }
        let shared = bsh.len() == 2 && ash.len() > 2;
        if !shared && ash[..ash.len() - 2] != bsh[..bsh.len() - 2] {
            return Err(Error::shape("matmul", &ash, &bsh));
        }
        let batch: usize = ash[..ash.len() - 2].iter().product();
        let mut out_shape = ash[..ash.len() - 2].to_vec();
        out_shape.push(m);
        out_shape.push(bn);
        let mut out = vec![T::zero(); batch * m * bn];
        let (rsb, csb) = if trans_b {
            (1isize, k as isize)
        } else {
            (bn as isize, 1isize)
        };
        {
            let ad = self.nodes[a.0].value.data();
            let bd = self.nodes[b.0].value.data();
            for i in 0..batch {
                let ap = &ad[i * m * k];
                let bp = if shared { &bd[0] } else { &bd[i * k * bn] };
                unsafe {
                    T::gemm(
                        m,
                        k,
                        bn,
                        T::one(),
                        ap,
                        k as isize,
                        1,
                        bp,
                        rsb,
                        csb,
                        T::zero(),
                        &mut out[i * m * bn],
                        bn as isize,
                        1,
                    );
                }
            }
        }
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(
            Op::MatMul { a, b, trans_b },
            Tensor::new(out_shape, out)?,
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let data: Vec<T> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let sh = self.shape(a).to_vec();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Op::Add { a, b }, Tensor::new(sh, data)?, rg))
    }

    pub fn add_row(&mut self, a: Var, v: Var) -> Result<Var> {
        let ash = self.shape(a).to_vec();
        let vsh = self.shape(v).to_vec();
        let n = *ash.last().unwrap();
        if vsh != [n] {
            return Err(Error::shape("add_row", &ash, &vsh));
        }
        let vd = self.nodes[v.0].value.data().to_vec();
        let data: Vec<T> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + vd[i % n])
            .collect();
        let rg = self.requires(a) || self.requires(v);
        Ok(self.push(Op::AddRow { a, v }, Tensor::new(ash, data)?, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", self.shape(a), self.shape(b)));
        }
        let data: Vec<T> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(self.nodes[b.0].value.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let sh = self.shape(a).to_vec();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Op::Mul { a, b }, Tensor::new(sh, data)?, rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let cc = T::from_f64(c);
        let data: Vec<T> = self.nodes[a.0].value.data().iter().map(|&x| x * cc).collect();
        let sh = self.shape(a).to_vec();
        let rg = self.requires(a);
        self.push(Op::Scale { a, c }, Tensor::new(sh, data).unwrap(), rg)
    }

    pub fn scale_var(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.shape(s) != [1] {
            return Err(Error::shape("scale_var", self.shape(a), self.shape(s)));
        }
        let sv = self.nodes[s.0].value.data()[0];
        let data: Vec<T> = self.nodes[a.0].value.data().iter().map(|&x| x * sv).collect();
        let sh = self.shape(a).to_vec();
        let rg = self.requires(a) || self.requires(s);
        Ok(self.push(Op::ScaleVar { a, s }, Tensor::new(sh, data)?, rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data: Vec<T> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .map(|&x| if x > T::zero() { x } else { T::zero() })
            .collect();
        let sh = self.shape(a).to_vec();
        let rg = self.requires(a);
        self.push(Op::Relu { a }, Tensor::new(sh, data).unwrap(), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let one = T::one();
        let data: Vec<T> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .map(|&x| one / (one + (-x).exp()))
            .collect();
        let sh = self.shape(a).to_vec();
        let rg = self.requires(a);
        self.push(Op::Sigmoid { a }, Tensor::new(sh, data).unwrap(), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let data: Vec<T> = self.nodes[a.0].value.data().iter().map(|&x| x.tanh()).collect();
        let sh = self.shape(a).to_vec();
        let rg = self.requires(a);
        self.push(Op::Tanh { a }, Tensor::new(sh, data).unwrap(), rg)
    }

    /// Apply a precomputed inverted-dropout mask (entries 0 or 1/(1-p)).
    pub fn dropout_masked(&mut self, a: Var, mask: Vec<f64>) -> Result<Var> {
        if mask.len() != self.nodes[a.0].value.numel() {
            return Err(Error::Invariant(format!(
                "dropout mask has {} entries for a tensor of {}",
                mask.len(),
                self.nodes[a.0].value.numel()
            )));
        }
        let data: Vec<T> = self.nodes[a.0]
            .value
            .data()
            .iter()
            .zip(&mask)
            .map(|(&x, &m)| x * T::from_f64(m))
            .collect();
        let sh = self.shape(a).to_vec();
        let rg = self.requires(a);
        Ok(self.push(Op::Dropout { a, mask }, Tensor::new(sh, data)?, rg))
    }

    fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
        let outer: usize = shape[..axis].iter().product();
        let mid = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        (outer, mid, inner)
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let sh = self.shape(a).to_vec();
        if axis >= sh.len() {
            return Err(Error::Config(format!("softmax axis {axis} out of range for {sh:?}")));
        }
        let (outer, mid, inner) = Self::axis_split(&sh, axis);
        let src = self.nodes[a.0].value.data();
        let mut data = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * mid * inner + i;
                let mut mx = T::neg_infinity();
                for m in 0..mid {
                    let v = src[base + m * inner];
                    if v > mx {
                        mx = v;
                    }
                }
                let mut sum = T::zero();
                for m in 0..mid {
                    let e = (src[base + m * inner] - mx).exp();
                    data[base + m * inner] = e;
                    sum = sum + e;
                }
                for m in 0..mid {
                    data[base + m * inner] = data[base + m * inner] / sum;
                }
            }
        }
        let rg = self.requires(a);
        Ok(self.push(Op::Softmax { a, axis }, Tensor::new(sh, data)?, rg))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let sh = self.shape(a).to_vec();
        if axis >= sh.len() {
            return Err(Error::Config(format!(
                "log_softmax axis {axis} out of range for {sh:?}"
            )));
        }
        let (outer, mid, inner) = Self::axis_split(&sh, axis);
        let src = self.nodes[a.0].value.data();
        let mut data = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * mid * inner + i;
                let mut mx = T::neg_infinity();
                for m in 0..mid {
                    let v = src[base + m * inner];
                    if v > mx {
                        mx = v;
                    }
                }
                let mut sum = T::zero();
                for m in 0..mid {
                    sum = sum + (src[base + m * inner] - mx).exp();
                }
                let lse = mx + sum.ln();
                for m in 0..mid {
                    data[base + m * inner] = src[base + m * inner] - lse;
                }
            }
        }
        let rg = self.requires(a);
        Ok(self.push(Op::LogSoftmax { a, axis }, Tensor::new(sh, data)?, rg))
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let sh = self.shape(x).to_vec();
        let n = *sh.last().ok_or_else(|| Error::Config("layer_norm on rank-0".into()))?;
        if self.shape(gain) != [n] || self.shape(bias) != [n] {
            return Err(Error::shape("layer_norm", &sh, self.shape(gain)));
        }
        let rows = self.nodes[x.0].value.numel() / n;
        let src = self.nodes[x.0].value.data();
        let g = self.nodes[gain.0].value.data();
        let b = self.nodes[bias.0].value.data();
        let epst = T::from_f64(eps);
        let nt = T::from_f64(n as f64);
        let mut data = vec![T::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * n..(r + 1) * n];
            let mean = row.iter().fold(T::zero(), |s, &v| s + v) / nt;
            let var = row
                .iter()
                .fold(T::zero(), |s, &v| s + (v - mean) * (v - mean))
                / nt;
            let inv = T::one() / (var + epst).sqrt();
            for j in 0..n {
                data[r * n + j] = (row[j] - mean) * inv * g[j] + b[j];
            }
        }
        let rg = self.requires(x) || self.requires(gain) || self.requires(bias);
        Ok(self.push(Op::LayerNorm { x, gain, bias, eps }, Tensor::new(sh, data)?, rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Config("concat of zero parts".into()));
        }
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::Config(format!(
                "concat axis {axis} out of range for {first:?}"
            )));
        }
        let mut total_mid = 0usize;
        for &p in parts {
            let sh = self.shape(p);
            if sh.len() != first.len()
                || sh[..axis] != first[..axis]
                || sh[axis + 1..] != first[axis + 1..]
            {
                return Err(Error::shape("concat", &first, sh));
            }
            total_mid += sh[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total_mid;
        let (outer, _, inner) = Self::axis_split(&out_shape, axis);
        let mut data = vec![T::zero(); outer * total_mid * inner];
        let mut offset = 0usize;
        for &p in parts {
            let mid = self.shape(p)[axis];
            let src = self.nodes[p.0].value.data();
            for o in 0..outer {
                let dst_base = (o * total_mid + offset) * inner;
                let src_base = o * mid * inner;
                data[dst_base..dst_base + mid * inner]
                    .copy_from_slice(&src[src_base..src_base + mid * inner]);
            }
            offset += mid;
        }
        let rg = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            Tensor::new(out_shape, data)?,
            rg,
        ))
    }

    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let sh = self.shape(a).to_vec();
        if axis >= sh.len() || start + len > sh[axis] || len == 0 {
            return Err(Error::Config(format!(
                "narrow {start}+{len} on axis {axis} of {sh:?}"
            )));
        }
        let (outer, mid, inner) = Self::axis_split(&sh, axis);
        let src = self.nodes[a.0].value.data();
        let mut out_shape = sh.clone();
        out_shape[axis] = len;
        let mut data = vec![T::zero(); outer * len * inner];
        for o in 0..outer {
            let src_base = (o * mid + start) * inner;
            let dst_base = o * len * inner;
            data[dst_base..dst_base + len * inner]
                .copy_from_slice(&src[src_base..src_base + len * inner]);
        }
        let rg = self.requires(a);
        Ok(self.push(Op::Narrow { a, axis, start, len }, Tensor::new(out_shape, data)?, rg))
    }

    pub fn transpose2d(&mut self, a: Var) -> Result<Var> {
        let sh = self.shape(a).to_vec();
        if sh.len() != 2 {
            return Err(Error::Config(format!("transpose2d on rank-{} tensor", sh.len())));
        }
        let (m, n) = (sh[0], sh[1]);
        let src = self.nodes[a.0].value.data();
        let mut data = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.requires(a);
        Ok(self.push(Op::Transpose2d { a }, Tensor::new(vec![n, m], data)?, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.nodes[a.0].value.numel() {
            return Err(Error::shape("reshape", self.shape(a), &shape));
        }
        let data = self.nodes[a.0].value.data().to_vec();
        let rg = self.requires(a);
        Ok(self.push(Op::Reshape { a }, Tensor::new(shape, data)?, rg))
    }

    /// Gather rows from a rank-2 table.
    pub fn index_select(&mut self, a: Var, indices: Vec<usize>) -> Result<Var> {
        let sh = self.shape(a).to_vec();
        if sh.len() != 2 {
            return Err(Error::Config(format!("index_select on rank-{} tensor", sh.len())));
        }
        let (rows, cols) = (sh[0], sh[1]);
        if indices.is_empty() {
            return Err(Error::Config("index_select with no indices".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::Invariant(format!(
                "index_select row {bad} out of range (table has {rows})"
            )));
        }
        let src = self.nodes[a.0].value.data();
        let mut data = vec![T::zero(); indices.len() * cols];
        for (i, &idx) in indices.iter().enumerate() {
            data[i * cols..(i + 1) * cols].copy_from_slice(&src[idx * cols..(idx + 1) * cols]);
        }
        let rg = self.requires(a);
        Ok(self.push(
            Op::IndexSelect { a, indices: indices.clone() },
            Tensor::new(vec![indices.len(), cols], data)?,
            rg,
        ))
    }

    /// out[i] = a[i, cols[i]].
    pub fn pick(&mut self, a: Var, cols: Vec<usize>) -> Result<Var> {
        let sh = self.shape(a).to_vec();
        if sh.len() != 2 || cols.len() != sh[0] {
            return Err(Error::shape("pick", &sh, &[cols.len()]));
        }
        if let Some(&bad) = cols.iter().find(|&&c| c >= sh[1]) {
            return Err(Error::Invariant(format!(
                "pick column {bad} out of range (row has {})",
                sh[1]
            )));
        }
        let src = self.nodes[a.0].value.data();
        let data: Vec<T> = cols.iter().enumerate().map(|(i, &c)| src[i * sh[1] + c]).collect();
        let rg = self.requires(a);
        Ok(self.push(Op::Pick { a, cols: cols.clone() }, Tensor::new(vec![sh[0]], data)?, rg))
    }

    /// Max over the time axis of [n, l, c].
    pub fn max_pool_time(&mut self, a: Var) -> Result<Var> {
        let sh = self.shape(a).to_vec();
        if sh.len() != 3 {
            return Err(Error::Config(format!("max_pool_time on rank-{} tensor", sh.len())));
        }
        let (n, l, c) = (sh[0], sh[1], sh[2]);
        let src = self.nodes[a.0].value.data();
        let mut data = vec![T::zero(); n * c];
        let mut argmax = vec![0usize; n * c];
        for b in 0..n {
            for ch in 0..c {
                let mut best = src[b * l * c + ch];
                let mut best_t = 0usize;
                for t in 1..l {
                    let v = src[(b * l + t) * c + ch];
                    if v > best {
                        best = v;
                        best_t = t;
                    }
                }
                data[b * c + ch] = best;
                argmax[b * c + ch] = best_t;
            }
        }
        let rg = self.requires(a);
        Ok(self.push(Op::MaxPoolTime { a, argmax }, Tensor::new(vec![n, c], data)?, rg))
    }

    /// im2col: [n, l, c] -> [n*(l-w+1), w*c].
    pub fn unfold1d(&mut self, a: Var, width: usize) -> Result<Var> {
        let sh = self.shape(a).to_vec();
        if sh.len() != 3 {
            return Err(Error::Config(format!("unfold1d on rank-{} tensor", sh.len())));
        }
        let (n, l, c) = (sh[0], sh[1], sh[2]);
        if width == 0 || width > l {
            return Err(Error::Config(format!("unfold1d width {width} over length {l}")));
        }
        let steps = l - width + 1;
        let src = self.nodes[a.0].value.data();
        let mut data = vec![T::zero(); n * steps * width * c];
        for b in 0..n {
            for t in 0..steps {
                let dst = (b * steps + t) * width * c;
                let srcb = (b * l + t) * c;
                data[dst..dst + width * c].copy_from_slice(&src[srcb..srcb + width * c]);
            }
        }
        let rg = self.requires(a);
        Ok(self.push(
            Op::Unfold1d { a, width },
            Tensor::new(vec![n * steps, width * c], data)?,
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.nodes[a.0]
            .value
            .data()
            .iter()
            .fold(T::zero(), |s, &v| s + v);
        let rg = self.requires(a);
        self.push(Op::Sum { a }, Tensor::scalar(total), rg)
    }

    /// Mean over all entries.
    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.numel();
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Square with an intentionally wrong backward; gradient-check fodder.
    pub fn bad_square(&mut self, a: Var) -> Var {
        let data: Vec<T> = self.nodes[a.0].value.data().iter().map(|&x| x * x).collect();
        let sh = self.shape(a).to_vec();
        let rg = self.requires(a);
        self.push(Op::BadSquare { a }, Tensor::new(sh, data).unwrap(), rg)
    }

    // ---- backward ----

    /// Reverse sweep seeding d(root)=1. Root must be a scalar (shape [1]).
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.nodes[root.0].value.numel() != 1 {
            return Err(Error::Invariant(format!(
                "backward root must be scalar, got {:?}",
                self.shape(root)
            )));
        }
        self.nodes[root.0].grad = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            if self.nodes[i].grad.is_none() || !self.nodes[i].requires_grad {
                continue;
            }
            let g = self.nodes[i].grad.clone().unwrap();
            let op = self.nodes[i].op.clone();
            self.step_backward(i, &op, &g)?;
        }
        Ok(())
    }

    fn step_backward(&mut self, i: usize, op: &Op, g: &[T]) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => self.backward_matmul(*a, *b, *trans_b, g),
            Op::Add { a, b } => {
                self.add_grad(*a, g);
                self.add_grad(*b, g);
            }
            Op::AddRow { a, v } => {
                self.add_grad(*a, g);
                if self.requires(*v) {
                    let n = self.nodes[v.0].value.numel();
                    let mut dv = vec![T::zero(); n];
                    for (j, &gj) in g.iter().enumerate() {
                        dv[j % n] = dv[j % n] + gj;
                    }
                    self.add_grad(*v, &dv);
                }
            }
            Op::Mul { a, b } => {
                if self.requires(*a) {
                    let bd = self.nodes[b.0].value.data();
                    let da: Vec<T> = g.iter().zip(bd).map(|(&gi, &bi)| gi * bi).collect();
                    self.add_grad(*a, &da);
                }
                if self.requires(*b) {
                    let ad = self.nodes[a.0].value.data();
                    let db: Vec<T> = g.iter().zip(ad).map(|(&gi, &ai)| gi * ai).collect();
                    self.add_grad(*b, &db);
                }
            }
            Op::Scale { a, c } => {
                let cc = T::from_f64(*c);
                let da: Vec<T> = g.iter().map(|&gi| gi * cc).collect();
                self.add_grad(*a, &da);
            }
            Op::ScaleVar { a, s } => {
                let sv = self.nodes[s.0].value.data()[0];
                if self.requires(*a) {
                    let da: Vec<T> = g.iter().map(|&gi| gi * sv).collect();
                    self.add_grad(*a, &da);
                }
                if self.requires(*s) {
                    let ad = self.nodes[a.0].value.data();
                    let ds = g
                        .iter()
                        .zip(ad)
                        .fold(T::zero(), |acc, (&gi, &ai)| acc + gi * ai);
                    self.add_grad(*s, &[ds]);
                }
            }
            Op::Relu { a } => {
                let ad = self.nodes[a.0].value.data();
                let da: Vec<T> = g
                    .iter()
                    .zip(ad)
                    .map(|(&gi, &ai)| if ai > T::zero() { gi } else { T::zero() })
                    .collect();
                self.add_grad(*a, &da);
            }
            Op::Sigmoid { a } => {
                let yd = self.nodes[i].value.data();
                let da: Vec<T> = g
                    .iter()
                    .zip(yd)
                    .map(|(&gi, &yi)| gi * yi * (T::one() - yi))
                    .collect();
                self.add_grad(*a, &da);
            }
            Op::Tanh { a } => {
                let yd = self.nodes[i].value.data();
                let da: Vec<T> = g
                    .iter()
                    .zip(yd)
                    .map(|(&gi, &yi)| gi * (T::one() - yi * yi))
                    .collect();
                self.add_grad(*a, &da);
            }
            Op::Dropout { a, mask } => {
                let da: Vec<T> = g
                    .iter()
                    .zip(mask)
                    .map(|(&gi, &m)| gi * T::from_f64(m))
                    .collect();
                self.add_grad(*a, &da);
            }
            Op::Softmax { a, axis } => {
                let sh = self.shape(Var(i)).to_vec();
                let (outer, mid, inner) = Self::axis_split(&sh, *axis);
                let y = self.nodes[i].value.data();
                let mut da = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for ii in 0..inner {
                        let base = o * mid * inner + ii;
                        let mut dot = T::zero();
                        for m in 0..mid {
                            let p = base + m * inner;
                            dot = dot + g[p] * y[p];
                        }
                        for m in 0..mid {
                            let p = base + m * inner;
                            da[p] = y[p] * (g[p] - dot);
                        }
                    }
                }
                self.add_grad(*a, &da);
            }
            Op::LogSoftmax { a, axis } => {
                let sh = self.shape(Var(i)).to_vec();
                let (outer, mid, inner) = Self::axis_split(&sh, *axis);
                let y = self.nodes[i].value.data();
                let mut da = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for ii in 0..inner {
                        let base = o * mid * inner + ii;
                        let mut gsum = T::zero();
                        for m in 0..mid {
                            gsum = gsum + g[base + m * inner];
                        }
                        for m in 0..mid {
                            let p = base + m * inner;
                            da[p] = g[p] - y[p].exp() * gsum;
                        }
                    }
                }
                self.add_grad(*a, &da);
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                self.backward_layer_norm(*x, *gain, *bias, *eps, g)
            }
            Op::Concat { parts, axis } => {
                let sh = self.shape(Var(i)).to_vec();
                let (outer, total_mid, inner) = Self::axis_split(&sh, *axis);
                let mut offset = 0usize;
                for &p in parts {
                    let mid = self.shape(p)[*axis];
                    if self.requires(p) {
                        let mut dp = vec![T::zero(); outer * mid * inner];
                        for o in 0..outer {
                            let src_base = (o * total_mid + offset) * inner;
                            let dst_base = o * mid * inner;
                            dp[dst_base..dst_base + mid * inner]
                                .copy_from_slice(&g[src_base..src_base + mid * inner]);
                        }
                        self.add_grad(p, &dp);
                    }
                    offset += mid;
                }
            }
            Op::Narrow { a, axis, start, len } => {
                if self.requires(*a) {
                    let sh = self.shape(*a).to_vec();
                    let (outer, mid, inner) = Self::axis_split(&sh, *axis);
                    let mut da = vec![T::zero(); outer * mid * inner];
                    for o in 0..outer {
                        let dst_base = (o * mid + start) * inner;
                        let src_base = o * len * inner;
                        da[dst_base..dst_base + len * inner]
                            .copy_from_slice(&g[src_base..src_base + len * inner]);
                    }
                    self.add_grad(*a, &da);
                }
            }
            Op::Transpose2d { a } => {
                let sh = self.shape(Var(i)).to_vec();
                let (n, m) = (sh[0], sh[1]);
                let mut da = vec![T::zero(); m * n];
                for r in 0..n {
                    for c in 0..m {
                        da[c * n + r] = g[r * m + c];
                    }
                }
                self.add_grad(*a, &da);
            }
            Op::Reshape { a } => self.add_grad(*a, g),
            Op::IndexSelect { a, indices } => {
                if self.requires(*a) {
                    let sh = self.shape(*a).to_vec();
                    let cols = sh[1];
                    let mut da = vec![T::zero(); sh[0] * cols];
                    for (r, &idx) in indices.iter().enumerate() {
                        for c in 0..cols {
                            da[idx * cols + c] = da[idx * cols + c] + g[r * cols + c];
                        }
                    }
                    self.add_grad(*a, &da);
                }
            }
            Op::Pick { a, cols } => {
                if self.requires(*a) {
                    let sh = self.shape(*a).to_vec();
                    let mut da = vec![T::zero(); sh[0] * sh[1]];
                    for (r, &c) in cols.iter().enumerate() {
                        da[r * sh[1] + c] = da[r * sh[1] + c] + g[r];
                    }
                    self.add_grad(*a, &da);
                }
            }
            Op::MaxPoolTime { a, argmax } => {
                if self.requires(*a) {
                    let sh = self.shape(*a).to_vec();
                    let (n, l, c) = (sh[0], sh[1], sh[2]);
                    let mut da = vec![T::zero(); n * l * c];
                    for b in 0..n {
                        for ch in 0..c {
                            let t = argmax[b * c + ch];
                            da[(b * l + t) * c + ch] = da[(b * l + t) * c + ch] + g[b * c + ch];
                        }
                    }
                    self.add_grad(*a, &da);
                }
            }
            Op::Unfold1d { a, width } => {
                if self.requires(*a) {
                    let sh = self.shape(*a).to_vec();
                    let (n, l, c) = (sh[0], sh[1], sh[2]);
                    let steps = l - width + 1;
                    let mut da = vec![T::zero(); n * l * c];
                    for b in 0..n {
                        for t in 0..steps {
                            let src = (b * steps + t) * width * c;
                            let dst = (b * l + t) * c;
                            for j in 0..width * c {
                                da[dst + j] = da[dst + j] + g[src + j];
                            }
                        }
                    }
                    self.add_grad(*a, &da);
                }
            }
            Op::Sum { a } => {
                if self.requires(*a) {
                    let da = vec![g[0]; self.nodes[a.0].value.numel()];
                    self.add_grad(*a, &da);
                }
            }
            Op::BadSquare { a } => {
                // wrong on purpose: true derivative is 2x
                let ad = self.nodes[a.0].value.data();
                let da: Vec<T> = g.iter().zip(ad).map(|(&gi, &ai)| gi * ai).collect();
                self.add_grad(*a, &da);
            }
        }
        Ok(())
    }

    fn backward_matmul(&mut self, a: Var, b: Var, trans_b: bool, g: &[T]) {
        let ash = self.shape(a).to_vec();
        let bsh = self.shape(b).to_vec();
        let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let n = if trans_b { bsh[bsh.len() - 2] } else { bsh[bsh.len() - 1] };
        let batch: usize = ash[..ash.len() - 2].iter().product();
        let shared = bsh.len() == 2 && ash.len() > 2;

        if self.requires(a) {
            // dA_item = G · B_logical^T
            let mut da = vec![T::zero(); batch * m * k];
            let bd = self.nodes[b.0].value.data();
            for i in 0..batch {
                let bp = if shared { &bd[0] } else { &bd[i * bsh[bsh.len() - 2] * bsh[bsh.len() - 1]] };
                // B_logical^T strides over stored b: logical B is [k, n];
                // its transpose [n, k] reads stored (bt? [n,k] direct : [k,n] swapped).
                let (rs, cs) = if trans_b {
                    (k as isize, 1isize)
                } else {
                    (1isize, n as isize)
                };
                unsafe {
                    T::gemm(
                        m,
                        n,
                        k,
                        T::one(),
                        &g[i * m * n],
                        n as isize,
                        1,
                        bp,
                        rs,
                        cs,
                        T::zero(),
                        &mut da[i * m * k],
                        k as isize,
                        1,
                    );
                }
            }
            self.add_grad(a, &da);
        }
        if self.requires(b) {
            let ad = self.nodes[a.0].value.data();
            let item_len = bsh[bsh.len() - 2] * bsh[bsh.len() - 1];
            let items = if shared { 1 } else { batch };
            let mut db = vec![T::zero(); items * item_len];
            for i in 0..batch {
                let ap = &ad[i * m * k];
                let gp = &g[i * m * n];
                let slot = if shared { 0 } else { i * item_len };
                // accumulate (beta=1) so the shared case sums over the batch
                if trans_b {
                    // stored dB [n, k] = G^T · A
                    unsafe {
                        T::gemm(
                            n,
                            m,
                            k,
                            T::one(),
                            gp,
                            1,
                            n as isize,
                            ap,
                            k as isize,
                            1,
                            T::one(),
                            &mut db[slot],
                            k as isize,
                            1,
                        );
                    }
                } else {
                    // stored dB [k, n] = A^T · G
                    unsafe {
                        T::gemm(
                            k,
                            m,
                            n,
                            T::one(),
                            ap,
                            1,
                            k as isize,
                            gp,
                            n as isize,
                            1,
                            T::one(),
                            &mut db[slot],
                            n as isize,
                            1,
                        );
                    }
                }
            }
            self.add_grad(b, &db);
        }
    }

    fn backward_layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64, g: &[T]) {
        let sh = self.shape(x).to_vec();
        let n = *sh.last().unwrap();
        let rows = self.nodes[x.0].value.numel() / n;
        let src = self.nodes[x.0].value.data().to_vec();
        let gd = self.nodes[gain.0].value.data().to_vec();
        let epst = T::from_f64(eps);
        let nt = T::from_f64(n as f64);

        let mut dx = vec![T::zero(); src.len()];
        let mut dgain = vec![T::zero(); n];
        let mut dbias = vec![T::zero(); n];
        for r in 0..rows {
            let row = &src[r * n..(r + 1) * n];
            let grow = &g[r * n..(r + 1) * n];
            let mean = row.iter().fold(T::zero(), |s, &v| s + v) / nt;
            let var = row
                .iter()
                .fold(T::zero(), |s, &v| s + (v - mean) * (v - mean))
                / nt;
            let inv = T::one() / (var + epst).sqrt();
            // xhat_j = (x_j - mean) * inv; dxhat_j = g_j * gain_j
            let mut sum_dxhat = T::zero();
            let mut sum_dxhat_xhat = T::zero();
            for j in 0..n {
                let xhat = (row[j] - mean) * inv;
                let dxhat = grow[j] * gd[j];
                sum_dxhat = sum_dxhat + dxhat;
                sum_dxhat_xhat = sum_dxhat_xhat + dxhat * xhat;
                dgain[j] = dgain[j] + grow[j] * xhat;
                dbias[j] = dbias[j] + grow[j];
            }
            for j in 0..n {
                let xhat = (row[j] - mean) * inv;
                let dxhat = grow[j] * gd[j];
                dx[r * n + j] =
                    inv * (dxhat - sum_dxhat / nt - xhat * sum_dxhat_xhat / nt);
            }
        }
        self.add_grad(x, &dx);
        self.add_grad(gain, &dgain);
        self.add_grad(bias, &dbias);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: usize, cols: usize, v: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![rows, cols], v.to_vec()).unwrap()
    }

    #[test]
    fn matmul_hand_arithmetic() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t2(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let b = tape.leaf(t2(3, 2, &[7.0, 8.0, 9.0, 10.0, 11.0, 12.0]));
        let c = tape.matmul(a, b, false).unwrap();
        assert_eq!(tape.value(c).data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_trans_b_matches_explicit_transpose() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t2(2, 3, &[1.0, -2.0, 0.5, 3.0, 4.0, -1.0]));
        let bt = tape.leaf(t2(4, 3, &[
            0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0, 1.1, 1.2,
        ]));
        let via_flag = tape.matmul(a, bt, true).unwrap();
        let b = tape.transpose2d(bt).unwrap();
        let via_transpose = tape.matmul(a, b, false).unwrap();
        assert_eq!(tape.value(via_flag).data(), tape.value(via_transpose).data());
    }

    #[test]
    fn matmul_batched_and_shared_rhs() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::new(vec![2, 2, 2], vec![1.0, 0.0, 0.0, 1.0, 2.0, 0.0, 0.0, 2.0]).unwrap());
        let b = tape.leaf(t2(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let c = tape.matmul(a, b, false).unwrap();
        assert_eq!(tape.shape(c), &[2, 2, 2]);
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0, 4.0, 2.0, 4.0, 6.0, 8.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t2(2, 3, &[1.0, 2.0, 3.0, -1.0, 0.0, 1.0]));
        let s = tape.softmax(a, 1).unwrap();
        let d = tape.value(s).data();
        assert!((d[0] + d[1] + d[2] - 1.0).abs() < 1e-12);
        assert!((d[3] + d[4] + d[5] - 1.0).abs() < 1e-12);
        // rows differ by a constant shift, so the distributions match
        for j in 0..3 {
            assert!((d[j] - d[3 + j]).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_huge_negative_exactly_zero() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t2(1, 3, &[0.0, -1e9, -1e9]));
        let s = tape.softmax(a, 1).unwrap();
        let d = tape.value(s).data();
        assert_eq!(d[0], 1.0);
        assert_eq!(d[1], 0.0);
        assert_eq!(d[2], 0.0);
    }

    #[test]
    fn log_softmax_matches_softmax_log() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t2(1, 4, &[0.3, -1.2, 2.0, 0.0]));
        let ls = tape.log_softmax(a, 1).unwrap();
        let s = tape.softmax(a, 1).unwrap();
        for (l, p) in tape.value(ls).data().iter().zip(tape.value(s).data()) {
            assert!((l.exp() - p).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_zero_mean_unit_norm() {
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t2(1, 4, &[1.0, 2.0, 3.0, 4.0]));
        let gain = tape.leaf(Tensor::new(vec![4], vec![1.0; 4]).unwrap());
        let bias = tape.leaf(Tensor::zeros(&[4]));
        let y = tape.layer_norm(x, gain, bias, 1e-5).unwrap();
        let d = tape.value(y).data();
        let mean: f64 = d.iter().sum::<f64>() / 4.0;
        let var: f64 = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn backward_add_mul_chain() {
        // f = sum((a + b) * a), df/da = (2a + b), df/db = a
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t2(1, 2, &[2.0, 3.0]));
        let b = tape.leaf(t2(1, 2, &[5.0, 7.0]));
        let s = tape.add(a, b).unwrap();
        let p = tape.mul(s, a).unwrap();
        let f = tape.sum(p);
        tape.backward(f).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[9.0, 13.0]);
        assert_eq!(tape.grad(b).unwrap(), &[2.0, 3.0]);
    }

    #[test]
    fn constant_gets_no_grad() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t2(1, 2, &[1.0, 2.0]));
        let c = tape.constant(t2(1, 2, &[10.0, 20.0]));
        let p = tape.mul(a, c).unwrap();
        let f = tape.sum(p);
        tape.backward(f).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[10.0, 20.0]);
        assert!(tape.grad(c).is_none());
    }

    #[test]
    fn index_select_scatter_adds_repeats() {
        let mut tape = Tape::<f64>::new();
        let table = tape.leaf(t2(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let rows = tape.index_select(table, vec![1, 1, 0]).unwrap();
        let f = tape.sum(rows);
        tape.backward(f).unwrap();
        assert_eq!(tape.grad(table).unwrap(), &[1.0, 1.0, 2.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn unfold_shapes_and_content() {
        let mut tape = Tape::<f64>::new();
        // one sequence, l=4, c=2
        let a = tape.leaf(Tensor::new(vec![1, 4, 2], (1..=8).map(f64::from).collect()).unwrap());
        let u = tape.unfold1d(a, 3).unwrap();
        assert_eq!(tape.shape(u), &[2, 6]);
        assert_eq!(tape.value(u).data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
    }

    #[test]
    fn max_pool_routes_gradient_to_winner() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::new(vec![1, 3, 2], vec![1.0, 9.0, 5.0, 2.0, 3.0, 4.0]).unwrap());
        let p = tape.max_pool_time(a).unwrap();
        assert_eq!(tape.value(p).data(), &[5.0, 9.0]);
        let f = tape.sum(p);
        tape.backward(f).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[0.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn dropout_mask_applies_and_backprops() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t2(1, 4, &[1.0, 2.0, 3.0, 4.0]));
        let d = tape.dropout_masked(a, vec![0.0, 2.0, 0.0, 2.0]).unwrap();
        assert_eq!(tape.value(d).data(), &[0.0, 4.0, 0.0, 8.0]);
        let f = tape.sum(d);
        tape.backward(f).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[0.0, 2.0, 0.0, 2.0]);
    }

    #[test]
    fn pick_and_narrow_roundtrip_grads() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t2(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let n = tape.narrow(a, 1, 1, 2).unwrap();
        assert_eq!(tape.value(n).data(), &[2.0, 3.0, 5.0, 6.0]);
        let p = tape.pick(n, vec![0, 1]).unwrap();
        assert_eq!(tape.value(p).data(), &[2.0, 6.0]);
        let f = tape.sum(p);
        tape.backward(f).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    }
}
