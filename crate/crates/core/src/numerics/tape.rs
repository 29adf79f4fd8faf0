//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends a node holding its output value and the inputs it read.
//! [`Tape::backward`] replays the nodes in reverse order and accumulates
//! (`+=`) vector-Jacobian products into the inputs, so a value consumed by
//! several ops receives the sum of all its contributions.
//!
//! Matmul-like ops (linear, batched matmul, depthwise convolution) also add
//! their multiply-accumulate count to [`Tape::macs`], which is what the cost
//! model is checked against.

use std::borrow::Cow;

use super::kernels::{self, matmul_nn, matmul_nt, matmul_tn};
use super::Tensor;
use crate::error::{shape_err, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug)]
enum Bcast {
    Add,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Linear { x: Var, w: Var, b: Option<Var> },
    Bmm { a: Var, b: Var, trans_b: bool },
    Permute { a: Var, perm: Vec<usize> },
    Reshape(Var),
    Softmax(Var),
    LayerNorm { a: Var, eps: f64 },
    Gelu(Var),
    Silu(Var),
    Relu(Var),
    Focus { a: Var, p: u32 },
    Pool { a: Var, n: usize },
    DepthwiseConv { x: Var, kernel: Var, bias: Option<Var>, grid: (usize, usize), k: usize },
    Embedding { table: Var, ids: Vec<usize> },
    BcastMid { x: Var, s: Var, kind: Bcast },
    AddLeading { x: Var, y: Var },
    SliceAxis { a: Var, axis: usize, start: usize },
    SumAll(Var),
    MeanAll(Var),
    SumAxis { a: Var, axis: usize },
    IndexRows { x: Var, idx: Vec<usize> },
    ScatterRows { src: Var, idx: Vec<usize> },
    MulRows { x: Var, g: Var },
    GatherEntries { m: Var, at: Vec<(usize, usize)> },
    TopkRenorm { p: Var, mask: Vec<bool> },
    DivLast { a: Var, b: Var },
    IndexAxis { a: Var, axis: usize, map: Vec<usize> },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Recording of a forward computation.
///
/// Parameters can be bound by reference ([`Tape::param`]) so a forward pass
/// never copies model weights.
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    grads: Vec<Option<Tensor>>,
    record: bool,
    macs: u64,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn rows_of(t: &Tensor) -> (usize, usize) {
    let last = *t.shape().last().unwrap_or(&1);
    let rows = if last == 0 { 0 } else { t.numel() / last };
    (rows, last)
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), record: true, macs: 0 }
    }

    /// A tape on which nothing requires gradients (inference).
    pub fn no_grad() -> Self {
        Self { record: false, ..Self::new() }
    }

    pub fn is_recording(&self) -> bool {
        self.record
    }

    /// Multiply-accumulates executed so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
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

    /// Gradient accumulated by the last [`Tape::backward`], if any reached `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of its shape when none reached it.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(self.shape(v).to_vec()))
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad: requires_grad && self.record });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(Cow::Owned(value), op, rg)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Bind a tensor by reference.
    pub fn param(&mut self, value: &'a Tensor, requires_grad: bool) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, requires_grad)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!("{what}: {:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push_op(v, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push_op(v, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push_op(v, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        self.push_op(v, Op::Scale(a, s), &[a])
    }

    /// `x · wᵀ + b` over the last axis of `x`; `w` is `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if ws.len() != 2 || xs.last() != Some(&ws[1]) {
            return Err(shape_err!("linear: input {:?} against weight {:?}", xs, ws));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(shape_err!("linear: bias {:?} for {} outputs", self.shape(b), ws[0]));
            }
        }
        let (m, k, n) = (self.value(x).numel() / ws[1].max(1), ws[1], ws[0]);
        let mut out = vec![0.0; m * n];
        matmul_nt(self.value(x).data(), self.value(w).data(), &mut out, m, k, n);
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in out.chunks_mut(n) {
                for (o, bv) in row.iter_mut().zip(bias) {
                    *o += bv;
                }
            }
        }
        self.macs += (m * k * n) as u64;
        let mut shape = xs;
        *shape.last_mut().unwrap() = n;
        let v = Tensor::new(shape, out)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push_op(v, Op::Linear { x, w, b }, &inputs))
    }

    /// Batched matmul over matching leading axes: `[.., m, k] · [.., k, n]`,
    /// or `[.., m, k] · [.., n, k]ᵀ` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let as_ = self.shape(a).to_vec();
        let bs = self.shape(b).to_vec();
        let r = as_.len();
        if r < 2 || bs.len() != r || as_[..r - 2] != bs[..r - 2] {
            return Err(shape_err!("bmm: {:?} vs {:?}", as_, bs));
        }
        let (m, k) = (as_[r - 2], as_[r - 1]);
        let (kb, n) = if trans_b { (bs[r - 1], bs[r - 2]) } else { (bs[r - 2], bs[r - 1]) };
        if kb != k {
            return Err(shape_err!("bmm: inner extents {k} vs {kb} ({:?} vs {:?})", as_, bs));
        }
        let batch: usize = as_[..r - 2].iter().product();
        let mut out = vec![0.0; batch * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for p in 0..batch {
            let ap = &ad[p * m * k..(p + 1) * m * k];
            let bp = &bd[p * k * n..(p + 1) * k * n];
            let cp = &mut out[p * m * n..(p + 1) * m * n];
            if trans_b {
                matmul_nt(ap, bp, cp, m, k, n);
            } else {
                matmul_nn(ap, bp, cp, m, k, n);
            }
        }
        self.macs += (batch * m * k * n) as u64;
        let mut shape = as_[..r - 2].to_vec();
        shape.extend([m, n]);
        let v = Tensor::new(shape, out)?;
        Ok(self.push_op(v, Op::Bmm { a, b, trans_b }, &[a, b]))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let v = self.value(a).permute(perm)?;
        Ok(self.push_op(v, Op::Permute { a, perm: perm.to_vec() }, &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape.to_vec())?;
        Ok(self.push_op(v, Op::Reshape(a), &[a]))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).softmax(-1)?;
        Ok(self.push_op(v, Op::Softmax(a), &[a]))
    }

    /// Layer normalization over the last axis without affine parameters.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let t = self.value(a);
        let (_, d) = rows_of(t);
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
        }
        let v = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push_op(v, Op::LayerNorm { a, eps }, &[a]))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(kernels::gelu);
        self.push_op(v, Op::Gelu(a), &[a])
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(kernels::silu);
        self.push_op(v, Op::Silu(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push_op(v, Op::Relu(a), &[a])
    }

    /// Norm-preserving polynomial focusing over the last axis.
    pub fn focus(&mut self, a: Var, p: u32) -> Result<Var> {
        let v = super::focusing_transform(self.value(a), p)?;
        Ok(self.push_op(v, Op::Focus { a, p }, &[a]))
    }

    /// Adaptive average pooling of the token axis (second to last).
    pub fn pool_tokens(&mut self, a: Var, n: usize) -> Result<Var> {
        let v = super::adaptive_avg_pool_tokens(self.value(a), n)?;
        Ok(self.push_op(v, Op::Pool { a, n }, &[a]))
    }

    /// Per-channel 2-D convolution of `x: [B, H·W, C]` with zero padding.
    /// `kernel` is `[C, k·k]`, `bias` is `[C]`.
    pub fn depthwise_conv(
        &mut self,
        x: Var,
        kernel: Var,
        bias: Option<Var>,
        grid: (usize, usize),
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(shape_err!("depthwise conv expects [B, N, C], got {:?}", xs));
        }
        let (b, n, c) = (xs[0], xs[1], xs[2]);
        if n != grid.0 * grid.1 {
            return Err(shape_err!("{} tokens do not form a {}x{} grid", n, grid.0, grid.1));
        }
        let ks = self.shape(kernel).to_vec();
        let kk = ks.get(1).copied().unwrap_or(0);
        let k = (kk as f64).sqrt().round() as usize;
        if ks.len() != 2 || ks[0] != c || k * k != kk || k % 2 == 0 {
            return Err(shape_err!("depthwise kernel {:?} for {} channels", ks, c));
        }
        if let Some(bv) = bias {
            if self.shape(bv) != [c] {
                return Err(shape_err!("depthwise bias {:?}", self.shape(bv)));
            }
        }
        let xd = self.value(x).data();
        let kd = self.value(kernel).data();
        let mut out = vec![0.0; b * n * c];
        if let Some(bv) = bias {
            let bd = self.value(bv).data();
            for row in out.chunks_mut(c) {
                row.copy_from_slice(bd);
            }
        }
        conv_apply(grid, k, c, b, |bi, dst, src, tap| {
            for ch in 0..c {
                out[(bi * n + dst) * c + ch] += xd[(bi * n + src) * c + ch] * kd[ch * kk + tap];
            }
        });
        self.macs += (b * n * c * kk) as u64;
        let v = Tensor::new(xs, out)?;
        let inputs: Vec<Var> = [Some(x), Some(kernel), bias].into_iter().flatten().collect();
        Ok(self.push_op(v, Op::DepthwiseConv { x, kernel, bias, grid, k }, &inputs))
    }

    /// Row lookup into `table: [V, C]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (rows, c) = (t.shape()[0], t.numel() / t.shape()[0].max(1));
        let mut out = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            if i >= rows {
                return Err(Error::Input(format!("embedding index {i} out of {rows} rows")));
            }
            out.extend_from_slice(&t.data()[i * c..(i + 1) * c]);
        }
        let v = Tensor::new([ids.len(), c], out)?;
        Ok(self.push_op(v, Op::Embedding { table, ids: ids.to_vec() }, &[table]))
    }

    fn bcast_mid(&mut self, x: Var, s: Var, kind: Bcast) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ss = self.shape(s).to_vec();
        if xs.len() != 3 || ss != [xs[0], xs[2]] {
            return Err(shape_err!("broadcast of {:?} over {:?}", ss, xs));
        }
        let (b, m, c) = (xs[0], xs[1], xs[2]);
        let (xd, sd) = (self.value(x).data(), self.value(s).data());
        let mut out = vec![0.0; b * m * c];
        for bi in 0..b {
            let srow = &sd[bi * c..(bi + 1) * c];
            for mi in 0..m {
                let off = (bi * m + mi) * c;
                for ch in 0..c {
                    out[off + ch] = match kind {
                        Bcast::Add => xd[off + ch] + srow[ch],
                        Bcast::Mul => xd[off + ch] * srow[ch],
                    };
                }
            }
        }
        let v = Tensor::new(xs, out)?;
        Ok(self.push_op(v, Op::BcastMid { x, s, kind }, &[x, s]))
    }

    /// `x[b, m, c] + s[b, c]`
    pub fn add_bcast(&mut self, x: Var, s: Var) -> Result<Var> {
        self.bcast_mid(x, s, Bcast::Add)
    }

    /// `x[b, m, c] * s[b, c]`
    pub fn mul_bcast(&mut self, x: Var, s: Var) -> Result<Var> {
        self.bcast_mid(x, s, Bcast::Mul)
    }

    /// `x + y` where `y`'s shape is a suffix of `x`'s, repeated over the leading axes.
    pub fn add_leading(&mut self, x: Var, y: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ys = self.shape(y).to_vec();
        if ys.len() > xs.len() || xs[xs.len() - ys.len()..] != ys[..] {
            return Err(shape_err!("cannot broadcast {:?} onto {:?}", ys, xs));
        }
        let yd = self.value(y).data();
        let inner = yd.len();
        let mut out = self.value(x).data().to_vec();
        if inner > 0 {
            for chunk in out.chunks_mut(inner) {
                for (o, v) in chunk.iter_mut().zip(yd) {
                    *o += v;
                }
            }
        }
        let v = Tensor::new(xs, out)?;
        Ok(self.push_op(v, Op::AddLeading { x, y }, &[x, y]))
    }

    pub fn slice_axis(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let v = self.value(a).slice_axis(axis, start, len)?;
        Ok(self.push_op(v, Op::SliceAxis { a, axis, start }, &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push_op(v, Op::SumAll(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).mean());
        self.push_op(v, Op::MeanAll(a), &[a])
    }

    /// Sum over `axis`, removing it.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        if axis >= t.rank() {
            return Err(shape_err!("sum over axis {axis} of {:?}", t.shape()));
        }
        let (outer, extent, inner) = t.split_at_axis(axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for e in 0..extent {
                let src = &t.data()[(o * extent + e) * inner..(o * extent + e + 1) * inner];
                for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let v = Tensor::new(shape, out)?;
        Ok(self.push_op(v, Op::SumAxis { a, axis }, &[a]))
    }

    /// Select rows (first axis) of `x`.
    pub fn index_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let rows = t.shape()[0];
        let c = t.numel() / rows.max(1);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= rows {
                return Err(shape_err!("row {i} out of {rows}"));
            }
            out.extend_from_slice(&t.data()[i * c..(i + 1) * c]);
        }
        let mut shape = t.shape().to_vec();
        shape[0] = idx.len();
        let v = Tensor::new(shape, out)?;
        Ok(self.push_op(v, Op::IndexRows { x, idx: idx.to_vec() }, &[x]))
    }

    /// Zeros of `rows` rows with `src[i]` added into row `idx[i]`.
    pub fn scatter_rows(&mut self, src: Var, idx: &[usize], rows: usize) -> Result<Var> {
        let t = self.value(src);
        if t.shape()[0] != idx.len() {
            return Err(shape_err!("scatter of {:?} with {} indices", t.shape(), idx.len()));
        }
        let c = if idx.is_empty() { t.shape()[1..].iter().product() } else { t.numel() / idx.len() };
        let mut out = vec![0.0; rows * c];
        for (r, &i) in idx.iter().enumerate() {
            if i >= rows {
                return Err(shape_err!("scatter row {i} out of {rows}"));
            }
            for (d, s) in out[i * c..(i + 1) * c].iter_mut().zip(&t.data()[r * c..(r + 1) * c]) {
                *d += s;
            }
        }
        let mut shape = t.shape().to_vec();
        shape[0] = rows;
        let v = Tensor::new(shape, out)?;
        Ok(self.push_op(v, Op::ScatterRows { src, idx: idx.to_vec() }, &[src]))
    }

    /// `x[t, c] * g[t]`
    pub fn mul_rows(&mut self, x: Var, g: Var) -> Result<Var> {
        let (rows, c) = (self.shape(x)[0], self.value(x).numel() / self.shape(x)[0].max(1));
        if self.shape(g) != [rows] {
            return Err(shape_err!("row scale {:?} for {:?}", self.shape(g), self.shape(x)));
        }
        let (xd, gd) = (self.value(x).data(), self.value(g).data());
        let out: Vec<f64> = xd.iter().enumerate().map(|(i, v)| v * gd[i / c]).collect();
        let v = Tensor::new(self.shape(x).to_vec(), out)?;
        Ok(self.push_op(v, Op::MulRows { x, g }, &[x, g]))
    }

    /// Pick entries `(row, col)` of a matrix into a vector.
    pub fn gather_entries(&mut self, m: Var, at: &[(usize, usize)]) -> Result<Var> {
        let t = self.value(m);
        if t.rank() != 2 {
            return Err(shape_err!("gather_entries expects a matrix, got {:?}", t.shape()));
        }
        let cols = t.shape()[1];
        let mut out = Vec::with_capacity(at.len());
        for &(r, c) in at {
            if r >= t.shape()[0] || c >= cols {
                return Err(shape_err!("entry ({r}, {c}) outside {:?}", t.shape()));
            }
            out.push(t.data()[r * cols + c]);
        }
        let v = Tensor::from_vec(out);
        Ok(self.push_op(v, Op::GatherEntries { m, at: at.to_vec() }, &[m]))
    }

    /// Mask a row-stochastic matrix and renormalize each row over the kept entries.
    pub fn topk_renorm(&mut self, p: Var, mask: Vec<bool>) -> Result<Var> {
        let t = self.value(p);
        if t.rank() != 2 || mask.len() != t.numel() {
            return Err(shape_err!("topk mask of {} for {:?}", mask.len(), t.shape()));
        }
        let e = t.shape()[1];
        let mut out = vec![0.0; t.numel()];
        for (r, row) in t.data().chunks(e).enumerate() {
            let s: f64 = (0..e).filter(|&j| mask[r * e + j]).map(|j| row[j]).sum();
            for j in 0..e {
                if mask[r * e + j] {
                    out[r * e + j] = row[j] / s;
                }
            }
        }
        let v = Tensor::new(t.shape().to_vec(), out)?;
        Ok(self.push_op(v, Op::TopkRenorm { p, mask }, &[p]))
    }

    /// `a[.., d] / b[..]`
    pub fn div_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let asz = self.shape(a).to_vec();
        if asz.is_empty() || self.shape(b) != &asz[..asz.len() - 1] {
            return Err(shape_err!("div_last: {:?} by {:?}", asz, self.shape(b)));
        }
        let d = *asz.last().unwrap();
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let out: Vec<f64> = ad.iter().enumerate().map(|(i, v)| v / bd[i / d]).collect();
        let v = Tensor::new(asz, out)?;
        v.ensure_finite("div_last")?;
        Ok(self.push_op(v, Op::DivLast { a, b }, &[a, b]))
    }

    /// Gather along `axis`: output index `i` takes input index `map[i]`.
    pub fn index_axis(&mut self, a: Var, axis: usize, map: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if axis >= t.rank() {
            return Err(shape_err!("index_axis {axis} on {:?}", t.shape()));
        }
        let (outer, extent, inner) = t.split_at_axis(axis);
        let mut out = Vec::with_capacity(outer * map.len() * inner);
        for o in 0..outer {
            for &m in map {
                if m >= extent {
                    return Err(shape_err!("index {m} out of {extent}"));
                }
                let base = (o * extent + m) * inner;
                out.extend_from_slice(&t.data()[base..base + inner]);
            }
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = map.len();
        let v = Tensor::new(shape, out)?;
        Ok(self.push_op(v, Op::IndexAxis { a, axis, map: map.to_vec() }, &[a]))
    }

    /// Mean squared error between two same-shaped values.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    /// Reverse pass from a single-element `root`, seeding `d root = 1`.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(shape_err!("backward root must be a scalar, got {:?}", self.shape(root)));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::ones(self.shape(root).to_vec()));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            g.ensure_finite("gradient")?;
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = &*node.value;
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, t: Tensor| -> Result<()> {
            if !self.nodes[v.0].requires_grad {
                return Ok(());
            }
            match &mut grads[v.0] {
                Some(existing) => existing.accumulate(&t),
                slot @ None => {
                    *slot = Some(t);
                    Ok(())
                }
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.clone())?;
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.scale(-1.0))?;
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if needs(*a) {
                    acc(*a, g.zip_map(bv, |x, y| x * y)?)?;
                }
                if needs(*b) {
                    acc(*b, g.zip_map(av, |x, y| x * y)?)?;
                }
            }
            Op::Scale(a, s) => acc(*a, g.scale(*s))?,
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, k) = (wv.shape()[0], wv.shape()[1]);
                let m = xv.numel() / k.max(1);
                if needs(*x) {
                    let mut gx = vec![0.0; m * k];
                    matmul_nn(g.data(), wv.data(), &mut gx, m, n, k);
                    acc(*x, Tensor::new(xv.shape().to_vec(), gx)?)?;
                }
                if needs(*w) {
                    let mut gw = vec![0.0; n * k];
                    matmul_tn(g.data(), xv.data(), &mut gw, m, n, k);
                    acc(*w, Tensor::new([n, k], gw)?)?;
                }
                if let Some(b) = b {
                    if needs(*b) {
                        let mut gb = vec![0.0; n];
                        for row in g.data().chunks(n) {
                            for (d, s) in gb.iter_mut().zip(row) {
                                *d += s;
                            }
                        }
                        acc(*b, Tensor::from_vec(gb))?;
                    }
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let r = av.rank();
                let (m, k) = (av.shape()[r - 2], av.shape()[r - 1]);
                let n = out.shape()[r - 1];
                let batch = av.numel() / (m * k).max(1);
                let gd = g.data();
                if needs(*a) {
                    let mut ga = vec![0.0; av.numel()];
                    for p in 0..batch {
                        let gp = &gd[p * m * n..(p + 1) * m * n];
                        let bp = &bv.data()[p * k * n..(p + 1) * k * n];
                        let dst = &mut ga[p * m * k..(p + 1) * m * k];
                        if *trans_b {
                            matmul_nn(gp, bp, dst, m, n, k);
                        } else {
                            matmul_nt(gp, bp, dst, m, n, k);
                        }
                    }
                    acc(*a, Tensor::new(av.shape().to_vec(), ga)?)?;
                }
                if needs(*b) {
                    let mut gb = vec![0.0; bv.numel()];
                    for p in 0..batch {
                        let gp = &gd[p * m * n..(p + 1) * m * n];
                        let ap = &av.data()[p * m * k..(p + 1) * m * k];
                        let dst = &mut gb[p * k * n..(p + 1) * k * n];
                        if *trans_b {
                            matmul_tn(gp, ap, dst, m, n, k);
                        } else {
                            matmul_tn(ap, gp, dst, m, k, n);
                        }
                    }
                    acc(*b, Tensor::new(bv.shape().to_vec(), gb)?)?;
                }
            }
            Op::Permute { a, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                acc(*a, g.permute(&inv)?)?;
            }
            Op::Reshape(a) => acc(*a, g.reshape(self.shape(*a).to_vec())?)?,
            Op::Softmax(a) => {
                let (_, d) = rows_of(out);
                let mut gx = vec![0.0; out.numel()];
                for ((gr, yr), dst) in
                    g.data().chunks(d).zip(out.data().chunks(d)).zip(gx.chunks_mut(d))
                {
                    let dotp: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        dst[j] = yr[j] * (gr[j] - dotp);
                    }
                }
                acc(*a, Tensor::new(out.shape().to_vec(), gx)?)?;
            }
            Op::LayerNorm { a, eps } => {
                let xv = self.value(*a);
                let (_, d) = rows_of(out);
                let mut gx = vec![0.0; out.numel()];
                for (((gr, yr), xr), dst) in g
                    .data()
                    .chunks(d)
                    .zip(out.data().chunks(d))
                    .zip(xv.data().chunks(d))
                    .zip(gx.chunks_mut(d))
                {
                    let mean = xr.iter().sum::<f64>() / d as f64;
                    let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let gm = gr.iter().sum::<f64>() / d as f64;
                    let gym = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        dst[j] = inv * (gr[j] - gm - yr[j] * gym);
                    }
                }
                acc(*a, Tensor::new(out.shape().to_vec(), gx)?)?;
            }
            Op::Gelu(a) => {
                let gx = g.zip_map(self.value(*a), |gv, x| gv * kernels::gelu_grad(x))?;
                acc(*a, gx)?;
            }
            Op::Silu(a) => {
                let gx = g.zip_map(self.value(*a), |gv, x| gv * kernels::silu_grad(x))?;
                acc(*a, gx)?;
            }
            Op::Relu(a) => {
                let gx = g.zip_map(self.value(*a), |gv, x| if x > 0.0 { gv } else { 0.0 })?;
                acc(*a, gx)?;
            }
            Op::Focus { a, p } => {
                let xv = self.value(*a);
                let (_, d) = rows_of(xv);
                let mut gx = vec![0.0; xv.numel()];
                for ((xr, gr), dst) in
                    xv.data().chunks(d).zip(g.data().chunks(d)).zip(gx.chunks_mut(d))
                {
                    kernels::focus_row_backward(xr, *p, gr, dst);
                }
                acc(*a, Tensor::new(xv.shape().to_vec(), gx)?)?;
            }
            Op::Pool { a, n } => {
                let xv = self.value(*a);
                let r = xv.rank();
                let (big_n, d) = (xv.shape()[r - 2], xv.shape()[r - 1]);
                let outer = xv.numel() / (big_n * d).max(1);
                let mut gx = vec![0.0; xv.numel()];
                for o in 0..outer {
                    for i in 0..*n {
                        let (s, e) = kernels::pool_bucket(i, big_n, *n);
                        let w = 1.0 / (e - s) as f64;
                        let src = &g.data()[(o * n + i) * d..(o * n + i + 1) * d];
                        for t in s..e {
                            let dst = &mut gx[(o * big_n + t) * d..(o * big_n + t + 1) * d];
                            for (dv, sv) in dst.iter_mut().zip(src) {
                                *dv += sv * w;
                            }
                        }
                    }
                }
                acc(*a, Tensor::new(xv.shape().to_vec(), gx)?)?;
            }
            Op::DepthwiseConv { x, kernel, bias, grid, k } => {
                let (xv, kv) = (self.value(*x), self.value(*kernel));
                let (b, n, c) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let kk = k * k;
                let (xd, kd, gd) = (xv.data(), kv.data(), g.data());
                if needs(*x) {
                    let mut gx = vec![0.0; xv.numel()];
                    conv_apply(*grid, *k, c, b, |bi, dst, src, tap| {
                        for ch in 0..c {
                            gx[(bi * n + src) * c + ch] += gd[(bi * n + dst) * c + ch] * kd[ch * kk + tap];
                        }
                    });
                    acc(*x, Tensor::new(xv.shape().to_vec(), gx)?)?;
                }
                if needs(*kernel) {
                    let mut gk = vec![0.0; kv.numel()];
                    conv_apply(*grid, *k, c, b, |bi, dst, src, tap| {
                        for ch in 0..c {
                            gk[ch * kk + tap] += gd[(bi * n + dst) * c + ch] * xd[(bi * n + src) * c + ch];
                        }
                    });
                    acc(*kernel, Tensor::new(kv.shape().to_vec(), gk)?)?;
                }
                if let Some(bv) = bias {
                    if needs(*bv) {
                        let mut gb = vec![0.0; c];
                        for row in gd.chunks(c) {
                            for (d, s) in gb.iter_mut().zip(row) {
                                *d += s;
                            }
                        }
                        acc(*bv, Tensor::from_vec(gb))?;
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let tv = self.value(*table);
                let c = tv.numel() / tv.shape()[0].max(1);
                let mut gt = vec![0.0; tv.numel()];
                for (r, &id) in ids.iter().enumerate() {
                    for (d, s) in gt[id * c..(id + 1) * c].iter_mut().zip(&g.data()[r * c..(r + 1) * c]) {
                        *d += s;
                    }
                }
                acc(*table, Tensor::new(tv.shape().to_vec(), gt)?)?;
            }
            Op::BcastMid { x, s, kind } => {
                let (xv, sv) = (self.value(*x), self.value(*s));
                let (b, m, c) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
                let gd = g.data();
                match kind {
                    Bcast::Add => acc(*x, g.clone())?,
                    Bcast::Mul => {
                        if needs(*x) {
                            let mut gx = vec![0.0; gd.len()];
                            for bi in 0..b {
                                for mi in 0..m {
                                    let off = (bi * m + mi) * c;
                                    for ch in 0..c {
                                        gx[off + ch] = gd[off + ch] * sv.data()[bi * c + ch];
                                    }
                                }
                            }
                            acc(*x, Tensor::new(xv.shape().to_vec(), gx)?)?;
                        }
                    }
                }
                if needs(*s) {
                    let mut gs = vec![0.0; b * c];
                    for bi in 0..b {
                        for mi in 0..m {
                            let off = (bi * m + mi) * c;
                            for ch in 0..c {
                                gs[bi * c + ch] += match kind {
                                    Bcast::Add => gd[off + ch],
                                    Bcast::Mul => gd[off + ch] * xv.data()[off + ch],
                                };
                            }
                        }
                    }
                    acc(*s, Tensor::new([b, c], gs)?)?;
                }
            }
            Op::AddLeading { x, y } => {
                acc(*x, g.clone())?;
                if needs(*y) {
                    let yv = self.value(*y);
                    let inner = yv.numel();
                    let mut gy = vec![0.0; inner];
                    if inner > 0 {
                        for chunk in g.data().chunks(inner) {
                            for (d, s) in gy.iter_mut().zip(chunk) {
                                *d += s;
                            }
                        }
                    }
                    acc(*y, Tensor::new(yv.shape().to_vec(), gy)?)?;
                }
            }
            Op::SliceAxis { a, axis, start } => {
                let av = self.value(*a);
                let (outer, extent, inner) = av.split_at_axis(*axis);
                let len = out.shape()[*axis];
                let mut ga = vec![0.0; av.numel()];
                for o in 0..outer {
                    let dst = o * extent * inner + start * inner;
                    ga[dst..dst + len * inner]
                        .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                acc(*a, Tensor::new(av.shape().to_vec(), ga)?)?;
            }
            Op::SumAll(a) => {
                acc(*a, Tensor::full(self.shape(*a).to_vec(), g.item()))?;
            }
            Op::MeanAll(a) => {
                let n = self.value(*a).numel() as f64;
                acc(*a, Tensor::full(self.shape(*a).to_vec(), g.item() / n))?;
            }
            Op::SumAxis { a, axis } => {
                let av = self.value(*a);
                let (outer, extent, inner) = av.split_at_axis(*axis);
                let mut ga = vec![0.0; av.numel()];
                for o in 0..outer {
                    let src = &g.data()[o * inner..(o + 1) * inner];
                    for e in 0..extent {
                        ga[(o * extent + e) * inner..(o * extent + e + 1) * inner].copy_from_slice(src);
                    }
                }
                acc(*a, Tensor::new(av.shape().to_vec(), ga)?)?;
            }
            Op::IndexRows { x, idx } => {
                let xv = self.value(*x);
                let c = xv.numel() / xv.shape()[0].max(1);
                let mut gx = vec![0.0; xv.numel()];
                for (r, &i) in idx.iter().enumerate() {
                    for (d, s) in gx[i * c..(i + 1) * c].iter_mut().zip(&g.data()[r * c..(r + 1) * c]) {
                        *d += s;
                    }
                }
                acc(*x, Tensor::new(xv.shape().to_vec(), gx)?)?;
            }
            Op::ScatterRows { src, idx } => {
                let sv = self.value(*src);
                let c = if idx.is_empty() { 0 } else { sv.numel() / idx.len() };
                let mut gs = Vec::with_capacity(sv.numel());
                for &i in idx {
                    gs.extend_from_slice(&g.data()[i * c..(i + 1) * c]);
                }
                acc(*src, Tensor::new(sv.shape().to_vec(), gs)?)?;
            }
            Op::MulRows { x, g: gate } => {
                let (xv, gv) = (self.value(*x), self.value(*gate));
                let c = xv.numel() / xv.shape()[0].max(1);
                if needs(*x) {
                    let gx: Vec<f64> =
                        g.data().iter().enumerate().map(|(i, v)| v * gv.data()[i / c]).collect();
                    acc(*x, Tensor::new(xv.shape().to_vec(), gx)?)?;
                }
                if needs(*gate) {
                    let mut gg = vec![0.0; gv.numel()];
                    for (i, (a, b)) in g.data().iter().zip(xv.data()).enumerate() {
                        gg[i / c] += a * b;
                    }
                    acc(*gate, Tensor::from_vec(gg))?;
                }
            }
            Op::GatherEntries { m, at } => {
                let mv = self.value(*m);
                let cols = mv.shape()[1];
                let mut gm = vec![0.0; mv.numel()];
                for (&(r, c), gv) in at.iter().zip(g.data()) {
                    gm[r * cols + c] += gv;
                }
                acc(*m, Tensor::new(mv.shape().to_vec(), gm)?)?;
            }
            Op::TopkRenorm { p, mask } => {
                let pv = self.value(*p);
                let e = pv.shape()[1];
                let mut gp = vec![0.0; pv.numel()];
                for r in 0..pv.shape()[0] {
                    let row = r * e..(r + 1) * e;
                    let s: f64 = row.clone().filter(|&j| mask[j]).map(|j| pv.data()[j]).sum();
                    let gy: f64 = row.clone().map(|j| g.data()[j] * out.data()[j]).sum();
                    for j in row {
                        if mask[j] {
                            gp[j] = (g.data()[j] - gy) / s;
                        }
                    }
                }
                acc(*p, Tensor::new(pv.shape().to_vec(), gp)?)?;
            }
            Op::DivLast { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let d = *av.shape().last().unwrap();
                if needs(*a) {
                    let ga: Vec<f64> =
                        g.data().iter().enumerate().map(|(i, v)| v / bv.data()[i / d]).collect();
                    acc(*a, Tensor::new(av.shape().to_vec(), ga)?)?;
                }
                if needs(*b) {
                    let mut gb = vec![0.0; bv.numel()];
                    for (i, (gv, yv)) in g.data().iter().zip(out.data()).enumerate() {
                        gb[i / d] -= gv * yv / bv.data()[i / d];
                    }
                    acc(*b, Tensor::new(bv.shape().to_vec(), gb)?)?;
                }
            }
            Op::IndexAxis { a, axis, map } => {
                let av = self.value(*a);
                let (outer, extent, inner) = av.split_at_axis(*axis);
                let mut ga = vec![0.0; av.numel()];
                for o in 0..outer {
                    for (i, &m) in map.iter().enumerate() {
                        let src = &g.data()[(o * map.len() + i) * inner..(o * map.len() + i + 1) * inner];
                        let dst = &mut ga[(o * extent + m) * inner..(o * extent + m + 1) * inner];
                        for (dv, sv) in dst.iter_mut().zip(src) {
                            *dv += sv;
                        }
                    }
                }
                acc(*a, Tensor::new(av.shape().to_vec(), ga)?)?;
            }
        }
        Ok(())
    }
}

/// Visit every (batch, output token, input token, kernel tap) of a same-padded
/// `k×k` convolution over a row-major token grid.
fn conv_apply(
    grid: (usize, usize),
    k: usize,
    _channels: usize,
    batch: usize,
    mut f: impl FnMut(usize, usize, usize, usize),
) {
    let (h, w) = grid;
    let r = (k / 2) as isize;
    for bi in 0..batch {
        for i in 0..h as isize {
            for j in 0..w as isize {
                let dst = (i as usize) * w + j as usize;
                for di in 0..k as isize {
                    let si = i + di - r;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    for dj in 0..k as isize {
                        let sj = j + dj - r;
                        if sj < 0 || sj >= w as isize {
                            continue;
                        }
                        let src = (si as usize) * w + sj as usize;
                        f(bi, dst, src, (di as usize) * k + dj as usize);
                    }
                }
            }
        }
    }
}
