//! The four interchangeable self-attention implementations.
//!
//! All variants map `[B, N, C] → [B, N, C]`:
//!
//! * **baseline**: multi-head `softmax(QKᵀ/√d)V`.
//! * **shallow**: the same with Q/K/V projected to width C/2.
//! * **mediated**: `n` mediator tokens pooled from Q carry attention in two
//!   `O(NnC)` steps, plus a depthwise convolution of V on the token grid.
//! * **focused**: softmax replaced by a norm-preserving power map on Q and K,
//!   evaluated key-value first, with `G` query heads sharing one K/V head.

use rand::Rng;

use crate::config::{AttentionVariant, ModelConfig};
use crate::error::{config_err, shape_err, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::params::{Bound, ParamId, ParamKind, ParamStore};

/// Added to the focused-attention normalizer.
pub const FOCUSED_EPS: f64 = 1e-6;

/// Which side of the focused product is formed first.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FocusedOrder {
    /// `Q_p (K_pᵀ V)`: linear in N.
    KeyValueFirst,
    /// `(Q_p K_pᵀ) V`: quadratic in N, used to cross-check the reordering.
    QueryKeyFirst,
}

#[derive(Clone, Debug)]
enum Weights {
    /// Fused `[3W, C]` projection, used by baseline, shallow and mediated.
    Fused { qkv_w: ParamId, qkv_b: ParamId, dwc: Option<(ParamId, ParamId)> },
    /// Separate `[C, C]` query and `[2C/G, C]` key/value projections.
    Grouped { q_w: ParamId, q_b: ParamId, kv_w: ParamId, kv_b: ParamId },
}

/// Parameter handles and geometry of one attention layer.
#[derive(Clone, Debug)]
pub struct AttentionLayer {
    pub variant: AttentionVariant,
    pub hidden: usize,
    pub heads: usize,
    /// Tokens per side of the square patch grid.
    pub grid: usize,
    weights: Weights,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
}

fn xavier<R: Rng + ?Sized>(out: usize, inp: usize, rng: &mut R) -> Tensor {
    let bound = (6.0 / (inp + out) as f64).sqrt();
    Tensor::uniform([out, inp], -bound, bound, rng)
}

impl AttentionLayer {
    /// Register this layer's parameters under `prefix` (e.g. `blocks.3.attn`).
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let c = cfg.hidden;
        let width = cfg.attn_width();
        let weights = match &cfg.attention {
            AttentionVariant::Focused { groups, .. } => {
                let kv = 2 * c / groups;
                Weights::Grouped {
                    q_w: store.add(format!("{prefix}.q.weight"), ParamKind::Linear, xavier(c, c, rng)),
                    q_b: store.add(format!("{prefix}.q.bias"), ParamKind::Bias, Tensor::zeros([c])),
                    kv_w: store.add(format!("{prefix}.kv.weight"), ParamKind::Linear, xavier(kv, c, rng)),
                    kv_b: store.add(format!("{prefix}.kv.bias"), ParamKind::Bias, Tensor::zeros([kv])),
                }
            }
            variant => {
                let qkv_w =
                    store.add(format!("{prefix}.qkv.weight"), ParamKind::Linear, xavier(3 * width, c, rng));
                let qkv_b = store.add(format!("{prefix}.qkv.bias"), ParamKind::Bias, Tensor::zeros([3 * width]));
                let dwc = match variant {
                    AttentionVariant::Mediated { dwc_kernel, .. } => {
                        let kk = dwc_kernel * dwc_kernel;
                        let bound = 1.0 / (kk as f64).sqrt();
                        Some((
                            store.add(
                                format!("{prefix}.dwc.weight"),
                                ParamKind::Conv,
                                Tensor::uniform([c, kk], -bound, bound, rng),
                            ),
                            store.add(format!("{prefix}.dwc.bias"), ParamKind::Bias, Tensor::zeros([c])),
                        ))
                    }
                    _ => None,
                };
                Weights::Fused { qkv_w, qkv_b, dwc }
            }
        };
        let proj_w = store.add(format!("{prefix}.proj.weight"), ParamKind::Linear, xavier(c, width, rng));
        let proj_b = store.add(format!("{prefix}.proj.bias"), ParamKind::Bias, Tensor::zeros([c]));
        Ok(Self { variant: cfg.attention.clone(), hidden: c, heads: cfg.heads, grid: cfg.grid(), weights, proj_w, proj_b })
    }

    /// Internal Q/K/V width.
    pub fn width(&self) -> usize {
        match self.variant {
            AttentionVariant::Shallow => self.hidden / 2,
            _ => self.hidden,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.width() / self.heads
    }

    /// `(weight, bias)` of the fused Q/K/V projection, when this variant has one.
    pub fn qkv(&self) -> Option<(ParamId, ParamId)> {
        match self.weights {
            Weights::Fused { qkv_w, qkv_b, .. } => Some((qkv_w, qkv_b)),
            Weights::Grouped { .. } => None,
        }
    }

    /// Depthwise convolution `(kernel, bias)` of the mediated variant.
    pub fn dwc(&self) -> Option<(ParamId, ParamId)> {
        match self.weights {
            Weights::Fused { dwc, .. } => dwc,
            Weights::Grouped { .. } => None,
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, p: &Bound, x: Var) -> Result<Var> {
        self.forward_with(tape, p, x, FocusedOrder::KeyValueFirst)
    }

    pub fn forward_with(&self, tape: &mut Tape<'_>, p: &Bound, x: Var, order: FocusedOrder) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        if s.len() != 3 || s[2] != self.hidden {
            return Err(shape_err!("attention expects [B, N, {}], got {:?}", self.hidden, s));
        }
        let merged = match &self.variant {
            AttentionVariant::Baseline | AttentionVariant::Shallow => self.softmax_heads(tape, p, x)?,
            AttentionVariant::Mediated { n, .. } => self.mediated(tape, p, x, *n)?,
            AttentionVariant::Focused { p: power, groups, rectify } => {
                self.focused(tape, p, x, *power, *groups, *rectify, order)?
            }
        };
        tape.linear(merged, p[self.proj_w], Some(p[self.proj_b]))
    }

    /// Tensor-in, tensor-out convenience for inference.
    pub fn apply(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::no_grad();
        let p = store.bind(&mut tape, false)?;
        let xv = tape.leaf(x.clone(), false);
        let y = self.forward(&mut tape, &p, xv)?;
        Ok(tape.value(y).clone())
    }

    /// Project and split into `[B, h, N, d]` query, key and value heads.
    fn qkv_heads(&self, tape: &mut Tape<'_>, p: &Bound, x: Var) -> Result<(Var, Var, Var)> {
        let Weights::Fused { qkv_w, qkv_b, .. } = self.weights else {
            unreachable!("fused projection on grouped weights")
        };
        let (b, n) = (tape.shape(x)[0], tape.shape(x)[1]);
        let (h, d) = (self.heads, self.head_dim());
        let qkv = tape.linear(x, p[qkv_w], Some(p[qkv_b]))?;
        let qkv = tape.reshape(qkv, &[b, n, 3, h, d])?;
        let qkv = tape.permute(qkv, &[2, 0, 3, 1, 4])?;
        let mut parts = [x; 3];
        for (i, part) in parts.iter_mut().enumerate() {
            let s = tape.slice_axis(qkv, 0, i, 1)?;
            *part = tape.reshape(s, &[b, h, n, d])?;
        }
        Ok((parts[0], parts[1], parts[2]))
    }

    fn merge_heads(&self, tape: &mut Tape<'_>, heads: Var) -> Result<Var> {
        let s = tape.shape(heads).to_vec();
        let (b, h, n, d) = (s[0], s[1], s[2], s[3]);
        let t = tape.permute(heads, &[0, 2, 1, 3])?;
        tape.reshape(t, &[b, n, h * d])
    }

    /// `softmax(a bᵀ/√d) c`
    fn softmax_attend(&self, tape: &mut Tape<'_>, a: Var, b: Var, c: Var) -> Result<Var> {
        let scores = tape.bmm(a, b, true)?;
        let scores = tape.scale(scores, 1.0 / (self.head_dim() as f64).sqrt());
        let w = tape.softmax(scores)?;
        tape.bmm(w, c, false)
    }

    /// Baseline and shallow multi-head attention (pre output projection).
    fn softmax_heads(&self, tape: &mut Tape<'_>, p: &Bound, x: Var) -> Result<Var> {
        let (q, k, v) = self.qkv_heads(tape, p, x)?;
        let o = self.softmax_attend(tape, q, k, v)?;
        self.merge_heads(tape, o)
    }

    fn mediated(&self, tape: &mut Tape<'_>, p: &Bound, x: Var, n_med: usize) -> Result<Var> {
        let (q, k, v) = self.qkv_heads(tape, p, x)?;
        let n = tape.shape(x)[1];
        if n_med == 0 || n_med > n {
            return Err(config_err!("cannot pool {n} tokens into {n_med} mediators"));
        }
        let t = tape.pool_tokens(q, n_med)?;
        let v_med = self.softmax_attend(tape, t, k, v)?;
        let o = self.softmax_attend(tape, q, t, v_med)?;
        let o = self.merge_heads(tape, o)?;
        let v_tokens = self.merge_heads(tape, v)?;
        let (kernel, bias) = self.dwc().expect("mediated layer has a depthwise kernel");
        let grid = if self.grid * self.grid == n { (self.grid, self.grid) } else { square_grid(n)? };
        let local = tape.depthwise_conv(v_tokens, p[kernel], Some(p[bias]), grid)?;
        tape.add(o, local)
    }

    #[allow(clippy::too_many_arguments)]
    fn focused(
        &self,
        tape: &mut Tape<'_>,
        p: &Bound,
        x: Var,
        power: u32,
        groups: usize,
        rectify: bool,
        order: FocusedOrder,
    ) -> Result<Var> {
        let Weights::Grouped { q_w, q_b, kv_w, kv_b } = self.weights else {
            unreachable!("grouped projection on fused weights")
        };
        let (b, n) = (tape.shape(x)[0], tape.shape(x)[1]);
        let (h, d) = (self.heads, self.head_dim());
        let hk = h / groups;
        let q = tape.linear(x, p[q_w], Some(p[q_b]))?;
        let kv = tape.linear(x, p[kv_w], Some(p[kv_b]))?;
        let kw = hk * d;
        let mut k = tape.slice_axis(kv, 2, 0, kw)?;
        let v = tape.slice_axis(kv, 2, kw, kw)?;
        let mut q = q;
        if rectify {
            q = tape.relu(q);
            k = tape.relu(k);
        }
        let qp = tape.focus(q, power)?;
        let kp = tape.focus(k, power)?;
        let split = |tape: &mut Tape<'_>, t: Var, heads: usize| -> Result<Var> {
            let r = tape.reshape(t, &[b, n, heads, d])?;
            tape.permute(r, &[0, 2, 1, 3])
        };
        let qh = split(tape, qp, h)?;
        let kh = split(tape, kp, hk)?;
        let vh = split(tape, v, hk)?;
        let o = focused_attention_core(tape, qh, kh, vh, groups, order)?;
        self.merge_heads(tape, o)
    }
}

fn square_grid(n: usize) -> Result<(usize, usize)> {
    let g = (n as f64).sqrt().round() as usize;
    if g * g != n {
        return Err(shape_err!("{n} tokens do not form a square grid"));
    }
    Ok((g, g))
}

/// Query head `i` reads key/value head `⌊i/G⌋`.
pub fn kv_head_map(heads: usize, groups: usize) -> Vec<usize> {
    (0..heads).map(|i| i / groups).collect()
}

/// Normalized linear attention on already-focused heads.
///
/// `qp: [B, h, N, d]`, `kp`, `v: [B, h/G, N, d]`. Returns
/// `Q_p(K_pᵀV) / (Q_p(K_pᵀ𝟙) + ε)` per query head, or the left-associated
/// `(Q_pK_pᵀ)V / ((Q_pK_pᵀ)𝟙 + ε)` when `order` asks for it.
pub fn focused_attention_core(
    tape: &mut Tape<'_>,
    qp: Var,
    kp: Var,
    v: Var,
    groups: usize,
    order: FocusedOrder,
) -> Result<Var> {
    let qs = tape.shape(qp).to_vec();
    let ks = tape.shape(kp).to_vec();
    if qs.len() != 4 || ks.len() != 4 || groups == 0 || qs[1] % groups != 0 || ks[1] * groups != qs[1] {
        return Err(config_err!("focused heads {:?} vs kv heads {:?} with G={groups}", qs, ks));
    }
    if tape.shape(v) != ks.as_slice() {
        return Err(shape_err!("key {:?} and value {:?} heads differ", ks, tape.shape(v)));
    }
    let (b, h, n) = (qs[0], qs[1], qs[2]);
    let map = kv_head_map(h, groups);
    let (num, den) = match order {
        FocusedOrder::KeyValueFirst => {
            let kt = tape.permute(kp, &[0, 1, 3, 2])?;
            let kv = tape.bmm(kt, v, false)?; // [B, hk, d, d]
            let z = tape.sum_axis(kp, 2)?; // [B, hk, d]
            let kv = tape.index_axis(kv, 1, &map)?;
            let z = tape.index_axis(z, 1, &map)?;
            let d = ks[3];
            let z = tape.reshape(z, &[b, h, d, 1])?;
            let num = tape.bmm(qp, kv, false)?;
            let den = tape.bmm(qp, z, false)?;
            (num, tape.reshape(den, &[b, h, n])?)
        }
        FocusedOrder::QueryKeyFirst => {
            let ke = tape.index_axis(kp, 1, &map)?;
            let ve = tape.index_axis(v, 1, &map)?;
            let s = tape.bmm(qp, ke, true)?; // [B, h, N, N]
            let num = tape.bmm(s, ve, false)?;
            (num, tape.sum_axis(s, 3)?)
        }
    };
    let eps = tape.constant(Tensor::full([b, h, n], FOCUSED_EPS));
    let den = tape.add(den, eps)?;
    tape.div_last(num, den)
}
