//! Post-training compression: attention-head pruning by weight norm and
//! int8 weight-only quantization.

use serde::{Deserialize, Serialize};

use crate::config::AttentionVariant;
use crate::error::{config_err, shape_err, Error, Result};
use crate::model::DiTModel;
use crate::numerics::{Tape, Tensor};
use crate::params::{ParamKind, ParamStore, ParamValue};

/// Granularity of the quantization scale.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantMode {
    /// One scale per output channel (row).
    #[default]
    PerChannel,
    /// One scale for the whole tensor.
    PerTensor,
}

/// Int8 weights with symmetric scales: `w ≈ S·(q − Z)`, `Z = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedTensor {
    pub q: Vec<i8>,
    /// One entry per output channel; a single entry in per-tensor mode.
    pub scales: Vec<f32>,
    pub zero_points: Vec<i32>,
    shape: Vec<usize>,
}

impl QuantizedTensor {
    pub fn from_parts(shape: Vec<usize>, q: Vec<i8>, scales: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if q.len() != numel || shape.is_empty() {
            return Err(shape_err!("{} int8 values for shape {:?}", q.len(), shape));
        }
        if scales.len() != 1 && scales.len() != shape[0] {
            return Err(shape_err!("{} scales for {} channels", scales.len(), shape[0]));
        }
        let zero_points = vec![0; scales.len()];
        Ok(Self { q, scales, zero_points, shape })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn mode(&self) -> QuantMode {
        if self.scales.len() == 1 && self.shape[0] != 1 {
            QuantMode::PerTensor
        } else {
            QuantMode::PerChannel
        }
    }

    /// Scale applying to output channel `row`.
    pub fn scale(&self, row: usize) -> f64 {
        if self.scales.len() == 1 {
            self.scales[0] as f64
        } else {
            self.scales[row] as f64
        }
    }

    pub fn dequantize(&self) -> Tensor {
        let rows = self.shape[0];
        let cols = self.q.len() / rows.max(1);
        let mut out = Vec::with_capacity(self.q.len());
        for r in 0..rows {
            let s = self.scale(r);
            let z = self.zero_points[if self.scales.len() == 1 { 0 } else { r }] as f64;
            out.extend(self.q[r * cols..(r + 1) * cols].iter().map(|&q| s * (q as f64 - z)));
        }
        Tensor::new(self.shape.clone(), out).expect("shape checked at construction")
    }

    /// Bytes of int8 payload plus f32 scales.
    pub fn storage_bytes(&self) -> usize {
        self.q.len() + 4 * self.scales.len()
    }
}

/// Largest f32 not above `max_abs/127`; 1 for an all-zero group.
fn symmetric_scale(max_abs: f64) -> f32 {
    if max_abs == 0.0 {
        return 1.0;
    }
    let exact = max_abs / 127.0;
    let mut s = exact as f32;
    if s as f64 > exact {
        s = f32::from_bits(s.to_bits() - 1);
    }
    s
}

fn quantize_value(w: f64, s: f32) -> i8 {
    // f64::round rounds half away from zero
    (w / s as f64).round().clamp(-128.0, 127.0) as i8
}

/// Symmetric int8 quantization of a weight matrix (rows are output channels).
pub fn quantize_tensor(w: &Tensor, mode: QuantMode) -> Result<QuantizedTensor> {
    if w.rank() == 0 {
        return Err(shape_err!("cannot quantize a scalar"));
    }
    if !w.all_finite() {
        return Err(Error::NumericDomain("non-finite weight".into()));
    }
    let rows = w.shape()[0];
    let cols = w.numel() / rows.max(1);
    let max_abs = |xs: &[f64]| xs.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scales: Vec<f32> = match mode {
        QuantMode::PerChannel => w.data().chunks(cols.max(1)).map(|r| symmetric_scale(max_abs(r))).collect(),
        QuantMode::PerTensor => vec![symmetric_scale(max_abs(w.data()))],
    };
    let mut q = Vec::with_capacity(w.numel());
    for r in 0..rows {
        let s = if scales.len() == 1 { scales[0] } else { scales[r] };
        q.extend(w.data()[r * cols..(r + 1) * cols].iter().map(|&v| quantize_value(v, s)));
    }
    QuantizedTensor::from_parts(w.shape().to_vec(), q, scales)
}

/// `x · dequant(qw)ᵀ + bias` with float activations.
pub fn quantized_linear(x: &Tensor, qw: &QuantizedTensor, bias: Option<&Tensor>) -> Result<Tensor> {
    if qw.shape().len() != 2 {
        return Err(shape_err!("quantized linear weight must be 2-D, got {:?}", qw.shape()));
    }
    let mut tape = Tape::no_grad();
    let xv = tape.leaf(x.clone(), false);
    let wv = tape.constant(qw.dequantize());
    let bv = bias.map(|b| tape.constant(b.clone()));
    let y = tape.linear(xv, wv, bv)?;
    Ok(tape.value(y).clone())
}

/// Replace every linear-layer weight of `store` with int8 storage.
pub fn quantize_store(store: &ParamStore, mode: QuantMode) -> Result<ParamStore> {
    let mut out = store.clone();
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let p = store.param(id);
        if p.kind != ParamKind::Linear {
            continue;
        }
        if let ParamValue::F32(t) = &p.value {
            out.set_value(id, ParamValue::Int8(quantize_tensor(t, mode)?))?;
        }
    }
    Ok(out)
}

/// Weight-only int8 copy of `model`; activations stay in float.
pub fn quantize_model(model: &DiTModel, mode: QuantMode) -> Result<DiTModel> {
    let mut m = model.clone();
    m.params = quantize_store(&model.params, mode)?;
    Ok(m)
}

/// Bytes needed to store every parameter (f32 = 4, int8 = 1 plus scales).
pub fn weight_storage_bytes(store: &ParamStore) -> usize {
    store
        .iter()
        .map(|(_, p)| match &p.value {
            ParamValue::F32(t) => 4 * t.numel(),
            ParamValue::Int8(q) => q.storage_bytes(),
        })
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HeadScore {
    pub layer: usize,
    pub head: usize,
    pub score: f64,
}

fn head_rows(width: usize, d: usize, head: usize) -> impl Iterator<Item = usize> {
    (0..3).flat_map(move |part| part * width + head * d..part * width + (head + 1) * d)
}

/// Per-head `‖W_q‖ + ‖W_k‖ + ‖W_v‖` over each head's weight slices.
pub fn score_attention_heads(model: &DiTModel) -> Result<Vec<HeadScore>> {
    let mut scores = Vec::new();
    for (layer, block) in model.blocks.iter().enumerate() {
        let attn = &block.attn;
        let (w_id, _) = attn.qkv().ok_or_else(|| {
            Error::UnsupportedVariant(format!("{} attention has no per-head Q/K/V slices", attn.variant.label()))
        })?;
        let w = model.params.value(w_id).to_tensor();
        let (width, d) = (attn.width(), attn.head_dim());
        let cols = w.shape()[1];
        for head in 0..attn.heads {
            let mut score = 0.0;
            for part in 0..3 {
                let start = (part * width + head * d) * cols;
                let sq: f64 = w.data()[start..start + d * cols].iter().map(|v| v * v).sum();
                score += sq.sqrt();
            }
            scores.push(HeadScore { layer, head, score });
        }
    }
    Ok(scores)
}

/// Indices of the `k` best heads (ties to the lower index), ascending.
pub fn top_heads(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut kept = order[..k.min(order.len())].to_vec();
    kept.sort_unstable();
    kept
}

/// Keep the `k` highest-scoring heads per layer and zero the Q/K/V weight and
/// bias slices of the rest (and their depthwise-conv channels in mediated
/// layers). Architecture is unchanged.
pub fn prune_heads(model: &DiTModel, k: usize) -> Result<DiTModel> {
    let heads = model.config.heads;
    if k == 0 || k > heads {
        return Err(config_err!("cannot keep {k} of {heads} heads"));
    }
    if matches!(model.config.attention, AttentionVariant::Focused { .. }) {
        return Err(Error::UnsupportedVariant("focused attention shares K/V across heads".into()));
    }
    if k == heads {
        return Ok(model.clone());
    }
    let scores = score_attention_heads(model)?;
    let mut m = model.clone();
    for (layer, block) in model.blocks.iter().enumerate() {
        let attn = &block.attn;
        let layer_scores: Vec<f64> =
            scores.iter().filter(|s| s.layer == layer).map(|s| s.score).collect();
        let kept = top_heads(&layer_scores, k);
        let (w_id, b_id) = attn.qkv().expect("checked by scoring");
        let (width, d) = (attn.width(), attn.head_dim());
        for head in (0..heads).filter(|h| !kept.contains(h)) {
            let w = m.params.tensor_mut(w_id)?;
            let cols = w.shape()[1];
            for r in head_rows(width, d, head) {
                w.data_mut()[r * cols..(r + 1) * cols].fill(0.0);
            }
            let b = m.params.tensor_mut(b_id)?;
            for r in head_rows(width, d, head) {
                b.data_mut()[r] = 0.0;
            }
            if let Some((k_id, kb_id)) = attn.dwc() {
                let kern = m.params.tensor_mut(k_id)?;
                let kk = kern.shape()[1];
                kern.data_mut()[head * d * kk..(head + 1) * d * kk].fill(0.0);
                m.params.tensor_mut(kb_id)?.data_mut()[head * d..(head + 1) * d].fill(0.0);
            }
        }
    }
    m.config.keep_heads = Some(k);
    Ok(m)
}
