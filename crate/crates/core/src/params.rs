//! Named parameter storage and binding onto a tape.

use std::collections::HashMap;
use std::ops::Index;

use serde::{Deserialize, Serialize};

use crate::compress::QuantizedTensor;
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Role of a parameter; decides what weight-only quantization touches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    /// `[out, in]` matrix of a linear layer.
    Linear,
    Bias,
    Embedding,
    /// Patch-embedding or depthwise convolution kernel.
    Conv,
    /// Fixed, never trained (positional table).
    Buffer,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ParamValue {
    F32(Tensor),
    Int8(QuantizedTensor),
}

impl ParamValue {
    pub fn shape(&self) -> &[usize] {
        match self {
            Self::F32(t) => t.shape(),
            Self::Int8(q) => q.shape(),
        }
    }

    pub fn numel(&self) -> usize {
        self.shape().iter().product()
    }

    /// Float view, dequantizing int8 storage.
    pub fn to_tensor(&self) -> Tensor {
        match self {
            Self::F32(t) => t.clone(),
            Self::Int8(q) => q.dequantize(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub trainable: bool,
    pub value: ParamValue,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
    frozen: bool,
}

/// Tape handles for every parameter of a store, indexable by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Index<ParamId> for Bound {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

impl Bound {
    /// Route a parameter through a different tape value (used by gradient checks).
    pub fn set(&mut self, id: ParamId, var: Var) {
        self.vars[id.0] = var;
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Per-parameter gradients after a backward pass (`None` where none arrived).
    pub fn grads(&self, tape: &Tape<'_>) -> Vec<Option<Tensor>> {
        self.vars.iter().map(|&v| tape.grad(v).cloned()).collect()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, mut value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        value.round_to_f32();
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        let trainable = kind != ParamKind::Buffer;
        self.params.push(Param { name, kind, trainable, value: ParamValue::F32(value) });
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &ParamValue {
        &self.params[id.0].value
    }

    /// Float tensor of a parameter; errors on int8 storage.
    pub fn tensor(&self, id: ParamId) -> Result<&Tensor> {
        match &self.params[id.0].value {
            ParamValue::F32(t) => Ok(t),
            ParamValue::Int8(_) => Err(Error::Contract(format!(
                "parameter {} is int8-quantized",
                self.params[id.0].name
            ))),
        }
    }

    pub fn tensor_mut(&mut self, id: ParamId) -> Result<&mut Tensor> {
        let name = self.params[id.0].name.clone();
        match &mut self.params[id.0].value {
            ParamValue::F32(t) => Ok(t),
            ParamValue::Int8(_) => Err(Error::Contract(format!("parameter {name} is int8-quantized"))),
        }
    }

    pub fn set_value(&mut self, id: ParamId, value: ParamValue) -> Result<()> {
        if value.shape() != self.params[id.0].value.shape() {
            return Err(Error::Shape(format!(
                "replacing {} {:?} with {:?}",
                self.params[id.0].name,
                self.params[id.0].value.shape(),
                value.shape()
            )));
        }
        self.params[id.0].value = value;
        Ok(())
    }

    /// Total scalar count, frozen buffers included.
    pub fn num_params(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Mark the whole store as read-only for training; binding it with
    /// gradients becomes a contract violation.
    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    pub fn is_quantized(&self) -> bool {
        self.params.iter().any(|p| matches!(p.value, ParamValue::Int8(_)))
    }

    /// Put every parameter on `tape`. Float weights are borrowed; int8
    /// weights are dequantized into constants.
    pub fn bind<'a>(&'a self, tape: &mut Tape<'a>, with_grad: bool) -> Result<Bound> {
        if with_grad && self.frozen {
            return Err(Error::Contract("gradients requested from a frozen model".into()));
        }
        let mut vars = Vec::with_capacity(self.params.len());
        for p in &self.params {
            let v = match &p.value {
                ParamValue::F32(t) => tape.param(t, with_grad && p.trainable),
                ParamValue::Int8(q) => {
                    if with_grad && p.trainable {
                        return Err(Error::Contract(format!(
                            "cannot train int8-quantized parameter {}",
                            p.name
                        )));
                    }
                    tape.constant(q.dequantize())
                }
            };
            vars.push(v);
        }
        Ok(Bound { vars })
    }

    /// Like [`bind`](Self::bind) but copies every value onto the tape, so the
    /// tape may outlive the store.
    pub fn bind_cloned(&self, tape: &mut Tape<'_>, with_grad: bool) -> Result<Bound> {
        if with_grad && self.frozen {
            return Err(Error::Contract("gradients requested from a frozen model".into()));
        }
        let mut vars = Vec::with_capacity(self.params.len());
        for p in &self.params {
            let v = match &p.value {
                ParamValue::F32(t) => tape.leaf(t.clone(), with_grad && p.trainable),
                ParamValue::Int8(q) => {
                    if with_grad && p.trainable {
                        return Err(Error::Contract(format!(
                            "cannot train int8-quantized parameter {}",
                            p.name
                        )));
                    }
                    tape.constant(q.dequantize())
                }
            };
            vars.push(v);
        }
        Ok(Bound { vars })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frozen_store_refuses_gradients() {
        let mut s = ParamStore::new();
        s.add("w", ParamKind::Linear, Tensor::ones([2, 2]));
        s.freeze();
        let mut tape = Tape::new();
        assert!(matches!(s.bind(&mut tape, true), Err(Error::Contract(_))));
        let mut tape = Tape::new();
        assert!(s.bind(&mut tape, false).is_ok());
    }

    #[test]
    fn values_snap_to_f32() {
        let mut s = ParamStore::new();
        let id = s.add("w", ParamKind::Linear, Tensor::from_vec(vec![0.1]));
        assert_eq!(s.tensor(id).unwrap().data()[0], 0.1f32 as f64);
    }

    #[test]
    fn buffers_never_require_grad() {
        let mut s = ParamStore::new();
        let pos = s.add("pos", ParamKind::Buffer, Tensor::ones([3]));
        let w = s.add("w", ParamKind::Linear, Tensor::ones([3]));
        let mut tape = Tape::new();
        let b = s.bind(&mut tape, true).unwrap();
        assert!(!tape.requires_grad(b[pos]));
        assert!(tape.requires_grad(b[w]));
        assert_eq!(s.num_params(), 6);
    }
}
