//! Named parameter storage and the small layer vocabulary the models share.

use std::collections::BTreeMap;

use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Gradients, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named trainable tensors with accumulated gradients.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Tensor>,
    grads: Vec<Tensor>,
    index: BTreeMap<String, usize>,
}

/// Tape handles for every entry of a [`ParamSet`], in registration order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn get(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid("param", format!("duplicate name `{name}`")));
        }
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.grads.push(Tensor::zeros(value.shape()));
        self.values.push(value);
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Registers every entry on `tape`; `trainable = false` binds them as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self.values.iter().map(|v| tape.leaf(v.clone(), trainable)).collect();
        Bound { vars }
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.data_mut().fill(0.0);
        }
    }

    /// `grad += scale · ∂loss/∂param` for every bound entry.
    pub fn accumulate(&mut self, bound: &Bound, grads: &Gradients, scale: f64) {
        for (acc, &v) in self.grads.iter_mut().zip(&bound.vars) {
            if let Some(g) = grads.get(v) {
                acc.data_mut().iter_mut().zip(g).for_each(|(a, b)| *a += scale * b);
            }
        }
    }

    pub fn flat_values(&self) -> Vec<f64> {
        self.values.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn flat_grads(&self) -> Vec<f64> {
        self.grads.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn set_flat_values(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(Error::shape("set_flat_values", &[flat.len()], &[self.num_scalars()]));
        }
        let mut off = 0;
        for t in &mut self.values {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// Overwrites the value named `name`; shape must match.
    pub fn assign(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self.id(name).ok_or_else(|| Error::UnknownParam(name.to_string()))?;
        let cur = &self.values[id.0];
        if cur.shape() != value.shape() {
            return Err(Error::shape("assign", cur.shape(), value.shape()));
        }
        self.values[id.0] = value;
        Ok(())
    }

    /// First entry whose value or gradient is non-finite.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.names
            .iter()
            .zip(self.values.iter().zip(&self.grads))
            .find(|(_, (v, g))| !v.is_finite() || !g.is_finite())
            .map(|(n, _)| n.as_str())
    }
}

/// Weight initialization schemes.
#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// N(0, gain²·2/fan_in).
    He(f64),
    /// N(0, 1/fan_in).
    Lecun,
    Zeros,
    Constant(f64),
}

pub fn init_tensor(shape: &[usize], fan_in: usize, init: Init, rng: &mut Rng) -> Tensor {
    let std = match init {
        Init::He(gain) => gain * (2.0 / fan_in as f64).sqrt(),
        Init::Lecun => (1.0 / fan_in as f64).sqrt(),
        Init::Zeros => return Tensor::zeros(shape),
        Init::Constant(c) => return Tensor::full(shape, c),
    };
    let normal = Normal::new(0.0, std).expect("finite std");
    Tensor::from_fn(shape, |_| normal.sample(rng))
}

/// 2-D convolution layer.
#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        init: Init,
        rng: &mut Rng,
    ) -> Result<Self> {
        let w = ps.add(format!("{name}.weight"), init_tensor(&[cout, cin, k, k], cin * k * k, init, rng))?;
        let b = ps.add(format!("{name}.bias"), Tensor::zeros(&[cout]))?;
        Ok(Conv { w, b: Some(b), stride, pad: k / 2 })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.conv2d(x, p.get(self.w), self.b.map(|b| p.get(b)), self.stride, self.pad)
    }
}

/// Transposed 2×2 stride-2 convolution (learned 2× upsampling).
#[derive(Clone, Debug)]
pub struct UpConv {
    pub w: ParamId,
    pub b: ParamId,
}

impl UpConv {
    pub fn new(ps: &mut ParamSet, name: &str, cin: usize, cout: usize, rng: &mut Rng) -> Result<Self> {
        let w = ps.add(format!("{name}.weight"), init_tensor(&[cin, cout, 2, 2], cin, Init::He(1.0), rng))?;
        let b = ps.add(format!("{name}.bias"), Tensor::zeros(&[cout]))?;
        Ok(UpConv { w, b })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.conv_transpose2d(x, p.get(self.w), Some(p.get(self.b)), 2, 0)
    }
}

/// Dense layer on `[N, in]` rows.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        din: usize,
        dout: usize,
        bias: bool,
        init: Init,
        rng: &mut Rng,
    ) -> Result<Self> {
        let w = ps.add(format!("{name}.weight"), init_tensor(&[din, dout], din, init, rng))?;
        let b = if bias { Some(ps.add(format!("{name}.bias"), Tensor::zeros(&[dout]))?) } else { None };
        Ok(Linear { w, b })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, p.get(self.w))?;
        match self.b {
            Some(b) => tape.add_row(y, p.get(b)),
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamSet, name: &str, d: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: ps.add(format!("{name}.gamma"), Tensor::full(&[d], 1.0))?,
            beta: ps.add(format!("{name}.beta"), Tensor::zeros(&[d]))?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, p.get(self.gamma), p.get(self.beta), 1e-5)
    }
}

/// `[C, H, W]` → `[H·W, C]` tokens.
pub fn to_tokens(tape: &mut Tape, x: Var) -> Result<Var> {
    let (c, h, w) = tape.value(x).chw()?;
    let flat = tape.reshape(x, &[c, h * w])?;
    tape.transpose(flat)
}

/// `[H·W, C]` tokens → `[C, H, W]`.
pub fn from_tokens(tape: &mut Tape, t: Var, h: usize, w: usize) -> Result<Var> {
    let c = tape.shape(t)[1];
    let tr = tape.transpose(t)?;
    tape.reshape(tr, &[c, h, w])
}

/// Single-head scaled dot-product attention on token matrices.
/// Returns `(output [Nq, dv], attention [Nq, Nk])`.
pub fn attention(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let dk = tape.shape(q)[1];
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scaled = tape.mul_scalar(scores, 1.0 / (dk as f64).sqrt());
    let a = tape.softmax(scaled, 1)?;
    let out = tape.matmul(a, v)?;
    Ok((out, a))
}
