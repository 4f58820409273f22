//! Parameter storage and the small set of layers the models are built from.

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{ClearError, Result};

pub const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
pub enum Init {
    TruncNormal(f64),
    Zeros,
    Ones,
}

/// Named, ordered collection of trainable tensors.
///
/// Parameters are created in construction order from a seeded generator, so
/// the same config and seed always produce bit-identical weights.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        ParamStore {
            vars: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn get(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Var> {
        if self.vars.contains_key(name) {
            return Err(ClearError::Config(format!("parameter {name} created twice")));
        }
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::TruncNormal(std) => (0..n)
                .map(|_| loop {
                    let z: f64 = self.rng.sample(StandardNormal);
                    if z.abs() <= 2.0 {
                        break z * std;
                    }
                })
                .collect(),
        };
        let t = Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        self.vars.insert(name.to_string(), var.clone());
        Ok(var)
    }

    pub fn vars(&self) -> &BTreeMap<String, Var> {
        &self.vars
    }

    pub fn var(&self, name: &str) -> Result<&Var> {
        self.vars
            .get(name)
            .ok_or_else(|| ClearError::Config(format!("no parameter named {name}")))
    }

    /// Overwrites a parameter in place; the shape must match.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self.var(name)?;
        if var.dims() != value.dims() {
            return Err(ClearError::DimMismatch(format!(
                "{name}: expected {:?}, got {:?}",
                var.dims(),
                value.dims()
            )));
        }
        var.set(&value.to_dtype(self.dtype)?)?;
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// SHA-256 over names, shapes and little-endian f32 values, in name order.
    pub fn content_hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, var) in &self.vars {
            h.update(name.as_bytes());
            for d in var.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            let values = var.as_tensor().flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?;
            for v in values {
                h.update(v.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }
}

/// Dense layer computing `x · W + b` with `W` stored as (in, out).
#[derive(Clone)]
pub struct Linear {
    pub weight: Var,
    pub bias: Option<Var>,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, input: usize, output: usize, bias: bool) -> Result<Self> {
        let weight = store.get(&format!("{name}.weight"), &[input, output], Init::TruncNormal(INIT_STD))?;
        let bias = if bias {
            Some(store.get(&format!("{name}.bias"), &[output], Init::Zeros)?)
        } else {
            None
        };
        Ok(Linear { weight, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let input = *dims.last().ok_or_else(|| ClearError::DimMismatch("scalar input".into()))?;
        if input != self.in_dim() {
            return Err(ClearError::DimMismatch(format!(
                "linear layer expects {} inputs, got {input}",
                self.in_dim()
            )));
        }
        let rows = x.elem_count() / input;
        let mut y = x.reshape((rows, input))?.matmul(self.weight.as_tensor())?;
        if let Some(b) = &self.bias {
            y = y.broadcast_add(b.as_tensor())?;
        }
        let mut out_dims = dims;
        *out_dims.last_mut().expect("non-empty") = self.out_dim();
        Ok(y.reshape(out_dims)?)
    }
}

/// Layer normalization over the last axis with learned scale and shift.
#[derive(Clone)]
pub struct LayerNorm {
    pub scale: Var,
    pub shift: Var,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm {
            scale: store.get(&format!("{name}.scale"), &[dim], Init::Ones)?,
            shift: store.get(&format!("{name}.shift"), &[dim], Init::Zeros)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        layer_norm(x, self.scale.as_tensor(), self.shift.as_tensor())
    }
}

pub fn layer_norm(x: &Tensor, scale: &Tensor, shift: &Tensor) -> Result<Tensor> {
    let mean = x.mean_keepdim(D::Minus1)?;
    let centered = x.broadcast_sub(&mean)?;
    let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
    let normed = centered.broadcast_div(&(var + LN_EPS)?.sqrt()?)?;
    Ok(normed.broadcast_mul(scale)?.broadcast_add(shift)?)
}

/// Numerically stable softmax over the last axis.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// Numerically stable log-softmax over the last axis.
pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Two-layer feed-forward block with GELU.
#[derive(Clone)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Mlp {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden, true)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim, true)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&self.fc1.forward(x)?.gelu()?)
    }
}

/// Scaled dot-product attention split over `heads`.
///
/// `q` is (N, Tq, C), `k` and `v` are (N, Tk, C). An optional additive `mask`
/// of shape (G, Tq, Tk) is applied to sample `n` as `mask[n % G]`. Returns the
/// attended values (N, Tq, C) and the attention weights (N, heads, Tq, Tk).
pub fn attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    heads: usize,
    mask: Option<&Tensor>,
) -> Result<(Tensor, Tensor)> {
    let (n, tq, c) = q.dims3()?;
    let (_, tk, _) = k.dims3()?;
    if heads == 0 || c % heads != 0 {
        return Err(ClearError::Config(format!("dim {c} not divisible into {heads} heads")));
    }
    let d = c / heads;
    let split = |t: &Tensor, len: usize| -> Result<Tensor> {
        Ok(t.reshape((n, len, heads, d))?.transpose(1, 2)?.contiguous()?)
    };
    let (qh, kh, vh) = (split(q, tq)?, split(k, tk)?, split(v, tk)?);
    let mut scores = (qh.matmul(&kh.t()?.contiguous()?)? * (1.0 / (d as f64).sqrt()))?;
    if let Some(mask) = mask {
        let g = mask.dim(0)?;
        if n % g != 0 {
            return Err(ClearError::DimMismatch(format!("{n} samples do not tile {g} mask groups")));
        }
        scores = scores
            .reshape((n / g, g, heads, tq, tk))?
            .broadcast_add(&mask.reshape((1, g, 1, tq, tk))?)?
            .reshape((n, heads, tq, tk))?;
    }
    let weights = softmax_last(&scores)?;
    let out = weights.matmul(&vh)?.transpose(1, 2)?.reshape((n, tq, c))?;
    Ok((out, weights))
}

/// Collects attention weight tensors by site name during a forward pass.
#[derive(Default)]
pub struct AttentionTrace {
    pub entries: Vec<(String, Tensor)>,
}

impl AttentionTrace {
    pub fn record(trace: &mut Option<&mut AttentionTrace>, site: &str, weights: &Tensor) {
        if let Some(t) = trace.as_deref_mut() {
            t.entries.push((site.to_string(), weights.detach()));
        }
    }
}

pub fn tensor_from_f32(data: &[f32], shape: &[usize], dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_slice(data, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_weights() {
        let mut a = ParamStore::new(DType::F32, 9);
        let mut b = ParamStore::new(DType::F32, 9);
        Linear::new(&mut a, "l", 4, 3, true).unwrap();
        Linear::new(&mut b, "l", 4, 3, true).unwrap();
        assert_eq!(a.content_hash().unwrap(), b.content_hash().unwrap());
        let w = a.var("l.weight").unwrap().to_vec2::<f32>().unwrap();
        assert!(w.iter().flatten().all(|x| x.abs() <= 0.04 + 1e-7));
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0], [-5.0, 0.0, 50.0]], &Device::Cpu).unwrap();
        let s = softmax_last(&x).unwrap();
        for row in s.to_vec2::<f64>().unwrap() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let a = log_softmax_last(&x).unwrap().to_vec2::<f64>().unwrap();
        let b = log_softmax_last(&(x + 123.0).unwrap()).unwrap().to_vec2::<f64>().unwrap();
        for (ra, rb) in a.iter().zip(&b) {
            for (u, v) in ra.iter().zip(rb) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_standardizes() {
        let x = Tensor::new(&[[1.0f64, 2.0, 3.0, 4.0]], &Device::Cpu).unwrap();
        let one = Tensor::ones(4, DType::F64, &Device::Cpu).unwrap();
        let zero = Tensor::zeros(4, DType::F64, &Device::Cpu).unwrap();
        let y = layer_norm(&x, &one, &zero).unwrap().to_vec2::<f64>().unwrap();
        let mean: f64 = y[0].iter().sum::<f64>() / 4.0;
        let var: f64 = y[0].iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.25 / (1.25 + LN_EPS)).abs() < 1e-9);
    }

    #[test]
    fn linear_rejects_wrong_width() {
        let mut s = ParamStore::new(DType::F32, 0);
        let l = Linear::new(&mut s, "l", 4, 2, false).unwrap();
        let x = Tensor::zeros((2, 3), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(l.forward(&x), Err(ClearError::DimMismatch(_))));
    }
}
