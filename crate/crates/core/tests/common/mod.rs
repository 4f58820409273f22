//! Straight-line reference implementations and finite-difference checks
//! shared by the integration tests. Everything here works on plain `f64`
//! vectors so it shares no code path with the tensor implementation.

#![allow(dead_code)]

use candle_core::{DType, Device, Tensor, Var};
use clear_core::nn::{LayerNorm, Linear, ParamStore};
use clear_core::schema::AttributeVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub mod cases;
pub mod layers;

pub const LN_EPS: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_vec(r: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| r.random_range(-scale..scale)).collect()
}

pub fn random_tensor(r: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(random_vec(r, n, scale), shape, &Device::Cpu).unwrap()
}

pub fn random_bits(r: &mut ChaCha8Rng, n: usize) -> AttributeVector {
    AttributeVector::new((0..n).map(|_| r.random_range(0..2u8)).collect()).unwrap()
}

pub fn flat(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_dtype(DType::F64).unwrap().to_vec1::<f64>().unwrap()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Row-major dense matrix.
#[derive(Clone, Debug)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols);
        Mat { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn from_var(v: &Var) -> Self {
        let dims = v.dims();
        let (r, c) = (dims[0], dims[1..].iter().product());
        Mat::new(r, c, flat(v.as_tensor()))
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn matmul(&self, o: &Mat) -> Mat {
        assert_eq!(self.cols, o.rows);
        let mut out = Mat::zeros(self.rows, o.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.at(i, k);
                for j in 0..o.cols {
                    out.data[i * o.cols + j] += a * o.at(k, j);
                }
            }
        }
        out
    }

    pub fn transpose(&self) -> Mat {
        let mut out = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.at(i, j);
            }
        }
        out
    }

    pub fn add(&self, o: &Mat) -> Mat {
        assert_eq!((self.rows, self.cols), (o.rows, o.cols));
        Mat::new(self.rows, self.cols, self.data.iter().zip(&o.data).map(|(a, b)| a + b).collect())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat::new(self.rows, self.cols, self.data.iter().map(|&x| f(x)).collect())
    }

    pub fn select_rows(&self, idx: &[usize]) -> Mat {
        Mat::new(idx.len(), self.cols, idx.iter().flat_map(|&i| self.row(i).to_vec()).collect())
    }

    pub fn cols_range(&self, start: usize, len: usize) -> Mat {
        Mat::new(
            self.rows,
            len,
            (0..self.rows).flat_map(|i| self.row(i)[start..start + len].to_vec()).collect(),
        )
    }
}

pub fn linear(x: &Mat, l: &Linear) -> Mat {
    let mut y = x.matmul(&Mat::from_var(&l.weight));
    if let Some(b) = &l.bias {
        let b = flat(b.as_tensor());
        for i in 0..y.rows {
            for j in 0..y.cols {
                y.data[i * y.cols + j] += b[j];
            }
        }
    }
    y
}

pub fn layer_norm(x: &Mat, ln: &LayerNorm) -> Mat {
    let (g, b) = (flat(ln.scale.as_tensor()), flat(ln.shift.as_tensor()));
    let mut out = Mat::zeros(x.rows, x.cols);
    for i in 0..x.rows {
        let r = x.row(i);
        let n = r.len() as f64;
        let mean = r.iter().sum::<f64>() / n;
        let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        for j in 0..x.cols {
            out.data[i * x.cols + j] = (r[j] - mean) / (var + LN_EPS).sqrt() * g[j] + b[j];
        }
    }
    out
}

/// Tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

pub fn softmax_rows(m: &Mat) -> Mat {
    Mat::new(m.rows, m.cols, (0..m.rows).flat_map(|i| softmax(m.row(i))).collect())
}

/// Multi-head attention of query rows `q` over key/value rows, with an
/// optional predicate restricting which keys each query sees.
pub fn mha(q: &Mat, k: &Mat, v: &Mat, heads: usize, allowed: &dyn Fn(usize, usize) -> bool) -> Mat {
    let c = q.cols;
    let d = c / heads;
    let mut out = Mat::zeros(q.rows, c);
    for h in 0..heads {
        for i in 0..q.rows {
            let keys: Vec<usize> = (0..k.rows).filter(|&j| allowed(i, j)).collect();
            let scores: Vec<f64> = keys
                .iter()
                .map(|&j| (0..d).map(|t| q.at(i, h * d + t) * k.at(j, h * d + t)).sum::<f64>() / (d as f64).sqrt())
                .collect();
            let w = softmax(&scores);
            for t in 0..d {
                out.data[i * c + h * d + t] = keys.iter().zip(&w).map(|(&j, a)| a * v.at(j, h * d + t)).sum();
            }
        }
    }
    out
}

pub fn mlp(x: &Mat, m: &clear_core::nn::Mlp) -> Mat {
    linear(&linear(x, &m.fc1).map(gelu), &m.fc2)
}

/// Central-difference gradient check of `loss` with respect to sampled
/// entries of every variable. Returns the worst relative error, where the
/// error is `|analytic - numeric| / max(|analytic|, |numeric|, floor)`.
pub fn grad_check(
    vars: &[(String, Var)],
    loss: &dyn Fn() -> Tensor,
    samples_per_var: usize,
    step: f64,
    floor: f64,
    seed: u64,
) -> (f64, String) {
    let l = loss();
    let grads = l.backward().unwrap();
    let mut r = rng(seed);
    let mut worst = (0.0f64, String::new());
    for (name, var) in vars {
        let base = flat(var.as_tensor());
        let analytic = grads.get(var.as_tensor()).map(flat).unwrap_or_else(|| vec![0.0; base.len()]);
        let dims = var.dims().to_vec();
        let picks: Vec<usize> = if base.len() <= samples_per_var {
            (0..base.len()).collect()
        } else {
            (0..samples_per_var).map(|_| r.random_range(0..base.len())).collect()
        };
        for i in picks {
            let eval = |delta: f64| {
                let mut p = base.clone();
                p[i] += delta;
                var.set(&Tensor::from_vec(p, dims.as_slice(), &Device::Cpu).unwrap()).unwrap();
                loss().to_scalar::<f64>().unwrap()
            };
            let numeric = (eval(step) - eval(-step)) / (2.0 * step);
            let a = analytic[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            if rel > worst.0 {
                worst = (rel, format!("{name}[{i}]: analytic {a:e}, numeric {numeric:e}"));
            }
        }
        var.set(&Tensor::from_vec(base, dims.as_slice(), &Device::Cpu).unwrap()).unwrap();
    }
    worst
}

/// All parameters of a store as (name, var) pairs.
pub fn store_vars(store: &ParamStore) -> Vec<(String, Var)> {
    store.vars().iter().map(|(k, v)| (k.clone(), v.clone())).collect()
}

/// Brute-force label-based mean accuracy.
pub fn oracle_ma(preds: &[AttributeVector], labels: &[AttributeVector]) -> f64 {
    let n_attr = labels[0].len();
    let mut total = 0.0;
    for i in 0..n_attr {
        let pos: Vec<usize> = (0..labels.len()).filter(|&j| labels[j].get(i)).collect();
        let neg: Vec<usize> = (0..labels.len()).filter(|&j| !labels[j].get(i)).collect();
        let tpr = if pos.is_empty() {
            1.0
        } else {
            pos.iter().filter(|&&j| preds[j].get(i)).count() as f64 / pos.len() as f64
        };
        let tnr = if neg.is_empty() {
            1.0
        } else {
            neg.iter().filter(|&&j| !preds[j].get(i)).count() as f64 / neg.len() as f64
        };
        total += (tpr + tnr) / 2.0;
    }
    total / n_attr as f64
}

/// Brute-force example-based F1 via explicit index sets.
pub fn oracle_f1(preds: &[AttributeVector], labels: &[AttributeVector]) -> f64 {
    use std::collections::BTreeSet;
    let set = |v: &AttributeVector| -> BTreeSet<usize> { (0..v.len()).filter(|&i| v.get(i)).collect() };
    let (mut p, mut r) = (0.0, 0.0);
    for (a, y) in preds.iter().zip(labels) {
        let (sa, sy) = (set(a), set(y));
        let inter = sa.intersection(&sy).count() as f64;
        p += if sa.is_empty() { f64::from(u8::from(sy.is_empty())) } else { inter / sa.len() as f64 };
        r += if sy.is_empty() { f64::from(u8::from(sa.is_empty())) } else { inter / sy.len() as f64 };
    }
    let n = preds.len() as f64;
    let (p, r) = (p / n, r / n);
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Brute-force AP: precision at each relevant rank, averaged.
pub fn oracle_ap(rel: &[bool]) -> Option<f64> {
    let total = rel.iter().filter(|x| **x).count();
    if total == 0 {
        return None;
    }
    let mut s = 0.0;
    for k in 0..rel.len() {
        if rel[k] {
            let prec = rel[..=k].iter().filter(|x| **x).count() as f64 / (k + 1) as f64;
            s += prec;
        }
    }
    Some(s / total as f64)
}
