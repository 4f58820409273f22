//! Swin stages: (shifted) window attention layers followed by patch merging.

use candle_core::{Device, Tensor};

use super::config::MLP_RATIO;
use super::patch::TokenGrid;
use crate::error::Result;
use crate::nn::{attention, AttentionTrace, LayerNorm, Linear, Mlp, ParamStore};

/// Additive logit for key positions a query may not attend to.
pub const MASKED: f64 = -1e9;

/// Geometry of one window-attention layer on an h×w grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowGeometry {
    pub h: usize,
    pub w: usize,
    pub window: usize,
    pub shift: usize,
}

impl WindowGeometry {
    pub fn padded(&self) -> (usize, usize) {
        let ws = self.window;
        (self.h.div_ceil(ws) * ws, self.w.div_ceil(ws) * ws)
    }

    pub fn n_windows(&self) -> usize {
        let (hp, wp) = self.padded();
        (hp / self.window) * (wp / self.window)
    }

    /// Per-window additive masks (n_windows, ws², ws²), or `None` when every
    /// token may attend to every other token in its window. Keys are masked
    /// when they are padding or, under a cyclic shift, come from a different
    /// pre-shift region than the query.
    pub fn mask(&self) -> Option<Vec<f64>> {
        let (hp, wp) = self.padded();
        if self.shift == 0 && (hp, wp) == (self.h, self.w) {
            return None;
        }
        let (ws, s) = (self.window, self.shift);
        // Region label along one axis, in the shifted frame.
        let band = |x: usize, n: usize| -> usize {
            if s == 0 || x < n - ws {
                0
            } else if x < n - s {
                1
            } else {
                2
            }
        };
        let (nwh, nww) = (hp / ws, wp / ws);
        let t = ws * ws;
        let mut out = vec![0.0; nwh * nww * t * t];
        for wy in 0..nwh {
            for wx in 0..nww {
                let win = wy * nww + wx;
                let cell = |i: usize| {
                    let y = wy * ws + i / ws;
                    let x = wx * ws + i % ws;
                    let label = band(y, hp) * 3 + band(x, wp);
                    let valid = (y + s) % hp < self.h && (x + s) % wp < self.w;
                    (label, valid)
                };
                for i in 0..t {
                    let (li, _) = cell(i);
                    for j in 0..t {
                        let (lj, vj) = cell(j);
                        if li != lj || !vj {
                            out[(win * t + i) * t + j] = MASKED;
                        }
                    }
                }
            }
        }
        Some(out)
    }
}

/// Pre-norm (shifted) window attention plus MLP, both residual.
#[derive(Clone)]
pub struct SwinLayer {
    pub geometry: WindowGeometry,
    pub heads: usize,
    pub norm1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    mask: Option<Tensor>,
}

impl SwinLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        heads: usize,
        geometry: WindowGeometry,
    ) -> Result<Self> {
        let t = geometry.window * geometry.window;
        let mask = match geometry.mask() {
            Some(m) => Some(
                Tensor::from_vec(m, (geometry.n_windows(), t, t), &Device::Cpu)?.to_dtype(store.dtype())?,
            ),
            None => None,
        };
        Ok(SwinLayer {
            geometry,
            heads,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim)?,
            qkv: Linear::new(store, &format!("{name}.qkv"), dim, 3 * dim, true)?,
            proj: Linear::new(store, &format!("{name}.proj"), dim, dim, true)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), dim, MLP_RATIO * dim)?,
            mask,
        })
    }

    pub fn forward(&self, x: &Tensor, trace: &mut Option<&mut AttentionTrace>) -> Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        let WindowGeometry { window: ws, shift, .. } = self.geometry;
        let (hp, wp) = self.geometry.padded();
        let (nwh, nww) = (hp / ws, wp / ws);

        let mut y = self.norm1.forward(x)?;
        if hp > h {
            y = y.pad_with_zeros(1, 0, hp - h)?;
        }
        if wp > w {
            y = y.pad_with_zeros(2, 0, wp - w)?;
        }
        if shift > 0 {
            y = y.roll(-(shift as i32), 1)?.roll(-(shift as i32), 2)?;
        }
        let windows = y
            .reshape((b, nwh, ws, nww, ws, c))?
            .permute((0, 1, 3, 2, 4, 5))?
            .contiguous()?
            .reshape((b * nwh * nww, ws * ws, c))?;
        let qkv = self.qkv.forward(&windows)?;
        let q = qkv.narrow(2, 0, c)?;
        let k = qkv.narrow(2, c, c)?;
        let v = qkv.narrow(2, 2 * c, c)?;
        let (att, weights) = attention(&q, &k, &v, self.heads, self.mask.as_ref())?;
        AttentionTrace::record(trace, "swin", &weights);
        let mut y = self
            .proj
            .forward(&att)?
            .reshape((b, nwh, nww, ws, ws, c))?
            .permute((0, 1, 3, 2, 4, 5))?
            .contiguous()?
            .reshape((b, hp, wp, c))?;
        if shift > 0 {
            y = y.roll(shift as i32, 1)?.roll(shift as i32, 2)?;
        }
        if hp > h || wp > w {
            y = y.narrow(1, 0, h)?.narrow(2, 0, w)?;
        }
        let x = (x + y)?;
        Ok((&x + self.mlp.forward(&self.norm2.forward(&x)?)?)?)
    }
}

/// 2×2 neighbourhood concatenation, normalization and linear reduction.
#[derive(Clone)]
pub struct PatchMerging {
    pub norm: LayerNorm,
    pub reduction: Linear,
}

impl PatchMerging {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, out: usize) -> Result<Self> {
        Ok(PatchMerging {
            norm: LayerNorm::new(store, &format!("{name}.norm"), 4 * dim)?,
            reduction: Linear::new(store, &format!("{name}.reduction"), 4 * dim, out, false)?,
        })
    }

    /// (B, h, w, C) → (B, h/2, w/2, out). The four neighbours are concatenated
    /// in the order (0,0), (1,0), (0,1), (1,1) as (row offset, column offset).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w, c) = x.dims4()?;
        let merged = x
            .reshape((b, h / 2, 2, w / 2, 2, c))?
            .permute((0, 1, 3, 4, 2, 5))?
            .contiguous()?
            .reshape((b, h / 2, w / 2, 4 * c))?;
        self.reduction.forward(&self.norm.forward(&merged)?)
    }
}

#[derive(Clone)]
pub struct SwinStage {
    pub layers: Vec<SwinLayer>,
    pub merge: Option<PatchMerging>,
}

impl SwinStage {
    pub fn forward(&self, grid: &TokenGrid, trace: &mut Option<&mut AttentionTrace>) -> Result<TokenGrid> {
        let mut x = grid.0.clone();
        for layer in &self.layers {
            x = layer.forward(&x, trace)?;
        }
        if let Some(m) = &self.merge {
            x = m.forward(&x)?;
        }
        Ok(TokenGrid(x))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unshifted_unpadded_has_no_mask() {
        let g = WindowGeometry { h: 4, w: 4, window: 2, shift: 0 };
        assert!(g.mask().is_none());
        assert_eq!(g.n_windows(), 4);
    }

    #[test]
    fn shifted_mask_blocks_cross_region_pairs() {
        let g = WindowGeometry { h: 4, w: 4, window: 2, shift: 1 };
        let m = g.mask().unwrap();
        // Window 0 of the shifted frame sits entirely inside region (0, 0).
        assert!(m[..16].iter().all(|&v| v == 0.0));
        // The last window straddles both wrap boundaries: four singleton regions.
        let last = &m[3 * 16..];
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(last[i * 4 + j] == 0.0, i == j);
            }
        }
    }

    #[test]
    fn padding_masks_padded_keys() {
        let g = WindowGeometry { h: 3, w: 2, window: 2, shift: 0 };
        assert_eq!(g.padded(), (4, 2));
        let m = g.mask().unwrap();
        // Second window covers rows 2..4; row 3 is padding.
        let w1 = &m[16..32];
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(w1[i * 4 + j] == 0.0, j < 2);
            }
        }
    }
}
