//! Patch embeddings for both branches and the ViT input resize.

use candle_core::{DType, Device, Tensor, Var};

use crate::error::{ClearError, Result};
use crate::nn::{Init, Linear, ParamStore, INIT_STD};

/// Token grid of the Swin branch, stored channel-last as (B, h, w, C).
#[derive(Debug, Clone)]
pub struct TokenGrid(pub Tensor);

impl TokenGrid {
    pub fn dims(&self) -> Result<(usize, usize, usize, usize)> {
        Ok(self.0.dims4()?)
    }

    /// Wraps a single (C, h, w) grid as a batch of one.
    pub fn from_chw(t: &Tensor) -> Result<Self> {
        Ok(TokenGrid(t.permute((1, 2, 0))?.unsqueeze(0)?.contiguous()?))
    }

    /// Grid `index` of the batch as (C, h, w).
    pub fn to_chw(&self, index: usize) -> Result<Tensor> {
        Ok(self.0.get(index)?.permute((2, 0, 1))?.contiguous()?)
    }

    /// Groups the spatial axes into a token sequence (B, h·w, C).
    pub fn tokens(&self) -> Result<Tensor> {
        let (b, h, w, c) = self.dims()?;
        Ok(self.0.reshape((b, h * w, c))?)
    }
}

/// ViT token sequence (B, 1 + patches, D) with the CLS token first.
#[derive(Debug, Clone)]
pub struct TokenSequence(pub Tensor);

impl TokenSequence {
    pub fn cls(&self) -> Result<Tensor> {
        Ok(self.0.narrow(1, 0, 1)?.squeeze(1)?)
    }

    pub fn patches(&self) -> Result<Tensor> {
        let n = self.0.dim(1)?;
        Ok(self.0.narrow(1, 1, n - 1)?)
    }
}

/// Splits (B, 3, H, W) images into non-overlapping p×p patches, returning
/// (B, H/p, W/p, 3·p·p) with each patch flattened channel-major.
pub fn patchify(images: &Tensor, p: usize) -> Result<Tensor> {
    let (b, c, h, w) = images.dims4()?;
    if h % p != 0 || w % p != 0 {
        return Err(ClearError::Config(format!("image {h}x{w} is not divisible by patch {p}")));
    }
    let (gh, gw) = (h / p, w / p);
    Ok(images
        .reshape((b, c, gh, p, gw, p))?
        .permute((0, 2, 4, 1, 3, 5))?
        .contiguous()?
        .reshape((b, gh, gw, c * p * p))?)
}

/// Bilinear resize with half-pixel centers, (B, C, H, W) → (B, C, oh, ow).
/// Operates on values only; gradients do not flow through it.
pub fn resize_bilinear(images: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
    let (b, c, h, w) = images.dims4()?;
    if (h, w) == (oh, ow) {
        return Ok(images.clone());
    }
    let dtype = images.dtype();
    let src = images.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let coords = |out: usize, inp: usize| -> Vec<(usize, usize, f64)> {
        let scale = inp as f64 / out as f64;
        (0..out)
            .map(|o| {
                let x = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let x0 = (x.floor() as usize).min(inp - 1);
                let x1 = (x0 + 1).min(inp - 1);
                (x0, x1, x - x0 as f64)
            })
            .collect()
    };
    let ys = coords(oh, h);
    let xs = coords(ow, w);
    let mut out = Vec::with_capacity(b * c * oh * ow);
    for plane in src.chunks(h * w) {
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Ok(Tensor::from_vec(out, (b, c, oh, ow), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Linear patch projection of the Swin branch.
#[derive(Clone)]
pub struct SwinPatchEmbed {
    pub patch: usize,
    pub proj: Linear,
}

impl SwinPatchEmbed {
    pub fn new(store: &mut ParamStore, patch: usize, dim: usize) -> Result<Self> {
        Ok(SwinPatchEmbed {
            patch,
            proj: Linear::new(store, "swin.embed", 3 * patch * patch, dim, true)?,
        })
    }

    pub fn forward(&self, images: &Tensor) -> Result<TokenGrid> {
        Ok(TokenGrid(self.proj.forward(&patchify(images, self.patch)?)?))
    }
}

/// ViT patch projection with a learned CLS token and positional embeddings.
#[derive(Clone)]
pub struct VitPatchEmbed {
    pub patch: usize,
    pub input_hw: (usize, usize),
    pub proj: Linear,
    pub cls: Var,
    pub pos: Var,
}

impl VitPatchEmbed {
    pub fn new(
        store: &mut ParamStore,
        patch: usize,
        input_hw: (usize, usize),
        dim: usize,
    ) -> Result<Self> {
        let proj = Linear::new(store, "vit.embed", 3 * patch * patch, dim, true)?;
        let tokens = (input_hw.0 / patch) * (input_hw.1 / patch) + 1;
        let cls = store.get("vit.cls", &[1, 1, dim], Init::TruncNormal(INIT_STD))?;
        let pos = store.get("vit.pos", &[1, tokens, dim], Init::TruncNormal(INIT_STD))?;
        Ok(VitPatchEmbed { patch, input_hw, proj, cls, pos })
    }

    pub fn forward(&self, images: &Tensor) -> Result<TokenSequence> {
        let resized = resize_bilinear(images, self.input_hw.0, self.input_hw.1)?;
        let grid = self.proj.forward(&patchify(&resized, self.patch)?)?;
        let (b, gh, gw, d) = grid.dims4()?;
        let patches = grid.reshape((b, gh * gw, d))?;
        let cls = self.cls.as_tensor().broadcast_as((b, 1, d))?;
        let seq = Tensor::cat(&[&cls, &patches], 1)?.broadcast_add(self.pos.as_tensor())?;
        Ok(TokenSequence(seq))
    }
}
