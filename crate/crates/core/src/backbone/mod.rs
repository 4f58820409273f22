//! The two-branch cross-transformer backbone.
//!
//! The Swin branch runs channel-aware attention ahead of every stage; the
//! ViT branch is a plain stack of transformer blocks over a CLS-prefixed
//! patch sequence. The final Swin grid is flattened and projected into the
//! fusion space, then each branch summary attends over the other branch's
//! tokens. The two fused vectors get independent layer norms, are
//! concatenated, and a linear head produces one logit per attribute.

mod casa;
mod config;
mod fusion;
mod patch;
mod swin;
mod vit;

pub use casa::Casa;
pub use config::{BackboneConfig, MLP_RATIO};
pub use fusion::CrossFusion;
pub use patch::{patchify, resize_bilinear, SwinPatchEmbed, TokenGrid, TokenSequence, VitPatchEmbed};
pub use swin::{PatchMerging, SwinLayer, SwinStage, WindowGeometry, MASKED};
pub use vit::VitBlock;

use candle_core::{DType, Tensor};

use crate::error::{ClearError, Result};
use crate::nn::{AttentionTrace, LayerNorm, Linear, ParamStore};

/// Result of a forward pass; every field is batched along dim 0.
#[derive(Debug, Clone)]
pub struct BackboneOutput {
    pub m_s: Tensor,
    pub m_v: Tensor,
    /// Pre-logit feature `concat(m_s, m_v)`.
    pub feature: Tensor,
    pub logits: Tensor,
    pub probs: Tensor,
}

pub struct Backbone {
    cfg: BackboneConfig,
    store: ParamStore,
    pub swin_embed: SwinPatchEmbed,
    pub casa: Vec<Casa>,
    pub stages: Vec<SwinStage>,
    pub vit_embed: VitPatchEmbed,
    pub vit_blocks: Vec<VitBlock>,
    pub swin_fc: Linear,
    pub svcf: CrossFusion,
    pub vscf: CrossFusion,
    pub ln_s: LayerNorm,
    pub ln_v: LayerNorm,
    pub head: Linear,
}

impl Backbone {
    pub fn new(cfg: &BackboneConfig, dtype: DType, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(dtype, seed);
        let swin_embed = SwinPatchEmbed::new(&mut store, cfg.swin_patch, cfg.swin_dims[0])?;
        let mut casa = Vec::new();
        let mut stages = Vec::new();
        for s in 0..cfg.n_stages() {
            let (h, w) = cfg.stage_grid(s);
            casa.push(Casa::new(&mut store, &format!("casa{s}"), h * w, cfg.casa_value_path)?);
            let dim = cfg.swin_dims[s];
            let mut layers = Vec::new();
            for l in 0..cfg.swin_depths[s] {
                let (window, shift) = cfg.window_for(s, l);
                let geometry = WindowGeometry { h, w, window, shift };
                layers.push(SwinLayer::new(
                    &mut store,
                    &format!("swin{s}.layer{l}"),
                    dim,
                    cfg.stage_heads(s),
                    geometry,
                )?);
            }
            let merge = if s + 1 < cfg.n_stages() {
                Some(PatchMerging::new(&mut store, &format!("swin{s}.merge"), dim, cfg.swin_dims[s + 1])?)
            } else {
                None
            };
            stages.push(SwinStage { layers, merge });
        }
        let vit_embed = VitPatchEmbed::new(&mut store, cfg.vit_patch, cfg.vit_input_hw(), cfg.vit_dim)?;
        let vit_blocks = (0..cfg.vit_depth)
            .map(|b| VitBlock::new(&mut store, &format!("vit.block{b}"), cfg.vit_dim, cfg.vit_heads()))
            .collect::<Result<Vec<_>>>()?;
        let f = cfg.fusion_dim;
        let (fh, fw) = cfg.final_grid();
        let c_last = *cfg.swin_dims.last().expect("validated");
        let swin_fc = Linear::new(&mut store, "swin.fc", c_last * fh * fw, f, true)?;
        let svcf = CrossFusion::new(&mut store, "svcf", f, cfg.vit_dim, f, cfg.fusion_heads())?;
        let vscf = CrossFusion::new(&mut store, "vscf", cfg.vit_dim, c_last, f, cfg.fusion_heads())?;
        let ln_s = LayerNorm::new(&mut store, "ln_s", f)?;
        let ln_v = LayerNorm::new(&mut store, "ln_v", f)?;
        let head = Linear::new(&mut store, "head", 2 * f, cfg.n_attr, true)?;
        Ok(Backbone {
            cfg: cfg.clone(),
            store,
            swin_embed,
            casa,
            stages,
            vit_embed,
            vit_blocks,
            swin_fc,
            svcf,
            vscf,
            ln_s,
            ln_v,
            head,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    fn check_images(&self, images: &Tensor) -> Result<Tensor> {
        let dims = images.dims();
        let [h, w] = self.cfg.image_hw;
        if dims.len() != 4 || dims[1] != 3 || dims[2] != h || dims[3] != w {
            return Err(ClearError::DimMismatch(format!(
                "expected images (B, 3, {h}, {w}), got {dims:?}"
            )));
        }
        Ok(images.to_dtype(self.dtype())?)
    }

    pub fn patch_embed_swin(&self, images: &Tensor) -> Result<TokenGrid> {
        self.swin_embed.forward(&self.check_images(images)?)
    }

    pub fn patch_embed_vit(&self, images: &Tensor) -> Result<TokenSequence> {
        self.vit_embed.forward(&self.check_images(images)?)
    }

    pub fn casa(&self, stage: usize, grid: &TokenGrid) -> Result<TokenGrid> {
        self.casa[stage].forward(grid, &mut None)
    }

    pub fn swin_stage(&self, stage: usize, grid: &TokenGrid) -> Result<TokenGrid> {
        self.stages[stage].forward(grid, &mut None)
    }

    pub fn vit_block(&self, block: usize, seq: &TokenSequence) -> Result<TokenSequence> {
        Ok(TokenSequence(self.vit_blocks[block].forward(&seq.0, &mut None)?))
    }

    /// Swin summary vector (B, fusion_dim) attending over ViT patch tokens.
    pub fn svcf(&self, swin_vec: &Tensor, vit: &TokenSequence) -> Result<Tensor> {
        self.svcf.forward(swin_vec, &vit.patches()?, &mut None)
    }

    /// ViT CLS state (B, vit_dim) attending over the final Swin grid.
    pub fn vscf(&self, cls: &Tensor, grid: &TokenGrid) -> Result<Tensor> {
        self.vscf.forward(cls, &grid.tokens()?, &mut None)
    }

    pub fn forward(&self, images: &Tensor) -> Result<BackboneOutput> {
        self.forward_traced(images, None)
    }

    /// Forward pass that optionally records every attention matrix.
    pub fn forward_traced(
        &self,
        images: &Tensor,
        mut trace: Option<&mut AttentionTrace>,
    ) -> Result<BackboneOutput> {
        let images = self.check_images(images)?;
        let mut grid = self.swin_embed.forward(&images)?;
        for (casa, stage) in self.casa.iter().zip(&self.stages) {
            grid = stage.forward(&casa.forward(&grid, &mut trace)?, &mut trace)?;
        }
        let mut seq = self.vit_embed.forward(&images)?;
        for block in &self.vit_blocks {
            seq = TokenSequence(block.forward(&seq.0, &mut trace)?);
        }
        let b = images.dim(0)?;
        let swin_vec = self.swin_fc.forward(&grid.0.reshape((b, ()))?)?;
        let z_s = self.svcf.forward(&swin_vec, &seq.patches()?, &mut trace)?;
        let z_v = self.vscf.forward(&seq.cls()?, &grid.tokens()?, &mut trace)?;
        let m_s = self.ln_s.forward(&z_s)?;
        let m_v = self.ln_v.forward(&z_v)?;
        let feature = Tensor::cat(&[&m_s, &m_v], 1)?;
        let logits = self.head.forward(&feature)?;
        let probs = (logits.neg()?.exp()? + 1.0)?.recip()?;
        Ok(BackboneOutput { m_s, m_v, feature, logits, probs })
    }
}
