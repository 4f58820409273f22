use serde::{Deserialize, Serialize};

use crate::error::{ClearError, Result};

pub const MLP_RATIO: usize = 4;
const HEAD_WIDTH: usize = 32;

fn default_heads(dim: usize) -> usize {
    (dim / HEAD_WIDTH).max(1)
}

/// Architecture hyperparameters of the two-branch backbone.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    /// Input (height, width) in pixels.
    pub image_hw: [usize; 2],
    pub swin_patch: usize,
    pub swin_dims: Vec<usize>,
    pub swin_depths: Vec<usize>,
    pub window: usize,
    pub vit_patch: usize,
    pub vit_dim: usize,
    pub vit_depth: usize,
    pub fusion_dim: usize,
    pub n_attr: usize,
    /// Per-stage window-attention heads; defaults to dim / 32.
    #[serde(default)]
    pub swin_heads: Option<Vec<usize>>,
    #[serde(default)]
    pub vit_heads: Option<usize>,
    #[serde(default)]
    pub fusion_heads: Option<usize>,
    /// Use `att · V` instead of `att · z` in the channel-aware attention residual.
    #[serde(default)]
    pub casa_value_path: bool,
}

impl BackboneConfig {
    /// The full-size layout: 256×128 input, Swin [128, 256, 512, 1024] × [2, 2, 6, 2],
    /// window 12, ViT patch 14 at width 1024 with 12 blocks, fusion width 768.
    pub fn full(n_attr: usize) -> Self {
        BackboneConfig {
            image_hw: [256, 128],
            swin_patch: 4,
            swin_dims: vec![128, 256, 512, 1024],
            swin_depths: vec![2, 2, 6, 2],
            window: 12,
            vit_patch: 14,
            vit_dim: 1024,
            vit_depth: 12,
            fusion_dim: 768,
            n_attr,
            swin_heads: None,
            vit_heads: None,
            fusion_heads: None,
            casa_value_path: false,
        }
    }

    /// Desk-scale layout used for tests and synthetic end-to-end runs.
    pub fn tiny(n_attr: usize) -> Self {
        BackboneConfig {
            image_hw: [32, 16],
            swin_patch: 4,
            swin_dims: vec![16, 32],
            swin_depths: vec![1, 1],
            window: 4,
            vit_patch: 8,
            vit_dim: 32,
            vit_depth: 2,
            fusion_dim: 64,
            n_attr,
            swin_heads: None,
            vit_heads: None,
            fusion_heads: None,
            casa_value_path: false,
        }
    }

    pub fn n_stages(&self) -> usize {
        self.swin_dims.len()
    }

    pub fn stage_heads(&self, stage: usize) -> usize {
        match &self.swin_heads {
            Some(h) => h[stage],
            None => default_heads(self.swin_dims[stage]),
        }
    }

    pub fn vit_heads(&self) -> usize {
        self.vit_heads.unwrap_or_else(|| default_heads(self.vit_dim))
    }

    pub fn fusion_heads(&self) -> usize {
        self.fusion_heads.unwrap_or_else(|| default_heads(self.fusion_dim))
    }

    /// Spatial grid (h, w) entering stage `stage`.
    pub fn stage_grid(&self, stage: usize) -> (usize, usize) {
        let h = self.image_hw[0] / self.swin_patch;
        let w = self.image_hw[1] / self.swin_patch;
        (h >> stage, w >> stage)
    }

    /// Grid after the last stage (no merge follows it).
    pub fn final_grid(&self) -> (usize, usize) {
        self.stage_grid(self.n_stages() - 1)
    }

    pub fn swin_tokens(&self) -> usize {
        let (h, w) = self.stage_grid(0);
        h * w
    }

    /// Image size fed to the ViT branch: the largest multiple of the patch
    /// size not exceeding each input side.
    pub fn vit_input_hw(&self) -> (usize, usize) {
        let p = self.vit_patch;
        ((self.image_hw[0] / p) * p, (self.image_hw[1] / p) * p)
    }

    pub fn vit_grid(&self) -> (usize, usize) {
        let (h, w) = self.vit_input_hw();
        (h / self.vit_patch, w / self.vit_patch)
    }

    pub fn vit_patches(&self) -> usize {
        let (h, w) = self.vit_grid();
        h * w
    }

    /// Sequence length including the leading CLS token.
    pub fn vit_seq_len(&self) -> usize {
        self.vit_patches() + 1
    }

    pub fn feature_dim(&self) -> usize {
        2 * self.fusion_dim
    }

    /// Effective attention window and shift for `layer` of `stage`.
    pub fn window_for(&self, stage: usize, layer: usize) -> (usize, usize) {
        let (h, w) = self.stage_grid(stage);
        if h.min(w) <= self.window {
            (h.min(w), 0)
        } else {
            let shift = if layer % 2 == 1 { self.window / 2 } else { 0 };
            (self.window, shift)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(ClearError::Config(m));
        let [h, w] = self.image_hw;
        if self.swin_dims.is_empty() || self.swin_dims.len() != self.swin_depths.len() {
            return err(format!(
                "swin_dims ({}) and swin_depths ({}) must be non-empty and equally long",
                self.swin_dims.len(),
                self.swin_depths.len()
            ));
        }
        if let Some(heads) = &self.swin_heads {
            if heads.len() != self.swin_dims.len() {
                return err("swin_heads must have one entry per stage".into());
            }
        }
        if self.swin_patch == 0 || h % self.swin_patch != 0 || w % self.swin_patch != 0 {
            return err(format!("image {h}x{w} is not divisible by swin patch {}", self.swin_patch));
        }
        let merges = self.n_stages() - 1;
        let (gh, gw) = (h / self.swin_patch, w / self.swin_patch);
        if gh % (1 << merges) != 0 || gw % (1 << merges) != 0 {
            return err(format!("swin grid {gh}x{gw} cannot be halved {merges} times"));
        }
        if self.window == 0 {
            return err("window must be positive".into());
        }
        for s in 0..self.n_stages() {
            let heads = self.stage_heads(s);
            if heads == 0 || self.swin_dims[s] % heads != 0 {
                return err(format!("stage {s} dim {} not divisible by {heads} heads", self.swin_dims[s]));
            }
        }
        if self.vit_patch == 0 || self.vit_patches() == 0 {
            return err(format!("vit patch {} does not fit a {h}x{w} image", self.vit_patch));
        }
        if self.vit_heads() == 0 || self.vit_dim % self.vit_heads() != 0 {
            return err(format!("vit dim {} not divisible by {} heads", self.vit_dim, self.vit_heads()));
        }
        if self.fusion_heads() == 0 || self.fusion_dim % self.fusion_heads() != 0 {
            return err(format!(
                "fusion dim {} not divisible by {} heads",
                self.fusion_dim,
                self.fusion_heads()
            ));
        }
        if self.n_attr == 0 {
            return err("n_attr must be positive".into());
        }
        Ok(())
    }

    /// Name and shape of every parameter the backbone owns, in creation order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut push = |name: String, shape: Vec<usize>| out.push((name, shape));
        let linear = |push: &mut dyn FnMut(String, Vec<usize>), name: &str, i: usize, o: usize, bias: bool| {
            push(format!("{name}.weight"), vec![i, o]);
            if bias {
                push(format!("{name}.bias"), vec![o]);
            }
        };
        let norm = |push: &mut dyn FnMut(String, Vec<usize>), name: &str, d: usize| {
            push(format!("{name}.scale"), vec![d]);
            push(format!("{name}.shift"), vec![d]);
        };
        let p = self.swin_patch;
        linear(&mut push, "swin.embed", 3 * p * p, self.swin_dims[0], true);
        for s in 0..self.n_stages() {
            let (h, w) = self.stage_grid(s);
            let t = h * w;
            for m in ["q", "k", "v"] {
                push(format!("casa{s}.w{m}"), vec![t, t]);
            }
            let c = self.swin_dims[s];
            for l in 0..self.swin_depths[s] {
                let n = format!("swin{s}.layer{l}");
                norm(&mut push, &format!("{n}.norm1"), c);
                linear(&mut push, &format!("{n}.qkv"), c, 3 * c, true);
                linear(&mut push, &format!("{n}.proj"), c, c, true);
                norm(&mut push, &format!("{n}.norm2"), c);
                linear(&mut push, &format!("{n}.mlp.fc1"), c, MLP_RATIO * c, true);
                linear(&mut push, &format!("{n}.mlp.fc2"), MLP_RATIO * c, c, true);
            }
            if s + 1 < self.n_stages() {
                norm(&mut push, &format!("swin{s}.merge.norm"), 4 * c);
                linear(&mut push, &format!("swin{s}.merge.reduction"), 4 * c, self.swin_dims[s + 1], false);
            }
        }
        let vp = self.vit_patch;
        let d = self.vit_dim;
        linear(&mut push, "vit.embed", 3 * vp * vp, d, true);
        push("vit.cls".into(), vec![1, 1, d]);
        push("vit.pos".into(), vec![1, self.vit_seq_len(), d]);
        for b in 0..self.vit_depth {
            let n = format!("vit.block{b}");
            norm(&mut push, &format!("{n}.norm1"), d);
            linear(&mut push, &format!("{n}.qkv"), d, 3 * d, true);
            linear(&mut push, &format!("{n}.proj"), d, d, true);
            norm(&mut push, &format!("{n}.norm2"), d);
            linear(&mut push, &format!("{n}.mlp.fc1"), d, MLP_RATIO * d, true);
            linear(&mut push, &format!("{n}.mlp.fc2"), MLP_RATIO * d, d, true);
        }
        let f = self.fusion_dim;
        let (fh, fw) = self.final_grid();
        let c_last = *self.swin_dims.last().expect("validated");
        linear(&mut push, "swin.fc", c_last * fh * fw, f, true);
        for (site, q_in, kv_in) in [("svcf", f, d), ("vscf", d, c_last)] {
            linear(&mut push, &format!("{site}.align_q"), q_in, f, false);
            linear(&mut push, &format!("{site}.align_kv"), kv_in, f, false);
            for m in ["wq", "wk", "wv", "out"] {
                linear(&mut push, &format!("{site}.{m}"), f, f, false);
            }
        }
        norm(&mut push, "ln_s", f);
        norm(&mut push, "ln_v", f);
        linear(&mut push, "head", 2 * f, self.n_attr, true);
        out
    }
}
