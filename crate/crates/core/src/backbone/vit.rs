use candle_core::Tensor;

use super::config::MLP_RATIO;
use crate::error::Result;
use crate::nn::{attention, AttentionTrace, LayerNorm, Linear, Mlp, ParamStore};

/// Pre-norm transformer block: x + MHSA(LN(x)), then x + MLP(LN(x)).
#[derive(Clone)]
pub struct VitBlock {
    pub heads: usize,
    pub norm1: LayerNorm,
    pub qkv: Linear,
    pub proj: Linear,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl VitBlock {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(VitBlock {
            heads,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim)?,
            qkv: Linear::new(store, &format!("{name}.qkv"), dim, 3 * dim, true)?,
            proj: Linear::new(store, &format!("{name}.proj"), dim, dim, true)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim)?,
            mlp: Mlp::new(store, &format!("{name}.mlp"), dim, MLP_RATIO * dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor, trace: &mut Option<&mut AttentionTrace>) -> Result<Tensor> {
        let c = x.dim(2)?;
        let qkv = self.qkv.forward(&self.norm1.forward(x)?)?;
        let q = qkv.narrow(2, 0, c)?;
        let k = qkv.narrow(2, c, c)?;
        let v = qkv.narrow(2, 2 * c, c)?;
        let (att, weights) = attention(&q, &k, &v, self.heads, None)?;
        AttentionTrace::record(trace, "vit", &weights);
        let x = (x + self.proj.forward(&att)?)?;
        Ok((&x + self.mlp.forward(&self.norm2.forward(&x)?)?)?)
    }
}
