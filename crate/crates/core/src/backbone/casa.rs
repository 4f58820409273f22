//! Channel-aware self-attention applied ahead of each Swin stage.
//!
//! The grid is grouped into an (h·w) × C matrix `M`. Query and key
//! projections act on the spatial axis (`Q = Wq·M`, `K = Wk·M` with
//! (h·w) × (h·w) weights), the attention is `softmax(Q·Kᵀ / √C)` and the
//! residual output is `M + att·M`, or `M + att·V` with `Wv` when the value
//! path is enabled.

use candle_core::Var;

use super::patch::TokenGrid;
use crate::error::{ClearError, Result};
use crate::nn::{softmax_last, AttentionTrace, Init, ParamStore, INIT_STD};

#[derive(Clone)]
pub struct Casa {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub use_value_path: bool,
}

impl Casa {
    pub fn new(store: &mut ParamStore, name: &str, tokens: usize, use_value_path: bool) -> Result<Self> {
        let mut w = |m: &str| store.get(&format!("{name}.w{m}"), &[tokens, tokens], Init::TruncNormal(INIT_STD));
        Ok(Casa { wq: w("q")?, wk: w("k")?, wv: w("v")?, use_value_path })
    }

    pub fn forward(&self, grid: &TokenGrid, trace: &mut Option<&mut AttentionTrace>) -> Result<TokenGrid> {
        let (b, h, w, c) = grid.dims()?;
        let t = h * w;
        if self.wq.dims()[0] != t {
            return Err(ClearError::DimMismatch(format!(
                "channel attention built for {} tokens, grid has {t}",
                self.wq.dims()[0]
            )));
        }
        let peak = grid.0.abs()?.flatten_all()?.max(0)?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
        if !peak.is_finite() {
            return Err(ClearError::Numeric("non-finite values entering channel attention".into()));
        }
        let m = grid.tokens()?;
        let q = self.wq.as_tensor().broadcast_matmul(&m)?;
        let k = self.wk.as_tensor().broadcast_matmul(&m)?;
        let scores = (q.matmul(&k.t()?.contiguous()?)? * (1.0 / (c as f64).sqrt()))?;
        let att = softmax_last(&scores)?;
        AttentionTrace::record(trace, "casa", &att);
        let mixed = if self.use_value_path {
            att.matmul(&self.wv.as_tensor().broadcast_matmul(&m)?)?
        } else {
            att.matmul(&m)?
        };
        Ok(TokenGrid((m + mixed)?.reshape((b, h, w, c))?))
    }
}
