//! Cross-fused attention between the two branches.
//!
//! A single summary token from one branch is aligned into the fusion space,
//! prepended to the (aligned) token sequence of the other branch, and used
//! as the only query over that combined sequence. The output is the
//! projected residual `(z_a + att·V)·W_out`, one fusion-width vector per
//! sample.

use candle_core::Tensor;

use crate::error::{ClearError, Result};
use crate::nn::{attention, AttentionTrace, Linear, ParamStore};

#[derive(Clone)]
pub struct CrossFusion {
    pub heads: usize,
    /// Aligns the summary token into the fusion space.
    pub align_q: Linear,
    /// Aligns the other branch's tokens into the fusion space.
    pub align_kv: Linear,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub out: Linear,
}

impl CrossFusion {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        query_dim: usize,
        token_dim: usize,
        fusion_dim: usize,
        heads: usize,
    ) -> Result<Self> {
        let mut lin = |m: &str, i: usize| Linear::new(store, &format!("{name}.{m}"), i, fusion_dim, false);
        Ok(CrossFusion {
            heads,
            align_q: lin("align_q", query_dim)?,
            align_kv: lin("align_kv", token_dim)?,
            wq: lin("wq", fusion_dim)?,
            wk: lin("wk", fusion_dim)?,
            wv: lin("wv", fusion_dim)?,
            out: lin("out", fusion_dim)?,
        })
    }

    /// `summary` is (B, query_dim), `tokens` is (B, T, token_dim); returns (B, fusion_dim).
    pub fn forward(
        &self,
        summary: &Tensor,
        tokens: &Tensor,
        trace: &mut Option<&mut AttentionTrace>,
    ) -> Result<Tensor> {
        let (b, qd) = summary.dims2()?;
        let (tb, _, td) = tokens.dims3()?;
        if b != tb || qd != self.align_q.in_dim() || td != self.align_kv.in_dim() {
            return Err(ClearError::DimMismatch(format!(
                "cross fusion expects ({}, {}) inputs, got summary {:?} and tokens {:?}",
                self.align_q.in_dim(),
                self.align_kv.in_dim(),
                summary.dims(),
                tokens.dims()
            )));
        }
        let za = self.align_q.forward(summary)?.unsqueeze(1)?;
        let seq = Tensor::cat(&[&za, &self.align_kv.forward(tokens)?], 1)?;
        let q = self.wq.forward(&za)?;
        let k = self.wk.forward(&seq)?;
        let v = self.wv.forward(&seq)?;
        let (att, weights) = attention(&q, &k, &v, self.heads, None)?;
        AttentionTrace::record(trace, "fusion", &weights);
        Ok(self.out.forward(&(za + att)?)?.squeeze(1)?)
    }
}
