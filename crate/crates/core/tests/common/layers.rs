//! Dense references for the backbone components and the margin loss.

use clear_core::backbone::{CrossFusion, PatchMerging, SwinLayer, WindowGeometry};
use clear_core::retrieval::MarginParams;

use super::*;

pub fn casa_oracle(m: &Mat, wq: &Mat, wk: &Mat) -> Mat {
    let q = wq.matmul(m);
    let k = wk.matmul(m);
    let scale = 1.0 / (m.cols as f64).sqrt();
    let att = softmax_rows(&q.matmul(&k.transpose()).map(|x| x * scale));
    m.add(&att.matmul(m))
}

/// Window group of a coordinate after a cyclic shift by `s`: tokens share a
/// window exactly when both coordinates fall in the same group.
pub fn window_group(y: usize, ws: usize, s: usize) -> usize {
    (y + ws - s) / ws
}

pub fn swin_layer_oracle(x: &Mat, layer: &SwinLayer) -> Mat {
    let WindowGeometry { w, window: ws, shift, .. } = layer.geometry;
    let pos = |i: usize| (i / w, i % w);
    let allowed = |i: usize, j: usize| {
        let ((yi, xi), (yj, xj)) = (pos(i), pos(j));
        window_group(yi, ws, shift) == window_group(yj, ws, shift)
            && window_group(xi, ws, shift) == window_group(xj, ws, shift)
    };
    let c = x.cols;
    let qkv = linear(&layer_norm(x, &layer.norm1), &layer.qkv);
    let att = mha(&qkv.cols_range(0, c), &qkv.cols_range(c, c), &qkv.cols_range(2 * c, c), layer.heads, &allowed);
    let x1 = x.add(&linear(&att, &layer.proj));
    x1.add(&mlp(&layer_norm(&x1, &layer.norm2), &layer.mlp))
}

pub fn merge_oracle(x: &Mat, h: usize, w: usize, m: &PatchMerging) -> Mat {
    let c = x.cols;
    let mut rows = Vec::new();
    for y in 0..h / 2 {
        for xx in 0..w / 2 {
            for (dy, dx) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                rows.extend_from_slice(x.row((2 * y + dy) * w + 2 * xx + dx));
            }
        }
    }
    let cat = Mat::new(h / 2 * (w / 2), 4 * c, rows);
    linear(&layer_norm(&cat, &m.norm), &m.reduction)
}

pub fn fusion_oracle(summary: &[f64], tokens: &Mat, f: &CrossFusion) -> Vec<f64> {
    let za = linear(&Mat::new(1, summary.len(), summary.to_vec()), &f.align_q);
    let aligned = linear(tokens, &f.align_kv);
    let seq = Mat::new(aligned.rows + 1, za.cols, [za.data.clone(), aligned.data].concat());
    let q = linear(&za, &f.wq);
    let att = mha(&q, &linear(&seq, &f.wk), &linear(&seq, &f.wv), f.heads, &|_, _| true);
    linear(&za.add(&att), &f.out).data
}

/// Cross-entropy over `σ·cos(acos(c) + γ)` computed directly from angles.
pub fn margin_oracle(f: &[f64], gs: &[Vec<f64>], target: usize, p: &MarginParams) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let logits: Vec<f64> = gs
        .iter()
        .enumerate()
        .map(|(j, g)| {
            let c = (f.iter().zip(g).map(|(a, b)| a * b).sum::<f64>() / (norm(f) * norm(g)))
                .clamp(-1.0 + p.delta, 1.0 - p.delta);
            let angle = if j == target || p.margin_on_negatives { c.acos() + p.gamma } else { c.acos() };
            p.sigma * angle.cos()
        })
        .collect();
    -softmax(&logits)[target].ln()
}
