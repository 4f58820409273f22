//! Checks shared between the per-topic tests and the acceptance run. Each
//! returns its worst error so callers decide how to report it.

use candle_core::{DType, Device, Tensor, Var};
use clear_core::backbone::{Backbone, BackboneConfig, TokenGrid, TokenSequence};
use clear_core::par::bce_with_logits;
use clear_core::retrieval::{margin_loss_batch, total_loss, MarginParams};

use super::layers::*;
use super::*;

pub const GRAD_STEP: f64 = 1e-4;
pub const GRAD_TOL: f64 = 1e-4;
// Entries whose gradient is below this are compared in absolute terms.
pub const GRAD_FLOOR: f64 = 1e-6;
const SAMPLES: usize = 16;

pub fn tiny_f64(seed: u64) -> Backbone {
    Backbone::new(&BackboneConfig::tiny(8), DType::F64, seed).unwrap()
}

/// Tiny layout on a 40×40 input: the first stage has two layers, so the
/// second runs shifted, and its 10×10 grid is padded to the 4×4 windows.
pub fn padded_stage_backbone(seed: u64) -> Backbone {
    let mut cfg = BackboneConfig::tiny(8);
    cfg.image_hw = [40, 40];
    cfg.swin_depths = vec![2, 1];
    Backbone::new(&cfg, DType::F64, seed).unwrap()
}

pub fn grid_mat(g: &TokenGrid, b: usize) -> Mat {
    let (_, h, w, c) = g.dims().unwrap();
    Mat::new(h * w, c, flat(&g.0.get(b).unwrap()))
}

pub fn random_grid(seed: u64, b: usize, h: usize, w: usize, c: usize) -> TokenGrid {
    TokenGrid(random_tensor(&mut rng(seed), &[b, h, w, c], 1.0))
}

pub fn casa_forward_error() -> f64 {
    let bb = tiny_f64(1);
    let mut worst = 0.0f64;
    for stage in 0..2 {
        let (h, w) = bb.config().stage_grid(stage);
        let grid = random_grid(10 + stage as u64, 2, h, w, bb.config().swin_dims[stage]);
        let out = bb.casa(stage, &grid).unwrap();
        let casa = &bb.casa[stage];
        for b in 0..2 {
            let expect = casa_oracle(&grid_mat(&grid, b), &Mat::from_var(&casa.wq), &Mat::from_var(&casa.wk));
            worst = worst.max(max_abs_diff(&grid_mat(&out, b).data, &expect.data));
        }
    }
    worst
}

/// Worst deviation of (svcf, vscf) from the dense reference.
pub fn fusion_forward_error() -> (f64, f64) {
    let bb = tiny_f64(4);
    let cfg = bb.config().clone();
    let mut r = rng(9);
    let swin_vec = random_tensor(&mut r, &[2, cfg.fusion_dim], 1.0);
    let vit = TokenSequence(random_tensor(&mut r, &[2, cfg.vit_seq_len(), cfg.vit_dim], 1.0));
    let (fh, fw) = cfg.final_grid();
    let grid = random_grid(11, 2, fh, fw, *cfg.swin_dims.last().unwrap());
    let z_s = bb.svcf(&swin_vec, &vit).unwrap();
    let z_v = bb.vscf(&vit.cls().unwrap(), &grid).unwrap();
    let (mut es, mut ev) = (0.0f64, 0.0f64);
    for b in 0..2 {
        let seq = Mat::new(cfg.vit_seq_len(), cfg.vit_dim, flat(&vit.0.get(b).unwrap()));
        let patches = seq.select_rows(&(1..seq.rows).collect::<Vec<_>>());
        let expect_s = fusion_oracle(&flat(&swin_vec.get(b).unwrap()), &patches, &bb.svcf);
        es = es.max(max_abs_diff(&flat(&z_s.get(b).unwrap()), &expect_s));
        let expect_v = fusion_oracle(seq.row(0), &grid_mat(&grid, b), &bb.vscf);
        ev = ev.max(max_abs_diff(&flat(&z_v.get(b).unwrap()), &expect_v));
    }
    (es, ev)
}

/// Worst deviation of a shifted, padded, merging stage and of both tiny stages.
pub fn swin_stage_forward_error() -> f64 {
    let mut worst = 0.0f64;
    let padded = padded_stage_backbone(5);
    let tiny = tiny_f64(2);
    for (bb, stage) in [(&padded, 0), (&tiny, 0), (&tiny, 1)] {
        let cfg = bb.config();
        let (h, w) = cfg.stage_grid(stage);
        let grid = random_grid(21 + stage as u64, 2, h, w, cfg.swin_dims[stage]);
        let out = bb.swin_stage(stage, &grid).unwrap();
        let st = &bb.stages[stage];
        for b in 0..2 {
            let mut x = grid_mat(&grid, b);
            for layer in &st.layers {
                x = swin_layer_oracle(&x, layer);
            }
            if let Some(m) = &st.merge {
                x = merge_oracle(&x, h, w, m);
            }
            worst = worst.max(max_abs_diff(&grid_mat(&out, b).data, &x.data));
        }
    }
    worst
}

fn var(seed: u64, shape: &[usize]) -> Var {
    Var::from_tensor(&random_tensor(&mut rng(seed), shape, 1.0)).unwrap()
}

/// Random projection of `t` down to a scalar, so no gradient cancels by symmetry.
fn probe(t: &Tensor, seed: u64) -> Tensor {
    let w = random_tensor(&mut rng(seed), t.dims(), 1.0);
    (t * w).unwrap().sum_all().unwrap()
}

fn prefixed(bb: &Backbone, prefixes: &[&str]) -> Vec<(String, Var)> {
    store_vars(bb.params())
        .into_iter()
        .filter(|(n, _)| prefixes.iter().any(|p| n.starts_with(p)))
        .collect()
}

fn worse(a: (f64, String), b: (f64, String)) -> (f64, String) {
    if b.0 > a.0 {
        b
    } else {
        a
    }
}

pub fn grad_casa() -> (f64, String) {
    let bb = tiny_f64(1);
    let mut worst = (0.0, String::new());
    for stage in 0..2 {
        let (h, w) = bb.config().stage_grid(stage);
        let grid = var(stage as u64, &[2, h, w, bb.config().swin_dims[stage]]);
        let mut vars = prefixed(&bb, &[&format!("casa{stage}.wq"), &format!("casa{stage}.wk")]);
        vars.push(("grid".into(), grid.clone()));
        let loss = || probe(&bb.casa(stage, &TokenGrid(grid.as_tensor().clone())).unwrap().0, 5);
        worst = worse(worst, grad_check(&vars, &loss, SAMPLES, GRAD_STEP, GRAD_FLOOR, 17));
    }
    worst
}

pub fn grad_svcf() -> (f64, String) {
    let bb = tiny_f64(2);
    let cfg = bb.config().clone();
    let swin_vec = var(1, &[2, cfg.fusion_dim]);
    let vit = var(2, &[2, cfg.vit_seq_len(), cfg.vit_dim]);
    let mut vars = prefixed(&bb, &["svcf."]);
    vars.push(("swin_vec".into(), swin_vec.clone()));
    vars.push(("vit".into(), vit.clone()));
    let loss = || probe(&bb.svcf(swin_vec.as_tensor(), &TokenSequence(vit.as_tensor().clone())).unwrap(), 6);
    grad_check(&vars, &loss, SAMPLES, GRAD_STEP, GRAD_FLOOR, 17)
}

pub fn grad_vscf() -> (f64, String) {
    let bb = tiny_f64(2);
    let cfg = bb.config().clone();
    let vit = var(2, &[2, cfg.vit_seq_len(), cfg.vit_dim]);
    let (fh, fw) = cfg.final_grid();
    let grid = var(3, &[2, fh, fw, *cfg.swin_dims.last().unwrap()]);
    let mut vars = prefixed(&bb, &["vscf."]);
    vars.push(("vit".into(), vit.clone()));
    vars.push(("grid".into(), grid.clone()));
    let loss = || {
        let seq = TokenSequence(vit.as_tensor().clone());
        probe(&bb.vscf(&seq.cls().unwrap(), &TokenGrid(grid.as_tensor().clone())).unwrap(), 7)
    };
    grad_check(&vars, &loss, SAMPLES, GRAD_STEP, GRAD_FLOOR, 17)
}

pub fn grad_swin_stage() -> (f64, String) {
    let bb = padded_stage_backbone(3);
    let cfg = bb.config().clone();
    let (h, w) = cfg.stage_grid(0);
    let grid = var(4, &[1, h, w, cfg.swin_dims[0]]);
    let mut vars = prefixed(&bb, &["swin0."]);
    vars.push(("grid".into(), grid.clone()));
    let loss = || probe(&bb.swin_stage(0, &TokenGrid(grid.as_tensor().clone())).unwrap().0, 8);
    grad_check(&vars, &loss, SAMPLES, GRAD_STEP, GRAD_FLOOR, 17)
}

pub fn grad_margin_loss() -> (f64, String) {
    let mut worst = (0.0, String::new());
    for (i, negatives_too) in [true, false].into_iter().enumerate() {
        let p = MarginParams { margin_on_negatives: negatives_too, ..Default::default() };
        let f = var(10 + i as u64, &[4, 6]);
        let g = var(20 + i as u64, &[5, 6]);
        let targets = [0, 3, 1, 3];
        let vars = vec![("f".to_string(), f.clone()), ("g".to_string(), g.clone())];
        let loss = || margin_loss_batch(f.as_tensor(), g.as_tensor(), &targets, &p).unwrap();
        worst = worse(worst, grad_check(&vars, &loss, SAMPLES, GRAD_STEP, GRAD_FLOOR, 17));
    }
    let p = MarginParams::default();
    let (e_p, e_h, e_s) = (var(30, &[4, 8]), var(31, &[3, 4]), var(32, &[3, 4]));
    let vars = vec![("e_p".to_string(), e_p.clone()), ("e_h".to_string(), e_h.clone()), ("e_s".to_string(), e_s.clone())];
    let loss = || total_loss(e_p.as_tensor(), e_h.as_tensor(), e_s.as_tensor(), &[2, 0, 1, 2], &p).unwrap();
    worse(worst, grad_check(&vars, &loss, SAMPLES, GRAD_STEP, GRAD_FLOOR, 17))
}

/// Every parameter tensor of the tiny backbone through the recognition loss.
pub fn grad_backbone() -> (f64, String) {
    let bb = tiny_f64(4);
    let images = random_tensor(&mut rng(40), &[2, 3, 32, 16], 1.0);
    let targets = Tensor::from_vec(
        (0..16).map(|i| f64::from(u8::from(i % 3 == 0))).collect::<Vec<_>>(),
        (2, 8),
        &Device::Cpu,
    )
    .unwrap();
    let vars = store_vars(bb.params());
    let loss = || bce_with_logits(&bb.forward(&images).unwrap().logits, &targets).unwrap();
    grad_check(&vars, &loss, 8, GRAD_STEP, GRAD_FLOOR, 23)
}

pub type GradCase = (&'static str, fn() -> (f64, String));

pub const GRAD_CASES: &[GradCase] = &[
    ("casa", grad_casa),
    ("svcf", grad_svcf),
    ("vscf", grad_vscf),
    ("swin_stage", grad_swin_stage),
    ("margin_loss", grad_margin_loss),
    ("backbone", grad_backbone),
];
