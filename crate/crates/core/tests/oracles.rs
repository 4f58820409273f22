//! Forward passes and metrics compared against straight-line references.

mod common;

use candle_core::{DType, Device, Tensor};
use clear_core::backbone::{SwinLayer, TokenSequence, WindowGeometry};
use clear_core::eval::{average_precision, metric_map, metric_rank_k, search, RankedResult, RelevanceRule, RetrievalIndex};
use clear_core::nn::ParamStore;
use clear_core::par::{bce_loss, metric_f1, metric_ma};
use clear_core::retrieval::{margin_loss, total_loss, Adapter, MarginParams};
use common::cases::*;
use common::layers::*;
use common::*;
use rand::Rng;

const FWD_TOL: f64 = 1e-5;
const METRIC_TOL: f64 = 1e-9;

#[test]
fn casa_matches_dense_reference() {
    let d = casa_forward_error();
    assert!(d <= FWD_TOL, "{d:e}");
}

#[test]
fn cross_fusions_match_dense_reference() {
    let (s, v) = fusion_forward_error();
    assert!(s <= FWD_TOL && v <= FWD_TOL, "svcf {s:e}, vscf {v:e}");
}

#[test]
fn swin_stages_match_dense_reference() {
    let d = swin_stage_forward_error();
    assert!(d <= FWD_TOL, "{d:e}");
}

#[test]
fn padded_stage_fixture_exercises_shift_and_padding() {
    let bb = padded_stage_backbone(5);
    let (h, w) = bb.config().stage_grid(0);
    let g = bb.stages[0].layers[1].geometry;
    assert!(g.shift > 0);
    assert_ne!(g.padded(), (h, w));
    assert!(bb.stages[0].merge.is_some());
}









#[test]
fn shifted_padded_window_layer_matches_dense_reference() {
    for (h, w, ws, shift, heads) in [(5, 6, 4, 2, 2), (4, 4, 2, 1, 1), (6, 3, 3, 0, 2), (8, 8, 4, 2, 4)] {
        let c = 8;
        let mut store = ParamStore::new(DType::F64, 7);
        let layer = SwinLayer::new(&mut store, "l", c, heads, WindowGeometry { h, w, window: ws, shift }).unwrap();
        // Non-trivial norm and bias parameters.
        let mut r = rng(3);
        for (name, var) in store.vars() {
            if name.ends_with("bias") || name.ends_with("shift") || name.ends_with("scale") {
                let base = flat(var.as_tensor());
                let v: Vec<f64> = base.iter().map(|b| b + r.random_range(-0.5..0.5)).collect();
                store.set(name, &Tensor::from_vec(v, var.dims(), &Device::Cpu).unwrap()).unwrap();
            }
        }
        let x = random_tensor(&mut rng(h as u64 * 31 + w as u64), &[1, h, w, c], 1.0);
        let out = layer.forward(&x, &mut None).unwrap();
        let expect = swin_layer_oracle(&Mat::new(h * w, c, flat(&x)), &layer);
        let d = max_abs_diff(&flat(&out), &expect.data);
        assert!(d <= FWD_TOL, "geometry {h}x{w} ws {ws} shift {shift}: {d:e}");
    }
}





#[test]
fn vit_block_matches_dense_reference() {
    let bb = tiny_f64(6);
    let cfg = bb.config().clone();
    let seq = TokenSequence(random_tensor(&mut rng(12), &[1, cfg.vit_seq_len(), cfg.vit_dim], 1.0));
    let out = bb.vit_block(1, &seq).unwrap();
    let blk = &bb.vit_blocks[1];
    let x = Mat::new(cfg.vit_seq_len(), cfg.vit_dim, flat(&seq.0));
    let c = x.cols;
    let qkv = linear(&layer_norm(&x, &blk.norm1), &blk.qkv);
    let att = mha(&qkv.cols_range(0, c), &qkv.cols_range(c, c), &qkv.cols_range(2 * c, c), blk.heads, &|_, _| true);
    let x1 = x.add(&linear(&att, &blk.proj));
    let expect = x1.add(&mlp(&layer_norm(&x1, &blk.norm2), &blk.mlp));
    assert!(max_abs_diff(&flat(&out.0), &expect.data) <= FWD_TOL);
}

#[test]
fn adapter_matches_dense_reference() {
    let mut store = ParamStore::new(DType::F64, 8);
    let a = Adapter::new(&mut store, "a", 4, [3, 3], 2).unwrap();
    let x = random_tensor(&mut rng(1), &[5, 4], 2.0);
    let relu = |v: f64| v.max(0.0);
    let xm = Mat::new(5, 4, flat(&x));
    let h = linear(&xm, &a.layers[0]).map(relu);
    let h = linear(&h, &a.layers[1]).map(relu);
    let expect = linear(&h, &a.layers[2]);
    assert!(max_abs_diff(&flat(&a.forward(&x).unwrap()), &expect.data) <= 1e-12);
}

#[test]
fn metrics_match_brute_force_on_random_instances() {
    let mut r = rng(100);
    for trial in 0..100 {
        let n = r.random_range(1..12);
        let m = r.random_range(1..7);
        let preds: Vec<_> = (0..n).map(|_| random_bits(&mut r, m)).collect();
        let labels: Vec<_> = (0..n).map(|_| random_bits(&mut r, m)).collect();
        let (ma, _) = metric_ma(&preds, &labels).unwrap();
        assert!((ma - oracle_ma(&preds, &labels)).abs() <= METRIC_TOL, "trial {trial} mA");
        let f1 = metric_f1(&preds, &labels).unwrap();
        assert!((f1 - oracle_f1(&preds, &labels)).abs() <= METRIC_TOL, "trial {trial} F1");
    }
}

fn random_results(r: &mut rand_chacha::ChaCha8Rng, n_queries: usize) -> Vec<RankedResult> {
    (0..n_queries)
        .map(|q| {
            let len = r.random_range(1..15);
            let mut relevant: Vec<bool> = (0..len).map(|_| r.random_bool(0.3)).collect();
            if q == 0 {
                relevant[r.random_range(0..len)] = true;
            }
            RankedResult {
                query_id: format!("q{q}"),
                ranking: (0..len).map(|i| (format!("g{i}"), 0.0)).collect(),
                relevant,
            }
        })
        .collect()
}

#[test]
fn ranking_metrics_match_brute_force_on_random_instances() {
    let mut r = rng(200);
    for trial in 0..100 {
        let nq = r.random_range(1..8);
        let results = random_results(&mut r, nq);
        let kept: Vec<&RankedResult> = results.iter().filter(|x| x.relevant.iter().any(|b| *b)).collect();
        for res in &results {
            match (average_precision(&res.relevant), oracle_ap(&res.relevant)) {
                (Some(a), Some(b)) => assert!((a - b).abs() <= METRIC_TOL, "trial {trial} AP"),
                (None, None) => {}
                other => panic!("trial {trial}: AP presence differs {other:?}"),
            }
        }
        let map_oracle = kept.iter().map(|x| oracle_ap(&x.relevant).unwrap()).sum::<f64>() / kept.len() as f64;
        assert!((metric_map(&results).unwrap() - map_oracle).abs() <= METRIC_TOL, "trial {trial} mAP");
        for k in [1, 5, 10] {
            let mut hits = 0;
            for x in &kept {
                let mut found = false;
                for (i, rel) in x.relevant.iter().enumerate() {
                    if i < k && *rel {
                        found = true;
                    }
                }
                hits += usize::from(found);
            }
            let expect = hits as f64 / kept.len() as f64;
            assert!((metric_rank_k(&results, k).unwrap() - expect).abs() <= METRIC_TOL, "trial {trial} R{k}");
        }
    }
}

#[test]
fn search_matches_brute_force_cosine_ranking() {
    let mut r = rng(300);
    for trial in 0..100 {
        let n = r.random_range(1..20);
        let d = r.random_range(2..6);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| random_vec(&mut r, d, 1.0)).collect();
        let ids: Vec<String> = (0..n).map(|i| format!("img{:03}", (i * 7) % 1000)).collect();
        let attrs: Vec<_> = (0..n).map(|_| random_bits(&mut r, 3)).collect();
        let index = RetrievalIndex::build(rows.clone(), ids.clone(), attrs.clone()).unwrap();
        let q = random_vec(&mut r, d, 1.0);
        let qattr = random_bits(&mut r, 3);
        let k = r.random_range(1..=n);
        let res = search(&index, "q", &q, k, Some((&qattr, RelevanceRule::Exact))).unwrap();

        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let mut scored: Vec<(f64, &str, bool)> = rows
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let cos = row.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>() / (norm(row) * norm(&q));
                (cos, ids[i].as_str(), attrs[i] == qattr)
            })
            .collect();
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(b.1)));
        assert_eq!(res.ranking.len(), k);
        for (i, ((id, s), rel)) in res.ranking.iter().zip(&res.relevant).enumerate() {
            let (cos, oid, orel) = scored[i];
            // Near-ties may legitimately swap under rounding.
            if (scored.get(i + 1).map_or(1.0, |x| (x.0 - cos).abs())) > 1e-12 && (i == 0 || (scored[i - 1].0 - cos).abs() > 1e-12) {
                assert_eq!(id, oid, "trial {trial} rank {i}");
                assert_eq!(*rel, orel);
            }
            assert!((s - cos).abs() <= METRIC_TOL, "trial {trial} score");
        }
    }
}

#[test]
fn bce_of_half_probabilities_is_ln2() {
    let probs = vec![0.5; 26];
    let labels: Vec<u8> = (0..26).map(|i| (i % 3 == 0) as u8).collect();
    assert!((bce_loss(&probs, &labels).unwrap() - std::f64::consts::LN_2).abs() <= 1e-9);
}

#[test]
fn margin_loss_closed_form() {
    let p = MarginParams { sigma: 1.0, gamma: 0.0, ..Default::default() };
    let f = [0.6, 0.8, 0.0];
    let neg = vec![vec![0.0, 0.0, 2.5]];
    let loss = margin_loss(&f, &f, &neg, &p).unwrap();
    let expect = (1.0 + (-1.0f64).exp()).ln();
    assert!((loss - expect).abs() <= 1e-9, "{loss} vs {expect}");
}


#[test]
fn margin_loss_matches_angle_oracle() {
    let mut r = rng(400);
    for trial in 0..100 {
        let d = r.random_range(2..8);
        let f = random_vec(&mut r, d, 1.0);
        let gs: Vec<Vec<f64>> = (0..r.random_range(2..6)).map(|_| random_vec(&mut r, d, 1.0)).collect();
        let p = MarginParams {
            sigma: r.random_range(1.0..20.0),
            gamma: r.random_range(0.0..0.5),
            margin_on_negatives: r.random_bool(0.5),
            ..Default::default()
        };
        let got = margin_loss(&f, &gs[0], &gs[1..], &p).unwrap();
        let expect = margin_oracle(&f, &gs, 0, &p);
        assert!((got - expect).abs() <= 1e-9 * expect.abs().max(1.0), "trial {trial}: {got} vs {expect}");
    }
}

#[test]
fn total_loss_matches_weighted_oracle() {
    let mut r = rng(500);
    let (b, c, dq) = (6, 4, 3);
    let p = MarginParams::default();
    let e_p = random_tensor(&mut r, &[b, 2 * dq], 1.0);
    let e_h = random_tensor(&mut r, &[c, dq], 1.0);
    let e_s = random_tensor(&mut r, &[c, dq], 1.0);
    let assign: Vec<usize> = (0..b).map(|i| i % c).collect();
    let got = total_loss(&e_p, &e_h, &e_s, &assign, &p).unwrap().to_scalar::<f64>().unwrap();
    let rows = |t: &Tensor| -> Vec<Vec<f64>> { flat(t).chunks(dq).map(<[f64]>::to_vec).collect() };
    let pm = Mat::new(b, 2 * dq, flat(&e_p));
    let (h, s) = (rows(&e_h), rows(&e_s));
    let mut expect = 0.0;
    for (i, &t) in assign.iter().enumerate() {
        expect += p.beta1 * margin_oracle(&pm.row(i)[..dq], &h, t, &p) / b as f64;
        expect += p.beta2 * margin_oracle(&pm.row(i)[dq..], &s, t, &p) / b as f64;
    }
    assert!((got - expect).abs() <= 1e-9, "{got} vs {expect}");
}
