//! Multi-label attribute training, thresholding and recognition metrics.

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig};
use crate::checkpoint::Checkpoint;
use crate::error::{ClearError, Result};
use crate::optim::{cosine_lr, AdamW, AdamWConfig};
use crate::schema::AttributeVector;
use crate::synth::SplitData;

pub const PROB_EPS: f64 = 1e-7;
pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const PAR_KIND: &str = "par";

/// Mean binary cross-entropy over attributes, probabilities clamped to
/// `[PROB_EPS, 1 - PROB_EPS]`.
pub fn bce_loss(probs: &[f64], labels: &[u8]) -> Result<f64> {
    if probs.len() != labels.len() {
        return Err(ClearError::DimMismatch(format!(
            "{} probabilities for {} labels",
            probs.len(),
            labels.len()
        )));
    }
    if probs.is_empty() {
        return Err(ClearError::Empty("no attributes".into()));
    }
    let total: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
            let y = f64::from(y);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / probs.len() as f64)
}

/// Mean of `softplus(x) - y·x` over all entries: the same loss as
/// [`bce_loss`] on `sigmoid(x)`, evaluated without forming probabilities.
pub fn bce_with_logits(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let softplus = (logits.relu()? + (logits.abs()?.neg()?.exp()? + 1.0)?.log()?)?;
    Ok((softplus - (logits * targets)?)?.mean_all()?)
}

/// Bit `i` is set iff `probs[i] >= threshold`.
pub fn predict(probs: &[f32], threshold: f64) -> AttributeVector {
    AttributeVector::new(probs.iter().map(|&p| u8::from(f64::from(p) >= threshold)).collect()).expect("binary")
}

fn check_pairs(preds: &[AttributeVector], labels: &[AttributeVector]) -> Result<usize> {
    if preds.is_empty() {
        return Err(ClearError::Empty("no predictions".into()));
    }
    if preds.len() != labels.len() {
        return Err(ClearError::DimMismatch(format!("{} predictions for {} labels", preds.len(), labels.len())));
    }
    let n = labels[0].len();
    if preds.iter().chain(labels).any(|v| v.len() != n) {
        return Err(ClearError::DimMismatch("attribute vectors differ in length".into()));
    }
    Ok(n)
}

/// Label-based mean accuracy and its per-attribute terms.
pub fn metric_ma(preds: &[AttributeVector], labels: &[AttributeVector]) -> Result<(f64, Vec<f64>)> {
    let n_attr = check_pairs(preds, labels)?;
    let per: Vec<f64> = (0..n_attr)
        .map(|i| {
            let (mut tp, mut p, mut tn, mut n) = (0usize, 0usize, 0usize, 0usize);
            for (a, y) in preds.iter().zip(labels) {
                if y.get(i) {
                    p += 1;
                    tp += usize::from(a.get(i));
                } else {
                    n += 1;
                    tn += usize::from(!a.get(i));
                }
            }
            let pos = if p == 0 { 1.0 } else { tp as f64 / p as f64 };
            let neg = if n == 0 { 1.0 } else { tn as f64 / n as f64 };
            0.5 * (pos + neg)
        })
        .collect();
    let ma = if per.is_empty() { 1.0 } else { per.iter().sum::<f64>() / per.len() as f64 };
    Ok((ma, per))
}

/// Example-based precision, recall and F1.
pub fn metric_prf(preds: &[AttributeVector], labels: &[AttributeVector]) -> Result<(f64, f64, f64)> {
    check_pairs(preds, labels)?;
    let ratio = |inter: usize, size: usize, other: usize| match (size, other) {
        (0, 0) => 1.0,
        (0, _) => 0.0,
        _ => inter as f64 / size as f64,
    };
    let (mut sp, mut sr) = (0.0, 0.0);
    for (a, y) in preds.iter().zip(labels) {
        let inter = a.bits().iter().zip(y.bits()).filter(|(p, t)| **p == 1 && **t == 1).count();
        let (np, ny) = (a.count_ones(), y.count_ones());
        sp += ratio(inter, np, ny);
        sr += ratio(inter, ny, np);
    }
    let m = preds.len() as f64;
    let (p, r) = (sp / m, sr / m);
    let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    Ok((p, r, f1))
}

pub fn metric_f1(preds: &[AttributeVector], labels: &[AttributeVector]) -> Result<f64> {
    Ok(metric_prf(preds, labels)?.2)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParMetrics {
    #[serde(rename = "mA")]
    pub ma: f64,
    #[serde(rename = "F1")]
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub per_attribute: Vec<f64>,
}

pub fn par_metrics(preds: &[AttributeVector], labels: &[AttributeVector]) -> Result<ParMetrics> {
    let (ma, per_attribute) = metric_ma(preds, labels)?;
    let (precision, recall, f1) = metric_prf(preds, labels)?;
    Ok(ParMetrics { ma, f1, precision, recall, per_attribute })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ParTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Write a checkpoint every this many steps; 0 disables.
    pub checkpoint_every: usize,
    pub threshold: f64,
}

impl Default for ParTrainConfig {
    fn default() -> Self {
        ParTrainConfig {
            steps: 200,
            batch_size: 32,
            lr: 1e-4,
            weight_decay: 0.01,
            checkpoint_every: 0,
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

impl ParTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(ClearError::Config("batch_size must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(ClearError::Config("lr must be finite and non-negative".into()));
        }
        Ok(())
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig { lr: self.lr, weight_decay: self.weight_decay, ..Default::default() }
    }
}

/// Sample indices for `step`: a seeded per-epoch permutation, so any step's
/// batch can be recomputed without replaying earlier ones.
pub fn batch_indices(n: usize, batch: usize, seed: u64, step: usize) -> Vec<u32> {
    let batch = batch.min(n);
    let per_epoch = n / batch;
    let epoch = step / per_epoch;
    let slot = step % per_epoch;
    let mut order: Vec<u32> = (0..n as u32).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    order.shuffle(&mut rng);
    order[slot * batch..(slot + 1) * batch].to_vec()
}

pub fn labels_tensor(labels: &[AttributeVector], dtype: DType) -> Result<Tensor> {
    let n = labels.first().map_or(0, AttributeVector::len);
    let flat: Vec<f32> = labels.iter().flat_map(AttributeVector::to_f32).collect();
    Ok(Tensor::from_vec(flat, (labels.len(), n), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Backbone parameters, optimizer moments, step counter and seed.
pub struct TrainState {
    pub backbone: Backbone,
    pub opt: AdamW,
    pub step: usize,
    pub seed: u64,
    pub train_cfg: ParTrainConfig,
}

impl TrainState {
    pub fn new(cfg: &BackboneConfig, train_cfg: &ParTrainConfig, seed: u64) -> Result<Self> {
        train_cfg.validate()?;
        let backbone = Backbone::new(cfg, DType::F32, seed)?;
        let opt = AdamW::new(backbone.params().vars(), train_cfg.adamw())?;
        Ok(TrainState { backbone, opt, step: 0, seed, train_cfg: train_cfg.clone() })
    }

    pub fn to_checkpoint(&self, schema_hash: &str) -> Result<Checkpoint> {
        let config = serde_json::json!({
            "backbone": self.backbone.config(),
            "train": self.train_cfg,
        });
        let mut ck = Checkpoint::new(PAR_KIND, config);
        ck.insert_store("", self.backbone.params())?;
        self.opt.save_into(&mut ck)?;
        ck.meta.insert("step".into(), self.step.into());
        ck.meta.insert("seed".into(), self.seed.into());
        ck.meta.insert("schema_hash".into(), schema_hash.into());
        ck.meta.insert("backbone_hash".into(), self.backbone.params().content_hash()?.into());
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(PAR_KIND)?;
        let (cfg, train_cfg) = checkpoint_configs(ck)?;
        let seed = meta_u64(ck, "seed")?;
        let mut state = TrainState::new(&cfg, &train_cfg, seed)?;
        ck.load_into("", state.backbone.params())?;
        state.opt.restore_from(ck)?;
        state.step = meta_u64(ck, "step")? as usize;
        Ok(state)
    }

    pub fn save(&self, path: impl AsRef<Path>, schema_hash: &str) -> Result<()> {
        self.to_checkpoint(schema_hash)?.save(path)
    }
}

fn meta_u64(ck: &Checkpoint, key: &str) -> Result<u64> {
    ck.meta
        .get(key)
        .and_then(|v| v.as_u64())
        .ok_or_else(|| ClearError::Checkpoint(format!("missing {key}")))
}

fn checkpoint_configs(ck: &Checkpoint) -> Result<(BackboneConfig, ParTrainConfig)> {
    let bad = |e: serde_json::Error| ClearError::Checkpoint(format!("bad config block: {e}"));
    let cfg = serde_json::from_value(ck.config["backbone"].clone()).map_err(bad)?;
    let train = serde_json::from_value(ck.config["train"].clone()).map_err(bad)?;
    Ok((cfg, train))
}

/// Loads only the backbone weights from a PAR checkpoint, checking the
/// schema it was trained for.
pub fn load_backbone(path: impl AsRef<Path>, schema_hash: &str, dtype: DType) -> Result<Backbone> {
    let ck = Checkpoint::load(path)?;
    ck.expect_kind(PAR_KIND)?;
    let found = ck.meta_str("schema_hash").unwrap_or_default();
    if found != schema_hash {
        return Err(ClearError::SchemaMismatch { expected: schema_hash.to_string(), found: found.to_string() });
    }
    let (cfg, _) = checkpoint_configs(&ck)?;
    let backbone = Backbone::new(&cfg, dtype, 0)?;
    ck.load_into("", backbone.params())?;
    Ok(backbone)
}

/// Where and how often [`train_par`] writes intermediate checkpoints.
pub struct CheckpointSink<'a> {
    pub path: &'a Path,
    pub schema_hash: &'a str,
}

/// Runs optimizer steps until `state.step` reaches `until` and returns the
/// loss of each one. The learning rate follows cosine decay over the
/// configured step count, so stopping early and resuming reproduces an
/// uninterrupted run.
pub fn train_par(
    data: &SplitData,
    state: &mut TrainState,
    until: usize,
    sink: Option<&CheckpointSink>,
) -> Result<Vec<f64>> {
    if data.is_empty() {
        return Err(ClearError::Empty("training split is empty".into()));
    }
    let n_attr = state.backbone.config().n_attr;
    if data.labels.iter().any(|l| l.len() != n_attr) {
        return Err(ClearError::DimMismatch(format!("labels must have {n_attr} attributes")));
    }
    let cfg = state.train_cfg.clone();
    let targets = labels_tensor(&data.labels, state.backbone.dtype())?;
    let total_steps = cfg.steps;
    let mut curve = Vec::new();
    while state.step < until {
        let idx = batch_indices(data.len(), cfg.batch_size, state.seed, state.step);
        let idx = Tensor::new(idx.as_slice(), &Device::Cpu)?;
        let images = data.images.index_select(&idx, 0)?;
        let y = targets.index_select(&idx, 0)?;
        let out = state.backbone.forward(&images)?;
        let loss = bce_with_logits(&out.logits, &y)?;
        let value = f64::from(loss.to_dtype(DType::F32)?.to_scalar::<f32>()?);
        if !value.is_finite() {
            return Err(ClearError::Numeric(format!(
                "non-finite loss {value} at step {}; lr {:.3e}; previous loss {:?}",
                state.step,
                cosine_lr(cfg.lr, state.step, total_steps),
                curve.last()
            )));
        }
        let grads = loss.backward()?;
        state.opt.step(&grads, cosine_lr(cfg.lr, state.step, total_steps))?;
        state.step += 1;
        curve.push(value);
        if let Some(sink) = sink {
            if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 {
                state.save(sink.path, sink.schema_hash)?;
            }
        }
    }
    Ok(curve)
}

/// Attribute probabilities for every image, computed in chunks.
pub fn predict_probs(backbone: &Backbone, images: &Tensor, chunk: usize) -> Result<Vec<Vec<f32>>> {
    let n = images.dim(0)?;
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let len = chunk.max(1).min(n - start);
        let probs = backbone.forward(&images.narrow(0, start, len)?)?.probs.detach();
        out.extend(probs.to_dtype(DType::F32)?.to_vec2::<f32>()?);
        start += len;
    }
    Ok(out)
}

pub fn evaluate_par(backbone: &Backbone, data: &SplitData, threshold: f64) -> Result<ParMetrics> {
    let probs = predict_probs(backbone, &data.images, 64)?;
    let preds: Vec<AttributeVector> = probs.iter().map(|p| predict(p, threshold)).collect();
    par_metrics(&preds, &data.labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn av(bits: &[u8]) -> AttributeVector {
        AttributeVector::new(bits.to_vec()).unwrap()
    }

    #[test]
    fn bce_closed_forms() {
        assert!((bce_loss(&[0.5, 0.5, 0.5], &[1, 0, 1]).unwrap() - 2f64.ln()).abs() < 1e-12);
        assert!((bce_loss(&[0.25], &[1]).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert!(bce_loss(&[1.0, 0.0], &[1, 0]).unwrap() <= -(1.0 - PROB_EPS).ln() + 1e-15);
        assert!(bce_loss(&[0.5], &[1, 0]).is_err());
    }

    #[test]
    fn logit_loss_matches_probability_loss() {
        let logits = [0.3f64, -1.2, 2.5, 0.0];
        let labels = [1u8, 0, 0, 1];
        let probs: Vec<f64> = logits.iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect();
        let t = Tensor::new(&logits, &Device::Cpu).unwrap();
        let y = Tensor::new(&labels.map(f64::from), &Device::Cpu).unwrap();
        let a = bce_with_logits(&t, &y).unwrap().to_scalar::<f64>().unwrap();
        assert!((a - bce_loss(&probs, &labels).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn predict_threshold_rule() {
        assert_eq!(predict(&[0.6, 0.4], 0.5), av(&[1, 0]));
        assert_eq!(predict(&[0.5, 0.5], 0.5), av(&[1, 1]));
        assert_eq!(predict(&[0.9, 1.0], 1.1), av(&[0, 0]));
    }

    #[test]
    fn worked_metric_examples() {
        let preds = [av(&[1, 0]), av(&[1, 1])];
        let labels = [av(&[1, 0]), av(&[0, 1])];
        let (ma, per) = metric_ma(&preds, &labels).unwrap();
        assert_eq!(per, vec![0.5, 1.0]);
        assert_eq!(ma, 0.75);
        let (p, r, f1) = metric_prf(&preds, &labels).unwrap();
        assert_eq!((p, r), (0.75, 1.0));
        assert!((f1 - 6.0 / 7.0).abs() < 1e-12);
        let comp = [av(&[0, 1]), av(&[1, 0])];
        assert_eq!(metric_ma(&comp, &labels).unwrap().0, 0.0);
        assert_eq!(metric_ma(&labels, &labels).unwrap().0, 1.0);
        assert_eq!(metric_f1(&labels, &labels).unwrap(), 1.0);
        assert!(metric_ma(&[], &[]).is_err());
    }

    #[test]
    fn batches_cover_each_epoch_once() {
        let mut seen: Vec<u32> = (0..5).flat_map(|s| batch_indices(10, 2, 9, s)).collect();
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert_eq!(batch_indices(10, 2, 9, 7), batch_indices(10, 2, 9, 7));
    }
}
