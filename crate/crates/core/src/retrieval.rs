//! Frozen-backbone margin learning for attribute-based person retrieval.
//!
//! Three adapters map the backbone feature, the binary attribute vector and
//! the flattened pseudo-description embedding into a shared angular space.
//! The person embedding is twice as wide as each query embedding: its first
//! half is matched against hard (binary) query encodings, its second half
//! against soft (description) encodings. A fourth adapter over mean-pooled
//! attribute words is trained against the second half with the person side
//! detached, so it never changes the main objective.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::backbone::Backbone;
use crate::checkpoint::Checkpoint;
use crate::error::{ClearError, Result};
use crate::nn::{log_softmax_last, Init, Linear, ParamStore, INIT_STD};
use crate::optim::{cosine_lr, AdamW, AdamWConfig};
use crate::par::batch_indices;
use crate::query::{
    build_pseudo_description, hard_embed, soft_embed, word_embed, EmbeddingProvider, HashEmbeddingProvider,
    TableEmbeddingProvider, DEFAULT_N_WORDS, DEFAULT_WORD_DIM,
};
use crate::schema::{AttributeSchema, AttributeVector};
use crate::synth::SplitData;

pub const HEADS_KIND: &str = "heads";
/// Retrieval heads run in double precision; they are small.
pub const HEADS_DTYPE: DType = DType::F64;

/// Three linear layers with ReLU after the first two.
#[derive(Clone)]
pub struct Adapter {
    pub layers: [Linear; 3],
}

/// Hidden widths spaced geometrically between `input` and `output`.
pub fn geometric_hidden(input: usize, output: usize) -> [usize; 2] {
    let (a, b) = (input as f64, output as f64);
    [
        (a.powf(2.0 / 3.0) * b.powf(1.0 / 3.0)).round().max(1.0) as usize,
        (a.powf(1.0 / 3.0) * b.powf(2.0 / 3.0)).round().max(1.0) as usize,
    ]
}

impl Adapter {
    /// Biases start small and random rather than zero so that an all-zero
    /// input (the empty attribute query) still maps to a non-zero direction.
    pub fn new(store: &mut ParamStore, name: &str, input: usize, hidden: [usize; 2], output: usize) -> Result<Self> {
        let dims = [input, hidden[0], hidden[1], output];
        let mut make = |i: usize| -> Result<Linear> {
            let base = format!("{name}.l{}", i + 1);
            Ok(Linear {
                weight: store.get(&format!("{base}.weight"), &[dims[i], dims[i + 1]], Init::TruncNormal(INIT_STD))?,
                bias: Some(store.get(&format!("{base}.bias"), &[dims[i + 1]], Init::TruncNormal(INIT_STD))?),
            })
        };
        Ok(Adapter { layers: [make(0)?, make(1)?, make(2)?] })
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers[2].out_dim()
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.layers[0].forward(x)?.relu()?;
        let h = self.layers[1].forward(&h)?.relu()?;
        self.layers[2].forward(&h)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MarginParams {
    pub sigma: f64,
    /// Additive angular margin in radians.
    pub gamma: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub margin_on_negatives: bool,
    /// Scale logits by `sigma^2` instead of `sigma`.
    pub double_sigma: bool,
    /// Cosines are clamped to `[-1 + delta, 1 - delta]` before the margin.
    pub delta: f64,
}

impl Default for MarginParams {
    fn default() -> Self {
        MarginParams {
            sigma: 16.0,
            gamma: 0.1,
            beta1: 0.3,
            beta2: 0.7,
            margin_on_negatives: true,
            double_sigma: false,
            delta: 1e-10,
        }
    }
}

impl MarginParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.sigma > 0.0
            && self.gamma >= 0.0
            && self.beta1 >= 0.0
            && self.beta2 >= 0.0
            && self.beta1 + self.beta2 > 0.0
            && self.delta > 0.0
            && self.delta < 1.0;
        if !ok {
            return Err(ClearError::Config(format!("invalid margin parameters {self:?}")));
        }
        Ok(())
    }

    fn scale(&self) -> f64 {
        if self.double_sigma {
            self.sigma * self.sigma
        } else {
            self.sigma
        }
    }
}

/// Rows divided by their L2 norms; a zero row is an error.
pub fn l2_normalize_rows(x: &Tensor) -> Result<Tensor> {
    let norms = x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    let min = norms.flatten_all()?.to_dtype(DType::F64)?.min(0)?.to_scalar::<f64>()?;
    if !(min > 1e-12) {
        return Err(ClearError::DegenerateEmbedding(format!("embedding norm {min:e}")));
    }
    Ok(x.broadcast_div(&norms)?)
}

fn one_hot(targets: &[usize], classes: usize, dtype: DType) -> Result<Tensor> {
    let mut data = vec![0f64; targets.len() * classes];
    for (r, &t) in targets.iter().enumerate() {
        data[r * classes + t] = 1.0;
    }
    Ok(Tensor::from_vec(data, (targets.len(), classes), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Margin logits `scale · cos(α + γ)` for every (person, candidate) pair,
/// with `α` the clamped angle. The margin is applied to the target column
/// and, when `margin_on_negatives`, to every other column too.
pub fn margin_logits(f: &Tensor, g: &Tensor, targets: &[usize], p: &MarginParams) -> Result<Tensor> {
    let (b, d) = f.dims2()?;
    let (c, dg) = g.dims2()?;
    if d != dg {
        return Err(ClearError::DimMismatch(format!("person width {d} vs query width {dg}")));
    }
    if targets.len() != b {
        return Err(ClearError::DimMismatch(format!("{} targets for {b} persons", targets.len())));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
        return Err(ClearError::UnknownCategory(bad));
    }
    let cos = l2_normalize_rows(f)?
        .matmul(&l2_normalize_rows(g)?.t()?)?
        .clamp(-1.0 + p.delta, 1.0 - p.delta)?;
    let logits = if p.gamma == 0.0 {
        cos
    } else {
        let sin = (1.0 - cos.sqr()?)?.sqrt()?;
        let shifted = ((&cos * p.gamma.cos())? - (sin * p.gamma.sin())?)?;
        if p.margin_on_negatives {
            shifted
        } else {
            let mask = one_hot(targets, c, cos.dtype())?;
            (&cos + (shifted - &cos)?.mul(&mask)?)?
        }
    };
    Ok((logits * p.scale())?)
}

/// Mean over persons of `-log softmax(logits)[target]`.
pub fn margin_loss_batch(f: &Tensor, g: &Tensor, targets: &[usize], p: &MarginParams) -> Result<Tensor> {
    let logits = margin_logits(f, g, targets, p)?;
    let (b, c) = logits.dims2()?;
    let picked = (log_softmax_last(&logits)? * one_hot(targets, c, logits.dtype())?)?.sum_all()?;
    Ok((picked.neg()? / b as f64)?)
}

/// Loss of one person embedding against its positive and a set of negatives.
pub fn margin_loss(f: &[f64], g_pos: &[f64], g_negs: &[Vec<f64>], p: &MarginParams) -> Result<f64> {
    if g_negs.is_empty() {
        return Err(ClearError::Empty("margin loss needs at least one negative".into()));
    }
    let dev = Device::Cpu;
    let ft = Tensor::from_slice(f, (1, f.len()), &dev)?;
    let mut rows = vec![Tensor::from_slice(g_pos, (1, g_pos.len()), &dev)?];
    for g in g_negs {
        rows.push(Tensor::from_slice(g, (1, g.len()), &dev)?);
    }
    let gt = Tensor::cat(&rows, 0)?;
    Ok(margin_loss_batch(&ft, &gt, &[0], p)?.to_scalar::<f64>()?)
}

/// Weighted sum of the hard-pair and soft-pair margin losses. `e_p` is
/// (B, dim_vis), `e_h` and `e_s` are (C, dim_vis / 2), and `assignments[i]`
/// is person `i`'s category row.
pub fn total_loss(e_p: &Tensor, e_h: &Tensor, e_s: &Tensor, assignments: &[usize], p: &MarginParams) -> Result<Tensor> {
    let (_, dv) = e_p.dims2()?;
    let dq = e_h.dim(1)?;
    if dv != 2 * dq || e_s.dim(1)? != dq {
        return Err(ClearError::DimMismatch(format!(
            "person width {dv} must be twice the query width {dq}"
        )));
    }
    let hard = margin_loss_batch(&e_p.narrow(1, 0, dq)?, e_h, assignments, p)?;
    let soft = margin_loss_batch(&e_p.narrow(1, dq, dq)?, e_s, assignments, p)?;
    Ok(((hard * p.beta1)? + (soft * p.beta2)?)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ProviderConfig {
    Hash { dim: usize, seed: u64 },
    Table { path: PathBuf },
}

impl Default for ProviderConfig {
    fn default() -> Self {
        ProviderConfig::Hash { dim: DEFAULT_WORD_DIM, seed: 0 }
    }
}

impl ProviderConfig {
    pub fn build(&self) -> Result<Box<dyn EmbeddingProvider>> {
        Ok(match self {
            ProviderConfig::Hash { dim, seed } => {
                if *dim == 0 {
                    return Err(ClearError::Config("provider dim must be positive".into()));
                }
                Box::new(HashEmbeddingProvider::new(*dim, *seed))
            }
            ProviderConfig::Table { path } => Box::new(TableEmbeddingProvider::load(path)?),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetTrainConfig {
    pub dim_vis: usize,
    pub n_words: usize,
    pub provider: ProviderConfig,
    pub margin: MarginParams,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Restrict negatives to the categories present in each batch.
    pub in_batch_negatives: bool,
}

impl Default for RetTrainConfig {
    fn default() -> Self {
        RetTrainConfig {
            dim_vis: 512,
            n_words: DEFAULT_N_WORDS,
            provider: ProviderConfig::default(),
            margin: MarginParams::default(),
            steps: 300,
            batch_size: 64,
            lr: 1e-4,
            weight_decay: 0.01,
            in_batch_negatives: false,
        }
    }
}

impl RetTrainConfig {
    pub fn dim_query(&self) -> usize {
        self.dim_vis / 2
    }

    pub fn validate(&self) -> Result<()> {
        self.margin.validate()?;
        if self.dim_vis == 0 || self.dim_vis % 2 != 0 {
            return Err(ClearError::Config(format!("dim_vis {} must be a positive even number", self.dim_vis)));
        }
        if self.n_words == 0 || self.batch_size == 0 {
            return Err(ClearError::Config("n_words and batch_size must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(ClearError::Config("lr must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// The four adapters and the store that owns their parameters.
pub struct RetrievalHeads {
    store: ParamStore,
    pub f_vis: Adapter,
    pub f_attr: Adapter,
    pub f_text: Adapter,
    pub f_word: Adapter,
}

impl RetrievalHeads {
    pub fn new(feature_dim: usize, n_attr: usize, word_dim: usize, cfg: &RetTrainConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(HEADS_DTYPE, seed);
        let (dv, dq) = (cfg.dim_vis, cfg.dim_query());
        let text_in = cfg.n_words * word_dim;
        let f_vis = Adapter::new(&mut store, "f_vis", feature_dim, geometric_hidden(feature_dim, dv), dv)?;
        let f_attr = Adapter::new(&mut store, "f_attr", n_attr, geometric_hidden(n_attr, dq), dq)?;
        let f_text = Adapter::new(&mut store, "f_text", text_in, geometric_hidden(text_in, dq), dq)?;
        let f_word = Adapter::new(&mut store, "f_word", word_dim, geometric_hidden(word_dim, dq), dq)?;
        Ok(RetrievalHeads { store, f_vis, f_attr, f_text, f_word })
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn dim_vis(&self) -> usize {
        self.f_vis.out_dim()
    }

    pub fn dim_query(&self) -> usize {
        self.f_attr.out_dim()
    }
}

/// Distinct training attribute combinations and their query inputs.
pub struct CategoryTable {
    pub keys: Vec<AttributeVector>,
    index: BTreeMap<AttributeVector, usize>,
    /// (C, n_attr) binary inputs.
    pub hard: Tensor,
    /// (C, n_words · word_dim) flattened description embeddings.
    pub soft: Tensor,
    /// (C, word_dim) mean-pooled attribute words.
    pub word: Tensor,
}

/// Per-mode query inputs for one attribute vector.
pub struct QueryInputs {
    pub hard: Vec<f32>,
    pub soft: Vec<f32>,
    pub word: Vec<f32>,
}

pub fn query_inputs(
    schema: &AttributeSchema,
    provider: &dyn EmbeddingProvider,
    query: &AttributeVector,
    n_words: usize,
) -> Result<QueryInputs> {
    let desc = build_pseudo_description(schema, query, n_words)?;
    Ok(QueryInputs {
        hard: hard_embed(query),
        soft: soft_embed(&desc, provider)?.vector,
        word: word_embed(schema, query, provider)?,
    })
}

fn rows_tensor(rows: &[Vec<f32>]) -> Result<Tensor> {
    let width = rows.first().map_or(0, Vec::len);
    let flat: Vec<f32> = rows.iter().flatten().copied().collect();
    Ok(Tensor::from_vec(flat, (rows.len(), width), &Device::Cpu)?.to_dtype(HEADS_DTYPE)?)
}

impl CategoryTable {
    /// Categories are the distinct label vectors, numbered in sorted order.
    pub fn build(
        schema: &AttributeSchema,
        provider: &dyn EmbeddingProvider,
        labels: &[AttributeVector],
        n_words: usize,
    ) -> Result<Self> {
        if labels.is_empty() {
            return Err(ClearError::Empty("no training labels".into()));
        }
        let mut keys: Vec<AttributeVector> = labels.to_vec();
        keys.sort();
        keys.dedup();
        let index = keys.iter().enumerate().map(|(i, k)| (k.clone(), i)).collect();
        let inputs = keys
            .iter()
            .map(|k| query_inputs(schema, provider, k, n_words))
            .collect::<Result<Vec<_>>>()?;
        let col = |f: fn(&QueryInputs) -> &Vec<f32>| inputs.iter().map(|q| f(q).clone()).collect::<Vec<_>>();
        Ok(CategoryTable {
            hard: rows_tensor(&col(|q| &q.hard))?,
            soft: rows_tensor(&col(|q| &q.soft))?,
            word: rows_tensor(&col(|q| &q.word))?,
            keys,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn id(&self, attrs: &AttributeVector) -> Option<usize> {
        self.index.get(attrs).copied()
    }

    pub fn assign(&self, labels: &[AttributeVector]) -> Result<Vec<usize>> {
        labels
            .iter()
            .enumerate()
            .map(|(i, l)| self.id(l).ok_or(ClearError::UnknownCategory(i)))
            .collect()
    }
}

/// Backbone pre-logit features, computed in chunks and detached from the
/// backbone's parameters.
pub fn backbone_features(backbone: &Backbone, images: &Tensor, chunk: usize) -> Result<Tensor> {
    let n = images.dim(0)?;
    let mut parts = Vec::new();
    let mut start = 0;
    while start < n {
        let len = chunk.max(1).min(n - start);
        parts.push(backbone.forward(&images.narrow(0, start, len)?)?.feature.detach());
        start += len;
    }
    Ok(Tensor::cat(&parts, 0)?.to_dtype(HEADS_DTYPE)?)
}

/// Raw person embeddings `f_vis(feature)`, (N, dim_vis).
pub fn encode_person(backbone: &Backbone, heads: &RetrievalHeads, images: &Tensor) -> Result<Tensor> {
    heads.f_vis.forward(&backbone_features(backbone, images, 64)?)
}

/// Unit-norm person embedding used for search: both halves normalized,
/// concatenated and scaled by `1/√2`.
pub fn person_search_embedding(e_p: &Tensor) -> Result<Tensor> {
    let dq = e_p.dim(1)? / 2;
    let a = l2_normalize_rows(&e_p.narrow(1, 0, dq)?)?;
    let b = l2_normalize_rows(&e_p.narrow(1, dq, dq)?)?;
    Ok((Tensor::cat(&[a, b], 1)? * std::f64::consts::FRAC_1_SQRT_2)?)
}

/// Which query encodings take part in a search.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum QueryMode {
    #[serde(rename = "hard")]
    Hard,
    #[serde(rename = "soft")]
    Soft,
    #[serde(rename = "word")]
    Word,
    #[serde(rename = "hard+soft")]
    HardSoft,
}

impl QueryMode {
    pub const ALL: [QueryMode; 4] = [QueryMode::Hard, QueryMode::Soft, QueryMode::Word, QueryMode::HardSoft];

    pub fn name(self) -> &'static str {
        match self {
            QueryMode::Hard => "hard",
            QueryMode::Soft => "soft",
            QueryMode::Word => "word",
            QueryMode::HardSoft => "hard+soft",
        }
    }
}

impl std::str::FromStr for QueryMode {
    type Err = ClearError;

    fn from_str(s: &str) -> Result<Self> {
        QueryMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| ClearError::Config(format!("unknown query mode {s:?}")))
    }
}

/// Query encodings of one attribute vector.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryEncoding {
    pub hard: Vec<f64>,
    pub soft: Vec<f64>,
    pub word: Vec<f64>,
    /// `concat(hard, soft)`, of length dim_vis.
    pub combined: Vec<f64>,
}

fn unit(v: &[f64]) -> Result<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n > 1e-12) {
        return Err(ClearError::DegenerateEmbedding(format!("query embedding norm {n:e}")));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

impl QueryEncoding {
    /// Search vector in the person-embedding space for `mode`. Unused halves
    /// are zero, so the score reduces to the cosine of the active halves.
    pub fn search_vector(&self, mode: QueryMode) -> Result<Vec<f64>> {
        let zeros = vec![0.0; self.hard.len()];
        Ok(match mode {
            QueryMode::Hard => [unit(&self.hard)?, zeros].concat(),
            QueryMode::Soft => [zeros, unit(&self.soft)?].concat(),
            QueryMode::Word => [zeros, unit(&self.word)?].concat(),
            QueryMode::HardSoft => {
                let s = std::f64::consts::FRAC_1_SQRT_2;
                [unit(&self.hard)?, unit(&self.soft)?].concat().into_iter().map(|x| x * s).collect()
            }
        })
    }
}

fn row(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

pub fn encode_query(
    schema: &AttributeSchema,
    provider: &dyn EmbeddingProvider,
    heads: &RetrievalHeads,
    query: &AttributeVector,
    n_words: usize,
) -> Result<QueryEncoding> {
    let q = query_inputs(schema, provider, query, n_words)?;
    let one = |v: &Vec<f32>| rows_tensor(std::slice::from_ref(v));
    let hard = row(&heads.f_attr.forward(&one(&q.hard)?)?)?;
    let soft = row(&heads.f_text.forward(&one(&q.soft)?)?)?;
    let word = row(&heads.f_word.forward(&one(&q.word)?)?)?;
    let combined = [hard.clone(), soft.clone()].concat();
    Ok(QueryEncoding { hard, soft, word, combined })
}

/// Loss curve and contract measurements from a retrieval training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetTrainLog {
    pub losses: Vec<f64>,
    /// L2 norm of the loss gradient reaching backbone parameters, measured
    /// on a step that runs the backbone live.
    pub backbone_grad_norm: f64,
    pub backbone_hash_before: String,
    pub backbone_hash_after: String,
}

/// Sum of squared gradients over `store`'s parameters, square-rooted.
pub fn grad_norm(grads: &candle_core::backprop::GradStore, store: &ParamStore) -> Result<f64> {
    let mut total = 0.0;
    for var in store.vars().values() {
        if let Some(g) = grads.get(var.as_tensor()) {
            total += g.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
        }
    }
    Ok(total.sqrt())
}

fn objective(
    heads: &RetrievalHeads,
    table: &CategoryTable,
    features: &Tensor,
    assignments: &[usize],
    cfg: &RetTrainConfig,
) -> Result<(Tensor, Tensor)> {
    let (hard_in, soft_in, word_in, targets) = if cfg.in_batch_negatives {
        let mut present: Vec<usize> = assignments.to_vec();
        present.sort_unstable();
        present.dedup();
        let remap: BTreeMap<usize, usize> = present.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        let idx = Tensor::new(present.iter().map(|&c| c as u32).collect::<Vec<_>>().as_slice(), &Device::Cpu)?;
        (
            table.hard.index_select(&idx, 0)?,
            table.soft.index_select(&idx, 0)?,
            table.word.index_select(&idx, 0)?,
            assignments.iter().map(|c| remap[c]).collect::<Vec<_>>(),
        )
    } else {
        (table.hard.clone(), table.soft.clone(), table.word.clone(), assignments.to_vec())
    };
    let e_p = heads.f_vis.forward(features)?;
    let e_h = heads.f_attr.forward(&hard_in)?;
    let e_s = heads.f_text.forward(&soft_in)?;
    let main = total_loss(&e_p, &e_h, &e_s, &targets, &cfg.margin)?;
    let dq = heads.dim_query();
    let word = margin_loss_batch(
        &e_p.narrow(1, dq, dq)?.detach(),
        &heads.f_word.forward(&word_in)?,
        &targets,
        &cfg.margin,
    )?;
    Ok((main, word))
}

/// Optimizes the adapters against a frozen backbone. Returns the per-step
/// value of the weighted hard/soft objective.
pub fn train_ret(
    backbone: &Backbone,
    heads: &RetrievalHeads,
    table: &CategoryTable,
    data: &SplitData,
    cfg: &RetTrainConfig,
    seed: u64,
) -> Result<RetTrainLog> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(ClearError::Empty("training split is empty".into()));
    }
    let hash_before = backbone.params().content_hash()?;
    let assignments = table.assign(&data.labels)?;
    let features = backbone_features(backbone, &data.images, 64)?;
    let opt_cfg = AdamWConfig { lr: cfg.lr, weight_decay: cfg.weight_decay, ..Default::default() };
    let mut opt = AdamW::new(heads.params().vars(), opt_cfg)?;
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut backbone_grad = 0.0;
    for step in 0..cfg.steps {
        let idx = batch_indices(data.len(), cfg.batch_size, seed, step);
        let batch_assign: Vec<usize> = idx.iter().map(|&i| assignments[i as usize]).collect();
        let idx = Tensor::new(idx.as_slice(), &Device::Cpu)?;
        let feats = if step == 0 {
            // One live pass through the backbone so the gradient reaching its
            // parameters is measured rather than assumed.
            backbone_features(backbone, &data.images.index_select(&idx, 0)?, 64)?
        } else {
            features.index_select(&idx, 0)?
        };
        let (main, word) = objective(heads, table, &feats, &batch_assign, cfg)?;
        let value = main.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Err(ClearError::Numeric(format!(
                "non-finite retrieval loss {value} at step {step}; previous {:?}",
                losses.last()
            )));
        }
        let grads = (&main + &word)?.backward()?;
        if step == 0 {
            backbone_grad = grad_norm(&grads, backbone.params())?;
        }
        opt.step(&grads, cosine_lr(cfg.lr, step, cfg.steps))?;
        losses.push(value);
    }
    Ok(RetTrainLog {
        losses,
        backbone_grad_norm: backbone_grad,
        backbone_hash_before: hash_before,
        backbone_hash_after: backbone.params().content_hash()?,
    })
}

/// Everything needed to rebuild heads from an archive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadsConfig {
    pub feature_dim: usize,
    pub n_attr: usize,
    pub word_dim: usize,
    pub seed: u64,
    pub train: RetTrainConfig,
}

pub fn save_heads(
    path: impl AsRef<Path>,
    heads: &RetrievalHeads,
    cfg: &HeadsConfig,
    backbone_hash: &str,
    schema_hash: &str,
) -> Result<()> {
    let mut ck = Checkpoint::new(HEADS_KIND, serde_json::to_value(cfg)?);
    ck.insert_store("", heads.params())?;
    ck.meta.insert("frozen_backbone_hash".into(), backbone_hash.into());
    ck.meta.insert("schema_hash".into(), schema_hash.into());
    ck.save(path)
}

/// Loads heads and checks they were trained against `backbone`.
pub fn load_heads(path: impl AsRef<Path>, backbone: &Backbone, schema_hash: &str) -> Result<(RetrievalHeads, HeadsConfig)> {
    let ck = Checkpoint::load(path)?;
    ck.expect_kind(HEADS_KIND)?;
    let found = ck.meta_str("schema_hash").unwrap_or_default();
    if found != schema_hash {
        return Err(ClearError::SchemaMismatch { expected: schema_hash.to_string(), found: found.to_string() });
    }
    let actual = backbone.params().content_hash()?;
    let bound = ck.meta_str("frozen_backbone_hash").unwrap_or_default();
    if bound != actual {
        return Err(ClearError::Checkpoint(format!(
            "heads were trained against backbone {bound}, but the loaded backbone is {actual}"
        )));
    }
    let cfg: HeadsConfig = serde_json::from_value(ck.config.clone())
        .map_err(|e| ClearError::Checkpoint(format!("bad heads config: {e}")))?;
    let heads = RetrievalHeads::new(cfg.feature_dim, cfg.n_attr, cfg.word_dim, &cfg.train, cfg.seed)?;
    ck.load_into("", heads.params())?;
    Ok((heads, cfg))
}
