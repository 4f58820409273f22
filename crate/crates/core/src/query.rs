//! Query construction: pseudo descriptions rendered from binary attribute
//! queries, their word embeddings (soft query) and the binary form (hard query).

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{ClearError, Result};
use crate::schema::{AttributeSchema, AttributeVector};

pub const DEFAULT_N_WORDS: usize = 48;
pub const DEFAULT_WORD_DIM: usize = 768;
pub const PAD_WORD: &str = "<pad>";
pub const UNKNOWN_WORD: &str = "unknown";

#[derive(Debug, Clone, Copy)]
enum Fill {
    /// Always rendered; "unknown" when no attribute under the tag is active.
    Required,
    /// Dropped together with its auxiliary words when nothing is active.
    Optional,
    /// Rendered with a fixed word when nothing is active.
    Default(&'static str),
}

#[derive(Debug, Clone, Copy)]
struct Slot {
    tag: &'static str,
    fill: Fill,
    multi: bool,
    before: &'static str,
    after: &'static str,
}

#[derive(Debug, Clone, Copy)]
enum Piece {
    Text(&'static str),
    Slot(Slot),
}

const fn req(tag: &'static str) -> Piece {
    Piece::Slot(Slot { tag, fill: Fill::Required, multi: false, before: "", after: "" })
}

const fn multi(tag: &'static str) -> Piece {
    Piece::Slot(Slot { tag, fill: Fill::Required, multi: true, before: "", after: "" })
}

const fn opt(before: &'static str, tag: &'static str, after: &'static str, multi: bool) -> Piece {
    Piece::Slot(Slot { tag, fill: Fill::Optional, multi, before, after })
}

const TEMPLATE: &[Piece] = &[
    Piece::Text("This is a photo of"),
    req("AGE"),
    req("GENDER"),
    opt("taken from", "CAMERA ANGLE", "", false),
    Piece::Text("with"),
    req("HAIR LENGTH"),
    Piece::Text("hair, is dressed in a"),
    req("LOWER COLOR"),
    req("LOWER BODY CLOTHING"),
    Piece::Text("and a"),
    req("UPPER COLOR"),
    req("UPPER BODY CLOTHING"),
    Piece::Text("with"),
    req("SLEEVES LENGTH"),
    Piece::Text("sleeves"),
    opt("with", "UPPER BODY MOTIF", "motif", false),
    Piece::Text(", is"),
    Piece::Slot(Slot {
        tag: "WEARING",
        fill: Fill::Default("wearing"),
        multi: false,
        before: "",
        after: "",
    }),
    Piece::Text("a"),
    multi("ACCESSORY"),
    Piece::Text(", carrying"),
    multi("BAG"),
    opt("and", "BACKPACK", "", true),
    Piece::Text("."),
];

/// Every tag name the description template can fill.
pub const TEMPLATE_TAGS: &[&str] = &[
    "AGE",
    "GENDER",
    "CAMERA ANGLE",
    "HAIR LENGTH",
    "LOWER COLOR",
    "LOWER BODY CLOTHING",
    "UPPER COLOR",
    "UPPER BODY CLOTHING",
    "SLEEVES LENGTH",
    "UPPER BODY MOTIF",
    "WEARING",
    "ACCESSORY",
    "BAG",
    "BACKPACK",
];

/// A rendered description and its fixed-length word list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudoDescription {
    pub text: String,
    pub words: Vec<String>,
}

impl PseudoDescription {
    /// A description made entirely of pad words.
    pub fn padding(n_words: usize) -> Self {
        PseudoDescription {
            text: String::new(),
            words: vec![PAD_WORD.to_string(); n_words],
        }
    }
}

fn active_words<'a>(
    schema: &'a AttributeSchema,
    query: &AttributeVector,
    tag: &str,
) -> Vec<(usize, &'a str)> {
    schema
        .tag(tag)
        .unwrap_or(&[])
        .iter()
        .filter(|b| query.get(b.index))
        .map(|b| (b.index, b.word.as_str()))
        .collect()
}

fn push_piece(text: &mut String, piece: &str) {
    if piece.is_empty() {
        return;
    }
    if !text.is_empty() && !piece.starts_with([',', '.']) {
        text.push(' ');
    }
    text.push_str(piece);
}

/// Lowercases and splits on whitespace and punctuation. Hyphens and
/// apostrophes inside a word are kept (`t-shirt`).
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| c.is_whitespace() || (c.is_ascii_punctuation() && c != '-' && c != '\''))
        .map(|w| w.trim_matches(|c: char| c == '-' || c == '\''))
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

pub fn build_pseudo_description(
    schema: &AttributeSchema,
    query: &AttributeVector,
    n_words: usize,
) -> Result<PseudoDescription> {
    query.check(schema)?;
    if n_words == 0 {
        return Err(ClearError::Config("description length must be positive".into()));
    }
    let mut text = String::new();
    for piece in TEMPLATE {
        match piece {
            Piece::Text(t) => push_piece(&mut text, t),
            Piece::Slot(slot) => {
                let words = active_words(schema, query, slot.tag);
                if !slot.multi && words.len() > 1 {
                    return Err(ClearError::AmbiguousQuery {
                        tag: slot.tag.to_string(),
                        indices: words.iter().map(|(i, _)| *i).collect(),
                    });
                }
                let filled = words.iter().map(|(_, w)| *w).collect::<Vec<_>>().join(" and ");
                if filled.is_empty() {
                    match slot.fill {
                        Fill::Required => push_piece(&mut text, UNKNOWN_WORD),
                        Fill::Default(word) => push_piece(&mut text, word),
                        Fill::Optional => {}
                    }
                } else {
                    push_piece(&mut text, slot.before);
                    push_piece(&mut text, &filled);
                    push_piece(&mut text, slot.after);
                }
            }
        }
    }
    let text = text.to_lowercase();
    let mut words = tokenize(&text);
    words.truncate(n_words);
    words.resize(n_words, PAD_WORD.to_string());
    Ok(PseudoDescription { text, words })
}

/// Source of per-word embedding vectors.
pub trait EmbeddingProvider: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, word: &str) -> Result<Vec<f32>>;
}

/// Deterministic pseudo-embedding: each word maps to a unit vector drawn from
/// a generator seeded by a hash of (seed, word).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashEmbeddingProvider {
    pub dim: usize,
    pub seed: u64,
}

impl HashEmbeddingProvider {
    pub fn new(dim: usize, seed: u64) -> Self {
        HashEmbeddingProvider { dim, seed }
    }
}

fn fnv1a(seed: u64, word: &str) -> u64 {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    seed.to_le_bytes()
        .iter()
        .chain(word.as_bytes())
        .fold(OFFSET, |h, &b| (h ^ u64::from(b)).wrapping_mul(PRIME))
}

impl EmbeddingProvider for HashEmbeddingProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, word: &str) -> Result<Vec<f32>> {
        let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(self.seed, word));
        let v: Vec<f64> = (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
        Ok(v.into_iter().map(|x| (x / norm) as f32).collect())
    }
}

/// Word vectors read from a JSON object `{word: [f32, ...]}`. Lookups of
/// words missing from the table fail; there is no fallback vector.
#[derive(Debug, Clone)]
pub struct TableEmbeddingProvider {
    dim: usize,
    table: BTreeMap<String, Vec<f32>>,
}

impl TableEmbeddingProvider {
    pub fn new(table: BTreeMap<String, Vec<f32>>) -> Result<Self> {
        let dim = table
            .values()
            .next()
            .map(Vec::len)
            .ok_or_else(|| ClearError::ProviderUnavailable("empty embedding table".into()))?;
        if dim == 0 || table.values().any(|v| v.len() != dim) {
            return Err(ClearError::ProviderUnavailable("inconsistent embedding widths".into()));
        }
        Ok(TableEmbeddingProvider { dim, table })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| ClearError::io(path, e))?;
        Self::new(serde_json::from_str(&text)?)
    }
}

impl EmbeddingProvider for TableEmbeddingProvider {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, word: &str) -> Result<Vec<f32>> {
        self.table
            .get(word)
            .cloned()
            .ok_or_else(|| ClearError::ProviderUnavailable(format!("no vector for {word:?}")))
    }
}

/// Flattened word embeddings of a description (`n_words * dim` values).
#[derive(Debug, Clone, PartialEq)]
pub struct SoftQueryEmbedding {
    pub vector: Vec<f32>,
}

fn checked_embed(provider: &dyn EmbeddingProvider, word: &str) -> Result<Vec<f32>> {
    let v = provider.embed(word)?;
    if v.len() != provider.dim() {
        return Err(ClearError::ProviderUnavailable(format!(
            "provider returned {} values for {word:?}, expected {}",
            v.len(),
            provider.dim()
        )));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(ClearError::ProviderUnavailable(format!("non-finite embedding for {word:?}")));
    }
    Ok(v)
}

pub fn soft_embed(
    desc: &PseudoDescription,
    provider: &dyn EmbeddingProvider,
) -> Result<SoftQueryEmbedding> {
    let dim = provider.dim();
    if dim == 0 {
        return Err(ClearError::Config("embedding dimension must be positive".into()));
    }
    let mut vector = Vec::with_capacity(desc.words.len() * dim);
    for word in &desc.words {
        vector.extend(checked_embed(provider, word)?);
    }
    Ok(SoftQueryEmbedding { vector })
}

pub fn hard_embed(query: &AttributeVector) -> Vec<f32> {
    query.to_f32()
}

/// Mean of the word embeddings of the active attributes' surface words,
/// without the template. An empty query embeds the word "unknown".
pub fn word_embed(
    schema: &AttributeSchema,
    query: &AttributeVector,
    provider: &dyn EmbeddingProvider,
) -> Result<Vec<f32>> {
    query.check(schema)?;
    let mut words = Vec::new();
    for i in query.active() {
        let surface = schema.surface_word(i).unwrap_or_default();
        words.extend(tokenize(&surface));
    }
    if words.is_empty() {
        words.push(UNKNOWN_WORD.to_string());
    }
    let dim = provider.dim();
    let mut acc = vec![0f64; dim];
    for w in &words {
        for (a, x) in acc.iter_mut().zip(checked_embed(provider, w)?) {
            *a += f64::from(x);
        }
    }
    let n = words.len() as f64;
    Ok(acc.into_iter().map(|a| (a / n) as f32).collect())
}
