//! Attribute vocabulary and binary attribute vectors.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ClearError, Result};
use crate::query::TEMPLATE_TAGS;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Attribute {
    pub name: String,
    pub group: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TagBinding {
    pub index: usize,
    pub word: String,
}

/// Named attributes plus the template-tag bindings used to render pseudo
/// descriptions. Tags are keyed by their template name (`AGE`, `UPPER COLOR`, ...).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeSchema {
    attributes: Vec<Attribute>,
    tags: BTreeMap<String, Vec<TagBinding>>,
}

const SYNTHETIC_SCHEMA: &str = include_str!("../data/synthetic_schema.json");

impl AttributeSchema {
    pub fn new(
        attributes: Vec<Attribute>,
        tags: BTreeMap<String, Vec<TagBinding>>,
    ) -> Result<Self> {
        let schema = AttributeSchema { attributes, tags };
        schema.validate()?;
        Ok(schema)
    }

    /// The eight-attribute vocabulary used by the synthetic data generator.
    pub fn synthetic_default() -> Self {
        Self::from_json(SYNTHETIC_SCHEMA).expect("bundled schema is valid")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let schema: AttributeSchema = serde_json::from_str(text)?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| ClearError::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| ClearError::io(path, e))
    }

    fn validate(&self) -> Result<()> {
        if self.attributes.is_empty() {
            return Err(ClearError::InvalidSchema("no attributes".into()));
        }
        let mut names = HashSet::new();
        for attr in &self.attributes {
            if !names.insert(attr.name.as_str()) {
                return Err(ClearError::InvalidSchema(format!(
                    "duplicate attribute name {:?}",
                    attr.name
                )));
            }
        }
        let mut owner: BTreeMap<usize, &str> = BTreeMap::new();
        for (tag, bindings) in &self.tags {
            if !TEMPLATE_TAGS.contains(&tag.as_str()) {
                return Err(ClearError::InvalidSchema(format!(
                    "tag {tag:?} does not appear in the description template"
                )));
            }
            if bindings.is_empty() {
                return Err(ClearError::InvalidSchema(format!("tag {tag:?} binds no attribute")));
            }
            for b in bindings {
                if b.index >= self.attributes.len() {
                    return Err(ClearError::InvalidSchema(format!(
                        "tag {tag:?} references attribute {} but the schema has {}",
                        b.index,
                        self.attributes.len()
                    )));
                }
                if b.word.trim().is_empty() {
                    return Err(ClearError::InvalidSchema(format!(
                        "tag {tag:?} has an empty surface word for attribute {}",
                        b.index
                    )));
                }
                if let Some(prev) = owner.insert(b.index, tag) {
                    if prev != tag {
                        return Err(ClearError::InvalidSchema(format!(
                            "attribute {} is bound to both {prev:?} and {tag:?}",
                            b.index
                        )));
                    }
                    return Err(ClearError::InvalidSchema(format!(
                        "attribute {} is bound twice under {tag:?}",
                        b.index
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn n_attr(&self) -> usize {
        self.attributes.len()
    }

    pub fn attributes(&self) -> &[Attribute] {
        &self.attributes
    }

    pub fn tags(&self) -> &BTreeMap<String, Vec<TagBinding>> {
        &self.tags
    }

    pub fn tag(&self, tag: &str) -> Option<&[TagBinding]> {
        self.tags.get(tag).map(Vec::as_slice)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.attributes.iter().position(|a| a.name == name)
    }

    /// Surface word for an attribute, falling back to its name with
    /// underscores replaced by spaces when no tag binds it.
    pub fn surface_word(&self, index: usize) -> Option<String> {
        self.tags
            .values()
            .flatten()
            .find(|b| b.index == index)
            .map(|b| b.word.clone())
            .or_else(|| self.attributes.get(index).map(|a| a.name.replace('_', " ")))
    }

    /// Stable content hash, used to bind manifests and checkpoints to a schema.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("schema serializes");
        let digest = Sha256::digest(&canonical);
        hex::encode(&digest[..8])
    }

    /// Builds a query from attribute names; unknown names are rejected.
    pub fn query_from_names(&self, names: &[&str]) -> Result<AttributeVector> {
        let mut bits = vec![0u8; self.n_attr()];
        for name in names {
            let i = self
                .index_of(name)
                .ok_or_else(|| ClearError::InvalidQuery(format!("unknown attribute {name:?}")))?;
            bits[i] = 1;
        }
        Ok(AttributeVector(bits))
    }
}

/// Binary attribute vector (a query or a ground-truth label).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "Vec<u8>", into = "Vec<u8>")]
pub struct AttributeVector(Vec<u8>);

impl AttributeVector {
    pub fn new(bits: Vec<u8>) -> Result<Self> {
        if let Some(v) = bits.iter().find(|&&b| b > 1) {
            return Err(ClearError::InvalidQuery(format!("attribute value {v} is not 0/1")));
        }
        Ok(AttributeVector(bits))
    }

    pub fn zeros(n: usize) -> Self {
        AttributeVector(vec![0; n])
    }

    pub fn ones(n: usize) -> Self {
        AttributeVector(vec![1; n])
    }

    /// Little-endian bit decomposition of `code` over `n` attributes.
    pub fn from_code(code: u64, n: usize) -> Self {
        AttributeVector((0..n).map(|i| ((code >> i) & 1) as u8).collect())
    }

    pub fn code(&self) -> u64 {
        self.0
            .iter()
            .enumerate()
            .fold(0u64, |acc, (i, &b)| acc | (u64::from(b) << i))
    }

    pub fn bits(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, i: usize) -> bool {
        self.0[i] == 1
    }

    pub fn active(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().enumerate().filter(|(_, &b)| b == 1).map(|(i, _)| i)
    }

    pub fn count_ones(&self) -> usize {
        self.0.iter().filter(|&&b| b == 1).count()
    }

    pub fn check(&self, schema: &AttributeSchema) -> Result<()> {
        if self.len() != schema.n_attr() {
            return Err(ClearError::InvalidQuery(format!(
                "query has {} attributes, schema has {}",
                self.len(),
                schema.n_attr()
            )));
        }
        Ok(())
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.0.iter().map(|&b| f32::from(b)).collect()
    }
}

impl TryFrom<Vec<u8>> for AttributeVector {
    type Error = ClearError;

    fn try_from(bits: Vec<u8>) -> Result<Self> {
        AttributeVector::new(bits)
    }
}

impl From<AttributeVector> for Vec<u8> {
    fn from(v: AttributeVector) -> Self {
        v.0
    }
}

impl fmt::Display for AttributeVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in &self.0 {
            write!(f, "{b}")?;
        }
        Ok(())
    }
}

/// Reads a query file: JSON lines, one binary array per line. Blank lines are skipped.
pub fn load_queries(path: impl AsRef<Path>, schema: &AttributeSchema) -> Result<Vec<AttributeVector>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| ClearError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: String| ClearError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let q: AttributeVector = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        q.check(schema).map_err(|e| parse_err(e.to_string()))?;
        out.push(q);
    }
    if out.is_empty() {
        return Err(ClearError::Empty(format!("{} contains no queries", path.display())));
    }
    Ok(out)
}
