//! Run configuration: a TOML file, `section.key=value` overrides, and the
//! `CLEAR_SEED` environment variable, merged in that order.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::error::{ClearError, Result};
use crate::eval::RelevanceRule;
use crate::par::ParTrainConfig;
use crate::retrieval::RetTrainConfig;
use crate::schema::AttributeSchema;
use crate::synth::SynthConfig;

pub const SEED_ENV: &str = "CLEAR_SEED";

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    #[default]
    Tiny,
    Full,
}

/// Backbone layout: a preset with optional per-field overrides. The number
/// of attributes always comes from the schema.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneSection {
    pub preset: Preset,
    pub image_hw: Option<[usize; 2]>,
    pub swin_patch: Option<usize>,
    pub swin_dims: Option<Vec<usize>>,
    pub swin_depths: Option<Vec<usize>>,
    pub window: Option<usize>,
    pub vit_patch: Option<usize>,
    pub vit_dim: Option<usize>,
    pub vit_depth: Option<usize>,
    pub fusion_dim: Option<usize>,
    pub swin_heads: Option<Vec<usize>>,
    pub vit_heads: Option<usize>,
    pub fusion_heads: Option<usize>,
    pub casa_value_path: Option<bool>,
}

impl BackboneSection {
    pub fn resolve(&self, n_attr: usize) -> Result<BackboneConfig> {
        let mut c = match self.preset {
            Preset::Tiny => BackboneConfig::tiny(n_attr),
            Preset::Full => BackboneConfig::full(n_attr),
        };
        macro_rules! apply {
            ($($f:ident),*) => { $( if let Some(v) = &self.$f { c.$f = v.clone(); } )* };
        }
        apply!(image_hw, swin_patch, swin_dims, swin_depths, window, vit_patch, vit_dim, vit_depth, fusion_dim);
        if self.swin_heads.is_some() {
            c.swin_heads = self.swin_heads.clone();
        }
        if self.vit_heads.is_some() {
            c.vit_heads = self.vit_heads;
        }
        if self.fusion_heads.is_some() {
            c.fusion_heads = self.fusion_heads;
        }
        if let Some(v) = self.casa_value_path {
            c.casa_value_path = v;
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub relevance: RelevanceRule,
    /// Results per query written by `search`.
    pub k: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { relevance: RelevanceRule::Exact, k: 10 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Attribute schema file; the built-in synthetic schema when absent.
    pub schema: Option<PathBuf>,
    pub backbone: BackboneSection,
    pub par_train: ParTrainConfig,
    pub ret_train: RetTrainConfig,
    pub eval: EvalConfig,
    pub synth: SynthConfig,
}

fn parse_override(text: &str) -> Result<(Vec<String>, toml::Value)> {
    let (key, raw) = text
        .split_once('=')
        .ok_or_else(|| ClearError::Config(format!("override {text:?} is not key=value")))?;
    let path: Vec<String> = key.trim().split('.').map(str::to_string).collect();
    if path.iter().any(String::is_empty) {
        return Err(ClearError::Config(format!("bad override key {key:?}")));
    }
    // Values are TOML literals; anything that does not parse is a bare string.
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.trim().to_string()));
    Ok((path, value))
}

fn set_path(table: &mut toml::Table, path: &[String], value: toml::Value) -> Result<()> {
    let (last, parents) = path.split_last().expect("non-empty path");
    let mut cur = table;
    for p in parents {
        cur = cur
            .entry(p.clone())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| ClearError::Config(format!("{p} is not a section")))?;
    }
    cur.insert(last.clone(), value);
    Ok(())
}

impl RunConfig {
    /// Merges file, overrides and the seed variable, then validates.
    pub fn resolve(file: Option<&Path>, overrides: &[String], env_seed: Option<&str>) -> Result<Self> {
        let mut table = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| ClearError::io(p, e))?;
                toml::from_str::<toml::Table>(&text)
                    .map_err(|e| ClearError::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            let (path, value) = parse_override(o)?;
            set_path(&mut table, &path, value)?;
        }
        if let Some(s) = env_seed {
            let seed: u64 = s
                .trim()
                .parse()
                .map_err(|_| ClearError::Config(format!("{SEED_ENV}={s:?} is not an unsigned integer")))?;
            let seed = i64::try_from(seed).map_err(|_| ClearError::Config(format!("{SEED_ENV} too large")))?;
            table.insert("seed".into(), toml::Value::Integer(seed));
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| ClearError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load_schema(&self) -> Result<AttributeSchema> {
        match &self.schema {
            Some(p) => AttributeSchema::load(p),
            None => Ok(AttributeSchema::synthetic_default()),
        }
    }

    pub fn backbone_config(&self, schema: &AttributeSchema) -> Result<BackboneConfig> {
        self.backbone.resolve(schema.n_attr())
    }

    pub fn validate(&self) -> Result<()> {
        let schema = self.load_schema()?;
        let bb = self.backbone_config(&schema)?;
        if bb.image_hw != self.synth.image_hw {
            return Err(ClearError::Config(format!(
                "backbone image size {:?} differs from synth image size {:?}",
                bb.image_hw, self.synth.image_hw
            )));
        }
        self.par_train.validate()?;
        self.ret_train.validate()?;
        self.synth.validate(&schema)?;
        if self.eval.k == 0 {
            return Err(ClearError::Config("eval.k must be positive".into()));
        }
        Ok(())
    }

    /// The fully resolved configuration, as echoed into reports.
    pub fn echo(&self) -> Result<serde_json::Value> {
        let schema = self.load_schema()?;
        let mut v = serde_json::to_value(self)?;
        v["backbone_resolved"] = serde_json::to_value(self.backbone_config(&schema)?)?;
        v["schema_hash"] = schema.hash().into();
        Ok(v)
    }
}
