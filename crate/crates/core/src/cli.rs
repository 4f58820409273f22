//! Command-line front end.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use candle_core::DType;
use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::{RunConfig, SEED_ENV};
use crate::error::{ClearError, Result};
use crate::eval::results_jsonl;
use crate::par::{evaluate_par, load_backbone, train_par, CheckpointSink, TrainState};
use crate::pipeline::{build_gallery_index, distinct_queries, evaluate_mode, rank_queries, QueryEncoder};
use crate::report::{self, make_report, to_pretty, validate_report};
use crate::retrieval::{load_heads, save_heads, train_ret, CategoryTable, HeadsConfig, QueryMode, RetrievalHeads};
use crate::schema::{load_queries, AttributeSchema};
use crate::synth::{generate_dataset, load_manifest, Manifest, Split, SplitData};

#[derive(Parser, Debug)]
#[command(name = "clear", version, about = "Attribute recognition and attribute-based person retrieval")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug)]
pub struct GlobalArgs {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a configuration value, e.g. `--set par_train.steps=50`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render a synthetic dataset and its manifest.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Train the backbone on the train split.
    TrainPar {
        /// Dataset directory or manifest file.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Recognition metrics of a backbone checkpoint on one split.
    EvalPar {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "query", value_parser = parse_split)]
        split: Split,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Train the retrieval adapters against a frozen backbone.
    TrainRet {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        par_ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Retrieval metrics on the gallery split, queried with the query split's attribute vectors.
    EvalRet {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        heads: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// hard, soft, word, hard+soft, or all.
        #[arg(long, default_value = "all")]
        query_mode: String,
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Rank a gallery for each query in a JSON-lines file of attribute vectors.
    Search {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        heads: PathBuf,
        /// Manifest whose gallery split is searched.
        #[arg(long)]
        gallery: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, default_value = "hard+soft")]
        query_mode: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check report files against their schemas.
    ValidateReport { files: Vec<PathBuf> },
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "gallery" => Ok(Split::Gallery),
        "query" => Ok(Split::Query),
        _ => Err(format!("unknown split {s:?}")),
    }
}

fn parse_modes(s: &str) -> Result<Vec<QueryMode>> {
    if s == "all" {
        Ok(QueryMode::ALL.to_vec())
    } else {
        Ok(vec![s.parse()?])
    }
}

fn write_text(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| ClearError::io(p, e)),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn emit(path: Option<&Path>, kind: &str, body: &Value, cfg: &RunConfig) -> Result<()> {
    let rep = make_report(kind, body, &cfg.echo()?)?;
    validate_report(&rep)?;
    write_text(path, &to_pretty(&rep)?)
}

/// A dataset argument may name the directory or the manifest inside it.
fn manifest_path(data: &Path) -> PathBuf {
    if data.is_dir() {
        data.join("manifest.jsonl")
    } else {
        data.to_path_buf()
    }
}

fn open_dataset(data: &Path, schema: &AttributeSchema) -> Result<(Manifest, PathBuf)> {
    let path = manifest_path(data);
    let manifest = load_manifest(&path, schema)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((manifest, base))
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| ClearError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn run(cli: Cli) -> Result<()> {
    let env_seed = std::env::var(SEED_ENV).ok();
    let cfg = RunConfig::resolve(cli.global.config.as_deref(), &cli.global.overrides, env_seed.as_deref())?;
    let schema = cfg.load_schema()?;
    match cli.command {
        Command::GenData { out, report } => {
            let synth = crate::synth::SynthConfig { seed: cfg.seed, ..cfg.synth.clone() };
            let manifest = generate_dataset(&synth, &schema, &out)?;
            let body = json!({
                "train": manifest.split(Split::Train).len(),
                "gallery": manifest.split(Split::Gallery).len(),
                "query": manifest.split(Split::Query).len(),
                "categories": synth.n_categories,
                "unseen_categories": synth.n_unseen(),
                "manifest_sha256": sha256_file(&out.join("manifest.jsonl"))?,
            });
            emit(report.as_deref(), report::GEN_DATA, &body, &cfg)
        }
        Command::TrainPar { data, out, resume, report } => {
            let (manifest, base) = open_dataset(&data, &schema)?;
            let train = SplitData::load(&manifest, &base, Split::Train)?;
            let mut state = match resume {
                Some(p) => {
                    let mut s = TrainState::from_checkpoint(&crate::checkpoint::Checkpoint::load(p)?)?;
                    // The schedule spans the configured run, not the one that wrote the checkpoint.
                    s.train_cfg.steps = cfg.par_train.steps;
                    s
                }
                None => TrainState::new(&cfg.backbone_config(&schema)?, &cfg.par_train, cfg.seed)?,
            };
            let hash = schema.hash();
            let sink = CheckpointSink { path: &out, schema_hash: &hash };
            let curve = train_par(&train, &mut state, cfg.par_train.steps, Some(&sink))?;
            state.save(&out, &hash)?;
            let query = SplitData::load(&manifest, &base, Split::Query)?;
            let metrics = evaluate_par(&state.backbone, &query, cfg.par_train.threshold)?;
            let body = json!({
                "steps": state.step,
                "loss_curve": curve,
                "query_metrics": metrics,
                "backbone_hash": state.backbone.params().content_hash()?,
            });
            emit(report.as_deref(), report::TRAIN_PAR, &body, &cfg)
        }
        Command::EvalPar { ckpt, data, split, report } => {
            let backbone = load_backbone(&ckpt, &schema.hash(), DType::F32)?;
            let (manifest, base) = open_dataset(&data, &schema)?;
            let d = SplitData::load(&manifest, &base, split)?;
            let metrics = evaluate_par(&backbone, &d, cfg.par_train.threshold)?;
            emit(report.as_deref(), report::EVAL_PAR, &serde_json::to_value(metrics)?, &cfg)
        }
        Command::TrainRet { data, par_ckpt, out, report } => {
            let hash = schema.hash();
            let backbone = load_backbone(&par_ckpt, &hash, DType::F32)?;
            let (manifest, base) = open_dataset(&data, &schema)?;
            let train = SplitData::load(&manifest, &base, Split::Train)?;
            let provider = cfg.ret_train.provider.build()?;
            let table = CategoryTable::build(&schema, provider.as_ref(), &train.labels, cfg.ret_train.n_words)?;
            let heads_cfg = HeadsConfig {
                feature_dim: backbone.config().feature_dim(),
                n_attr: schema.n_attr(),
                word_dim: provider.dim(),
                seed: cfg.seed,
                train: cfg.ret_train.clone(),
            };
            let heads = RetrievalHeads::new(heads_cfg.feature_dim, heads_cfg.n_attr, heads_cfg.word_dim, &cfg.ret_train, cfg.seed)?;
            let log = train_ret(&backbone, &heads, &table, &train, &cfg.ret_train, cfg.seed)?;
            save_heads(&out, &heads, &heads_cfg, &log.backbone_hash_after, &hash)?;
            let body = json!({
                "loss_curve": log.losses,
                "backbone_grad_norm": log.backbone_grad_norm,
                "backbone_hash_before": log.backbone_hash_before,
                "backbone_hash_after": log.backbone_hash_after,
                "categories": table.len(),
            });
            emit(report.as_deref(), report::TRAIN_RET, &body, &cfg)
        }
        Command::EvalRet { ckpt, heads, data, query_mode, report } => {
            let modes = parse_modes(&query_mode)?;
            let hash = schema.hash();
            let backbone = load_backbone(&ckpt, &hash, DType::F32)?;
            let (heads, heads_cfg) = load_heads(&heads, &backbone, &hash)?;
            let provider = heads_cfg.train.provider.build()?;
            let (manifest, base) = open_dataset(&data, &schema)?;
            let gallery = SplitData::load(&manifest, &base, Split::Gallery)?;
            let queries = distinct_queries(&SplitData::load(&manifest, &base, Split::Query)?.labels);
            let index = build_gallery_index(&backbone, &heads, &gallery)?;
            let encoder = QueryEncoder { schema: &schema, provider: provider.as_ref(), heads: &heads, n_words: heads_cfg.train.n_words };
            let mut per_mode = BTreeMap::new();
            for mode in modes {
                per_mode.insert(mode.name(), evaluate_mode(&index, &encoder, &queries, mode, cfg.eval.relevance)?);
            }
            let body = json!({
                "modes": per_mode,
                "n_queries": queries.len(),
                "n_gallery": index.len(),
                "relevance": cfg.eval.relevance,
            });
            emit(report.as_deref(), report::EVAL_RET, &body, &cfg)
        }
        Command::Search { ckpt, heads, gallery, queries, k, query_mode, out } => {
            let mode: QueryMode = query_mode.parse()?;
            let hash = schema.hash();
            let backbone = load_backbone(&ckpt, &hash, DType::F32)?;
            let (heads, heads_cfg) = load_heads(&heads, &backbone, &hash)?;
            let provider = heads_cfg.train.provider.build()?;
            let (manifest, base) = open_dataset(&gallery, &schema)?;
            let gallery = SplitData::load(&manifest, &base, Split::Gallery)?;
            let queries = load_queries(&queries, &schema)?;
            let index = build_gallery_index(&backbone, &heads, &gallery)?;
            let encoder = QueryEncoder { schema: &schema, provider: provider.as_ref(), heads: &heads, n_words: heads_cfg.train.n_words };
            let results = rank_queries(&index, &encoder, &queries, mode, cfg.eval.relevance)?;
            write_text(out.as_deref(), &results_jsonl(&results, k.unwrap_or(cfg.eval.k))?)
        }
        Command::ValidateReport { files } => {
            if files.is_empty() {
                return Err(ClearError::Config("no report files given".into()));
            }
            for f in &files {
                let text = std::fs::read_to_string(f).map_err(|e| ClearError::io(f, e))?;
                let v: Value = serde_json::from_str(&text)?;
                validate_report(&v).map_err(|e| ClearError::Config(format!("{}: {e}", f.display())))?;
                println!("{}: ok", f.display());
            }
            Ok(())
        }
    }
}
