//! JSON reports written by the CLI, and a structural validator for them.
//!
//! Every report carries a `report` field naming its kind and a `config`
//! field holding the resolved run configuration. Reports contain no
//! timings, so repeated runs under one seed produce identical bytes.

use serde::Serialize;
use serde_json::Value;

use crate::error::{ClearError, Result};

pub const GEN_DATA: &str = "gen-data";
pub const TRAIN_PAR: &str = "train-par";
pub const EVAL_PAR: &str = "eval-par";
pub const TRAIN_RET: &str = "train-ret";
pub const EVAL_RET: &str = "eval-ret";

/// Serializes `body` and adds the `report` and `config` fields.
pub fn make_report<T: Serialize>(kind: &str, body: &T, config: &Value) -> Result<Value> {
    let mut v = serde_json::to_value(body)?;
    let obj = v
        .as_object_mut()
        .ok_or_else(|| ClearError::Config("report body must be an object".into()))?;
    obj.insert("report".into(), kind.into());
    obj.insert("config".into(), config.clone());
    Ok(v)
}

pub fn to_pretty(report: &Value) -> Result<String> {
    let mut s = serde_json::to_string_pretty(report)?;
    s.push('\n');
    Ok(s)
}

fn fail(msg: String) -> ClearError {
    ClearError::Config(format!("invalid report: {msg}"))
}

fn number(v: &Value, key: &str) -> Result<f64> {
    v.get(key)
        .and_then(Value::as_f64)
        .filter(|x| x.is_finite())
        .ok_or_else(|| fail(format!("missing finite number {key:?}")))
}

fn unit_interval(v: &Value, key: &str) -> Result<f64> {
    let x = number(v, key)?;
    if !(0.0..=1.0).contains(&x) {
        return Err(fail(format!("{key} = {x} outside [0, 1]")));
    }
    Ok(x)
}

fn count(v: &Value, key: &str) -> Result<u64> {
    v.get(key).and_then(Value::as_u64).ok_or_else(|| fail(format!("missing count {key:?}")))
}

fn array<'a>(v: &'a Value, key: &str) -> Result<&'a Vec<Value>> {
    v.get(key).and_then(Value::as_array).ok_or_else(|| fail(format!("missing array {key:?}")))
}

fn check_par_metrics(v: &Value) -> Result<()> {
    for key in ["mA", "F1", "precision", "recall"] {
        unit_interval(v, key)?;
    }
    for (i, x) in array(v, "per_attribute")?.iter().enumerate() {
        match x.as_f64() {
            Some(x) if (0.0..=1.0).contains(&x) => {}
            _ => return Err(fail(format!("per_attribute[{i}] is not in [0, 1]"))),
        }
    }
    Ok(())
}

fn check_ret_metrics(v: &Value) -> Result<()> {
    unit_interval(v, "mAP")?;
    let r1 = unit_interval(v, "R1")?;
    let r5 = unit_interval(v, "R5")?;
    let r10 = unit_interval(v, "R10")?;
    if !(r1 <= r5 && r5 <= r10) {
        return Err(fail(format!("rank accuracies not monotone: R1 {r1}, R5 {r5}, R10 {r10}")));
    }
    count(v, "excluded_queries")?;
    Ok(())
}

fn check_curve(v: &Value, key: &str) -> Result<()> {
    let curve = array(v, key)?;
    if curve.iter().any(|x| !x.as_f64().is_some_and(f64::is_finite)) {
        return Err(fail(format!("{key} holds a non-finite value")));
    }
    Ok(())
}

/// Checks a report's kind-specific fields.
pub fn validate_report(v: &Value) -> Result<()> {
    let kind = v.get("report").and_then(Value::as_str).ok_or_else(|| fail("missing \"report\" kind".into()))?;
    if !v.get("config").is_some_and(Value::is_object) {
        return Err(fail("missing resolved \"config\" object".into()));
    }
    match kind {
        GEN_DATA => {
            for key in ["train", "gallery", "query", "categories", "unseen_categories"] {
                count(v, key)?;
            }
            v.get("manifest_sha256").and_then(Value::as_str).ok_or_else(|| fail("missing manifest_sha256".into()))?;
        }
        TRAIN_PAR => {
            check_curve(v, "loss_curve")?;
            count(v, "steps")?;
            check_par_metrics(v.get("query_metrics").ok_or_else(|| fail("missing query_metrics".into()))?)?;
        }
        EVAL_PAR => check_par_metrics(v)?,
        TRAIN_RET => {
            check_curve(v, "loss_curve")?;
            number(v, "backbone_grad_norm")?;
            for key in ["backbone_hash_before", "backbone_hash_after"] {
                v.get(key).and_then(Value::as_str).ok_or_else(|| fail(format!("missing {key}")))?;
            }
        }
        EVAL_RET => {
            let modes = v.get("modes").and_then(Value::as_object).ok_or_else(|| fail("missing modes".into()))?;
            if modes.is_empty() {
                return Err(fail("no query modes evaluated".into()));
            }
            for m in modes.values() {
                check_ret_metrics(m)?;
            }
        }
        other => return Err(fail(format!("unknown report kind {other:?}"))),
    }
    Ok(())
}
