//! `inspect`: identify a file, validate it with the owning loader and dump
//! it as JSON.

use std::path::Path;

use serde_json::{json, Map, Value};

use neurmatch::descriptors::{
    read_descriptors_from, read_feature_map_from, DescriptorMatrix, DescriptorSet, FeatureMap, FusionNet,
};
use neurmatch::evalmetrics::EvalReport;
use neurmatch::formats::*;
use neurmatch::gccm::GccmModel;
use neurmatch::geometry::TransformFile;
use neurmatch::matcher::MatchSet;
use neurmatch::nn::ModelFile;
use neurmatch::synthdata::{load_task, Manifest};
use neurmatch::Error;

use crate::error::{CliError, CliResult};

/// Inspect `path`; `summary` drops bulk arrays from the dump.
pub fn inspect(path: &Path, summary: bool) -> CliResult<Value> {
    if path.is_dir() {
        return inspect_task_dir(path);
    }
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    match bytes.get(..4) {
        Some(b"NMDS") => Ok(descriptor_json(&read_descriptors_from(&bytes)?, summary)),
        Some(b"NMFM") => Ok(feature_map_json(&read_feature_map_from(&bytes)?, summary)),
        _ => {
            let text = std::str::from_utf8(&bytes)
                .map_err(|_| Error::Format {
                    offset: 0,
                    message: "neither NMDS, NMFM nor UTF-8 JSON".into(),
                })
                .map_err(CliError::from)?;
            inspect_json(path, text)
        }
    }
}

fn matrix_json(m: &DescriptorMatrix, summary: bool) -> Value {
    let mut o = Map::new();
    o.insert("dim".into(), json!(m.dim()));
    if !summary {
        o.insert("rows".into(), json!(m.iter_rows().collect::<Vec<_>>()));
    }
    Value::Object(o)
}

fn descriptor_json(ds: &DescriptorSet, summary: bool) -> Value {
    let mut o = Map::new();
    o.insert("format".into(), json!("NMDS"));
    o.insert("version".into(), json!(DESCRIPTOR_FORMAT_VERSION));
    o.insert("n".into(), json!(ds.len()));
    if !summary {
        let kps: Vec<[f64; 2]> = ds.keypoints().iter().map(|p| [p.x, p.y]).collect();
        o.insert("keypoints".into(), json!(kps));
    }
    o.insert("local".into(), matrix_json(ds.local(), summary));
    o.insert(
        "semantic".into(),
        ds.semantic().map_or(Value::Null, |m| matrix_json(m, summary)),
    );
    o.insert(
        "fused".into(),
        ds.fused().map_or(Value::Null, |m| matrix_json(m, summary)),
    );
    o.insert("degenerate_rows".into(), json!(ds.degenerate_rows()));
    Value::Object(o)
}

fn feature_map_json(map: &FeatureMap, summary: bool) -> Value {
    let mut o = Map::new();
    o.insert("format".into(), json!("NMFM"));
    o.insert("version".into(), json!(FEATURE_MAP_FORMAT_VERSION));
    o.insert("height".into(), json!(map.height()));
    o.insert("width".into(), json!(map.width()));
    o.insert("channels".into(), json!(map.channels()));
    o.insert("stride".into(), json!(map.stride()));
    if !summary {
        o.insert("data".into(), json!(map.data()));
    }
    Value::Object(o)
}

fn tagged(kind: &str, content: Value) -> Value {
    json!({ "format": kind, "content": content })
}

fn has(v: &Value, keys: &[&str]) -> bool {
    keys.iter().all(|k| v.get(k).is_some())
}

fn inspect_json(path: &Path, text: &str) -> CliResult<Value> {
    let v: Value = serde_json::from_str(text)?;
    let kind = if has(&v, &["gccm", "model"]) {
        GccmModel::from_json(text)?;
        "gccm-model"
    } else if has(&v, &["fusion", "model"]) {
        FusionNet::from_json(text)?;
        "fusion-model"
    } else if has(&v, &["layers", "input_dim"]) {
        serde_json::from_value::<ModelFile>(v.clone())?.into_net()?;
        "model"
    } else if has(&v, &["per_match", "final"]) {
        let final_set: MatchSet = serde_json::from_value(v["final"].clone())?;
        final_set.validate()?;
        "verification"
    } else if has(&v, &["final", "method"]) {
        let final_set: MatchSet = serde_json::from_value(v["final"].clone())?;
        final_set.validate()?;
        "ransac-verification"
    } else if has(&v, &["n_a", "n_b", "matches"]) {
        MatchSet::from_json(text)?;
        "matches"
    } else if has(&v, &["methods", "config_hash"]) {
        let r: EvalReport = serde_json::from_value(v.clone())?;
        if r.format_version != REPORT_FORMAT_VERSION {
            return Err(Error::Format {
                offset: 0,
                message: format!("report format version {}", r.format_version),
            }
            .into());
        }
        "report"
    } else if has(&v, &["type", "format_version"]) {
        let t = TransformFile::from_json(text)?;
        if t.kind() == "tps" {
            t.into_tps()?;
        }
        "transform"
    } else if has(&v, &["kind", "seed", "tasks"]) {
        let m: Manifest = serde_json::from_value(v.clone())?;
        if let Some(root) = path.parent() {
            for t in &m.tasks {
                if !root.join(t).is_dir() {
                    return Err(Error::Format {
                        offset: 0,
                        message: format!("manifest lists missing task {t:?}"),
                    }
                    .into());
                }
            }
        }
        "manifest"
    } else if has(&v, &["meta", "image_size"]) {
        let dir = path.parent().unwrap_or(Path::new("."));
        return inspect_task_dir(dir);
    } else {
        return Err(Error::Format {
            offset: 0,
            message: "unrecognised JSON document".into(),
        }
        .into());
    };
    Ok(tagged(kind, v))
}

fn inspect_task_dir(dir: &Path) -> CliResult<Value> {
    let task = load_task(dir)?;
    Ok(json!({
        "format": "task",
        "content": {
            "image_size": task.image_size,
            "gt_tolerance": task.gt_tolerance,
            "meta": task.meta,
            "n_a": task.keypoints_a.len(),
            "n_b": task.keypoints_b.len(),
            "n_gt": task.gt_matches.len(),
            "images": task.images.is_some(),
        }
    }))
}

/// Schema versions printed by `--version`.
pub fn format_versions() -> Vec<(&'static str, String)> {
    vec![
        ("descriptors (NMDS)", DESCRIPTOR_FORMAT_VERSION.to_string()),
        ("feature map (NMFM)", FEATURE_MAP_FORMAT_VERSION.to_string()),
        ("model", MODEL_FORMAT_VERSION.to_string()),
        ("gccm model", GCCM_FORMAT_VERSION.to_string()),
        ("transform", TRANSFORM_FORMAT_VERSION.to_string()),
        ("matches", MATCH_FORMAT_VERSION.to_string()),
        ("task", TASK_FORMAT_VERSION.to_string()),
        ("report", REPORT_FORMAT_VERSION.to_string()),
    ]
}
