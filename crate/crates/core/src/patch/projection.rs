//! Per-cell projection of notebooks for diffing.
//!
//! `X.ipynb` becomes a directory `X.ipynb.pkl.d/` holding `manifest.json`
//! (the notebook with sources and outputs replaced by references),
//! `cells/<cell-id>.<ext>` and `outputs/<sha256>.json`. A notebook is only
//! projected when reassembly reproduces its bytes exactly; otherwise it is
//! diffed as raw text.

use std::collections::BTreeSet;

use serde_json::{Map, Value};

use crate::canonical::{sha256_hex, to_canonical_file, to_jupyter_string};
use crate::fileset::FileSet;
use crate::ingest::{derive_cell_id, is_notebook_path, CellKind};

pub const PROJECTION_SUFFIX: &str = ".pkl.d";
const MANIFEST: &str = "manifest.json";
const MARKER: &str = "pkl_projection";
const SOURCE_REF: &str = "$pkl_source";
const SOURCE_FORM: &str = "$pkl_form";
const OUTPUT_REF: &str = "$pkl_output";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("projection {path}: {message}")]
pub struct ProjectionError {
    pub path: String,
    pub message: String,
}

/// Directory holding the projection of notebook `path`.
pub fn projection_dir(path: &str) -> String {
    format!("{path}{PROJECTION_SUFFIX}")
}

/// If `path` is a cell file inside a projection, the notebook path and the
/// cell's file name.
pub fn cell_file_owner(path: &str) -> Option<(&str, &str)> {
    let (dir, file) = path.split_once(&format!("{PROJECTION_SUFFIX}/cells/"))?;
    Some((dir, file))
}

fn safe_name(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

fn ext(kind: CellKind) -> &'static str {
    match kind {
        CellKind::Code => "py",
        CellKind::Markdown => "md",
        CellKind::Raw => "txt",
    }
}

fn project_one(path: &str, bytes: &[u8]) -> Option<Vec<(String, Vec<u8>)>> {
    let text = std::str::from_utf8(bytes).ok()?;
    let mut root: Value = serde_json::from_str(text).ok()?;
    if to_jupyter_string(&root) != text {
        return None;
    }
    let dir = projection_dir(path);
    let mut files = Vec::new();
    let mut names = BTreeSet::new();
    let top = root.as_object_mut()?;
    if top.contains_key(MARKER) {
        return None;
    }
    let cells = top.get_mut("cells")?.as_array_mut()?;
    for (i, cell) in cells.iter_mut().enumerate() {
        let obj = cell.as_object_mut()?;
        let kind = CellKind::parse(obj.get("cell_type")?.as_str()?)?;
        let (source, form) = match obj.get("source")? {
            Value::String(s) => (s.clone(), "text"),
            Value::Array(parts) => {
                let mut s = String::new();
                for p in parts {
                    s.push_str(p.as_str()?);
                }
                (s, "lines")
            }
            _ => return None,
        };
        let id = match obj.get("id") {
            Some(Value::String(s)) => s.clone(),
            _ => derive_cell_id(i, kind, &source),
        };
        let mut name = format!("{}.{}", safe_name(&id), ext(kind));
        let mut n = 1;
        while !names.insert(name.clone()) {
            n += 1;
            name = format!("{}~{n}.{}", safe_name(&id), ext(kind));
        }
        let rel = format!("cells/{name}");
        files.push((format!("{dir}/{rel}"), source.into_bytes()));
        let mut r = Map::new();
        r.insert(SOURCE_REF.into(), rel.into());
        r.insert(SOURCE_FORM.into(), form.into());
        obj.insert("source".into(), Value::Object(r));
        if let Some(Value::Array(outputs)) = obj.get_mut("outputs") {
            for out in outputs.iter_mut() {
                let body = to_canonical_file(&*out);
                let rel = format!("outputs/{}.json", sha256_hex(&body));
                files.push((format!("{dir}/{rel}"), body));
                let mut r = Map::new();
                r.insert(OUTPUT_REF.into(), rel.into());
                *out = Value::Object(r);
            }
        }
    }
    top.insert(MARKER.into(), 1.into());
    files.push((format!("{dir}/{MANIFEST}"), to_jupyter_string(&root).into_bytes()));
    Some(files)
}

/// Replace each round-trippable notebook by its projection.
pub fn project(files: &FileSet) -> FileSet {
    let mut out = FileSet::new();
    let taken: Vec<&str> = files.paths().collect();
    for (path, bytes) in files.iter() {
        if is_notebook_path(path) {
            let dir = format!("{}/", projection_dir(path));
            let clash = taken.iter().any(|p| p.starts_with(&dir));
            if !clash {
                if let Some(parts) = project_one(path, bytes) {
                    let mut trial = FileSet::new();
                    for (p, b) in &parts {
                        trial.insert(p.clone(), b.clone());
                    }
                    if unproject(&trial).ok().and_then(|t| t.get(path).map(|b| b == bytes)) == Some(true) {
                        for (p, b) in parts {
                            out.insert(p, b);
                        }
                        continue;
                    }
                }
            }
        }
        out.insert(path.to_owned(), bytes.to_vec());
    }
    out
}

fn reassemble(dir: &str, manifest: &[u8], files: &FileSet) -> Result<(String, Vec<u8>, Vec<String>), ProjectionError> {
    let err = |m: &str| ProjectionError { path: dir.to_owned(), message: m.to_owned() };
    let mut used = vec![format!("{dir}/{MANIFEST}")];
    let mut root: Value = serde_json::from_slice(manifest).map_err(|_| err("manifest is not JSON"))?;
    let top = root.as_object_mut().ok_or_else(|| err("manifest is not an object"))?;
    top.remove(MARKER);
    let cells = top.get_mut("cells").and_then(Value::as_array_mut).ok_or_else(|| err("manifest lacks cells"))?;
    for cell in cells.iter_mut() {
        let obj = cell.as_object_mut().ok_or_else(|| err("cell is not an object"))?;
        let r = obj.get("source").and_then(Value::as_object).ok_or_else(|| err("cell lacks source ref"))?;
        let rel = r.get(SOURCE_REF).and_then(Value::as_str).ok_or_else(|| err("bad source ref"))?;
        let form = r.get(SOURCE_FORM).and_then(Value::as_str).unwrap_or("lines");
        let p = format!("{dir}/{rel}");
        let text = files.get_str(&p).ok_or_else(|| err(&format!("missing {p}")))?.to_owned();
        used.push(p);
        let source = match form {
            "text" => Value::String(text),
            _ => Value::Array(text.split_inclusive('\n').map(|l| Value::String(l.to_owned())).collect()),
        };
        obj.insert("source".into(), source);
        if let Some(Value::Array(outputs)) = obj.get_mut("outputs") {
            for out in outputs.iter_mut() {
                let Some(rel) = out.get(OUTPUT_REF).and_then(Value::as_str) else { continue };
                let p = format!("{dir}/{rel}");
                let body = files.get(&p).ok_or_else(|| err(&format!("missing {p}")))?;
                let v: Value = serde_json::from_slice(body).map_err(|_| err(&format!("{p} is not JSON")))?;
                used.push(p);
                *out = v;
            }
        }
    }
    let path = dir.strip_suffix(PROJECTION_SUFFIX).ok_or_else(|| err("not a projection directory"))?;
    Ok((path.to_owned(), to_jupyter_string(&root).into_bytes(), used))
}

/// Inverse of [`project`].
pub fn unproject(files: &FileSet) -> Result<FileSet, ProjectionError> {
    let mut out = files.clone();
    let manifests: Vec<&str> = files
        .paths()
        .filter(|p| p.strip_suffix(MANIFEST).is_some_and(|d| d.ends_with(&format!("{PROJECTION_SUFFIX}/"))))
        .collect();
    for m in manifests {
        let bytes = files.get(m).expect("listed path");
        let is_projection = serde_json::from_slice::<Value>(bytes).ok().and_then(|v| v.get(MARKER).cloned()).is_some();
        if !is_projection {
            continue;
        }
        let dir = &m[..m.len() - MANIFEST.len() - 1];
        let (path, nb, _) = reassemble(dir, bytes, files)?;
        if files.contains(&path) {
            return Err(ProjectionError { path, message: "both notebook and projection present".into() });
        }
        let prefix = format!("{dir}/");
        let inner: Vec<String> = out.paths().filter(|p| p.starts_with(&prefix)).map(str::to_owned).collect();
        for p in inner {
            out.remove(&p);
        }
        out.insert(path, nb);
    }
    Ok(out)
}
