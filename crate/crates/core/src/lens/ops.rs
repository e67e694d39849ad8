use std::collections::BTreeMap;

use globset::{Glob, GlobBuilder, GlobMatcher};
use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use super::jsonpath::JsonPath;
use super::{instantiate_value, EvalContext, Lens, LensError, Materialized};
use crate::canonical::{to_canonical_file, to_canonical_string, to_jupyter_string};
use crate::fileset::FileSet;
use crate::ingest::{is_notebook_path, parse_entry, CellKind};
use crate::patch::ParamRule;
use crate::report::semantic_diff_states;
use crate::store::units::doc_tags;

pub const SELECTION_FILE: &str = "selection.json";
pub const SUMMARY_FILE: &str = "summary.md";
const CELLS_DIR: &str = "cells";
const EXTRACTED_DIR: &str = "extracted";
const TABLES_DIR: &str = "tables";
const DIFF_FILE: &str = "diff.patch";
const REPORT_FILE: &str = "report.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Operation {
    ExtractCells,
    ExtractStructured,
    Summarize,
    Tabulate,
    VersionDiff,
    Identity,
}

impl Operation {
    /// The transform a template describes: an explicit `operation` key, or
    /// inferred from the keys the template uses.
    pub fn of(lens: &Lens) -> Result<Operation, LensError> {
        let t = lens.patch_template.as_object().ok_or_else(|| LensError::InvalidLens("PatchTemplate is not an object".into()))?;
        if let Some(op) = t.get("operation") {
            return match op.as_str() {
                Some("extract-cells") => Ok(Operation::ExtractCells),
                Some("extract-structured") => Ok(Operation::ExtractStructured),
                Some("summarize") => Ok(Operation::Summarize),
                Some("tabulate") => Ok(Operation::Tabulate),
                Some("version-diff") => Ok(Operation::VersionDiff),
                Some("identity") => Ok(Operation::Identity),
                _ => Err(LensError::InvalidLens(format!("unknown operation {op}"))),
            };
        }
        let pattern = t.get("extractPattern").and_then(Value::as_str);
        if t.contains_key("cellType") || t.contains_key("matchField") {
            Ok(Operation::ExtractCells)
        } else if pattern.is_some_and(|p| p.trim_start().starts_with('$')) {
            Ok(Operation::ExtractStructured)
        } else if pattern.is_some() {
            Ok(Operation::ExtractCells)
        } else if t.contains_key("collapseBy") {
            Ok(Operation::Summarize)
        } else if t.get("render").and_then(Value::as_str) == Some("table") {
            Ok(Operation::Tabulate)
        } else if t.contains_key("fromVersion") || t.contains_key("toVersion") {
            Ok(Operation::VersionDiff)
        } else if t.is_empty() {
            Ok(Operation::Identity)
        } else {
            Err(LensError::InvalidLens(format!("cannot tell what PatchTemplate of {} does", lens.lens_id)))
        }
    }
}

/// Read a pattern written like `.(a | b).` as the alternation `(a|b)`.
pub fn normalize_extract_pattern(pattern: &str) -> String {
    let mut p = pattern.trim();
    if let Some(inner) = p.strip_prefix(".(").and_then(|r| r.strip_suffix(").")) {
        p = inner;
        return format!("({})", collapse_alternation(p));
    }
    collapse_alternation(p)
}

fn collapse_alternation(p: &str) -> String {
    Regex::new(r"\s*\|\s*").expect("valid pattern").replace_all(p, "|").into_owned()
}

fn glob(pattern: &str) -> Result<GlobMatcher, LensError> {
    let g: Glob = GlobBuilder::new(pattern)
        .literal_separator(true)
        .build()
        .map_err(|e| LensError::Template(format!("bad pathPattern {pattern:?}: {e}")))?;
    Ok(g.compile_matcher())
}

fn str_field<'a>(t: &'a Value, key: &str, default: &'a str) -> &'a str {
    t.get(key).and_then(Value::as_str).unwrap_or(default)
}

/// The instantiated template, with parameters not named in it added as keys.
fn template(t: &Value, params: &Map<String, Value>) -> Value {
    let mut out = instantiate_value(t, params);
    if let Value::Object(m) = &mut out {
        for (k, v) in params {
            m.entry(k.clone()).or_insert_with(|| v.clone());
        }
    }
    out
}

pub(super) fn forward(lens: &Lens, params: &Map<String, Value>, source: &FileSet, ctx: &EvalContext<'_>) -> Result<Materialized, LensError> {
    let t = template(&lens.patch_template, params);
    match Operation::of(lens)? {
        Operation::ExtractCells => extract_cells(&t, source),
        Operation::ExtractStructured => extract_structured(&t, source),
        Operation::Summarize => Ok(summarize(source, ctx)),
        Operation::Tabulate => Ok(tabulate(source)),
        Operation::VersionDiff => version_diff(&t, ctx),
        Operation::Identity => Ok(Materialized { files: source.clone(), diagnostics: Vec::new() }),
    }
}

pub(super) fn inverse(lens: &Lens, params: &Map<String, Value>, view: &FileSet) -> Result<FileSet, LensError> {
    let t = template(&lens.inverse_patch_template, params);
    match Operation::of(lens)? {
        Operation::ExtractCells => unextract_cells(view),
        Operation::ExtractStructured => unextract_structured(&t, view),
        Operation::Summarize => Ok(unsummarize(view)),
        Operation::Tabulate => Ok(untabulate(view)),
        Operation::VersionDiff => Ok(FileSet::new()),
        Operation::Identity => Ok(view.clone()),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Selected {
    path: String,
    cell_id: String,
    position: usize,
    cell_type: CellKind,
    file: String,
}

fn safe(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

fn ext(kind: CellKind) -> &'static str {
    match kind {
        CellKind::Code => "py",
        CellKind::Markdown => "md",
        CellKind::Raw => "txt",
    }
}

fn extract_cells(t: &Value, source: &FileSet) -> Result<Materialized, LensError> {
    let mut diagnostics = Vec::new();
    let raw = str_field(t, "extractPattern", ".*");
    let pattern = normalize_extract_pattern(raw);
    if pattern != raw {
        diagnostics.push(format!("extractPattern {raw:?} read as {pattern:?}"));
    }
    let re = Regex::new(&pattern).map_err(|e| LensError::Template(format!("bad extractPattern: {e}")))?;
    let cell_type = str_field(t, "cellType", "code");
    let want: Option<CellKind> = match cell_type {
        "any" | "*" => None,
        other => Some(CellKind::parse(other).ok_or_else(|| LensError::Template(format!("bad cellType {other:?}")))?),
    };
    if str_field(t, "matchField", "source") != "source" {
        return Err(LensError::Template("matchField must be \"source\"".into()));
    }
    let paths = glob(str_field(t, "pathPattern", "**/*.{ipynb,py}"))?;

    let mut files = FileSet::new();
    let mut selected = Vec::new();
    for (path, bytes) in source.iter().filter(|(p, _)| paths.is_match(p)) {
        let doc = match parse_entry(path, bytes) {
            None => continue,
            Some(Ok(d)) => d,
            Some(Err(e)) => {
                diagnostics.push(format!("skipped {path}: {e}"));
                continue;
            }
        };
        for (pos, cell) in doc.cells.iter().enumerate() {
            if want.is_some_and(|k| k != cell.kind) || !re.is_match(&cell.source) {
                continue;
            }
            let file = format!("{CELLS_DIR}/{path}/{pos:04}-{}.{}", safe(&cell.cell_id), ext(cell.kind));
            files.insert(file.clone(), cell.source.clone().into_bytes());
            selected.push(Selected { path: path.to_owned(), cell_id: cell.cell_id.clone(), position: pos, cell_type: cell.kind, file });
        }
    }
    if selected.is_empty() {
        diagnostics.push(format!("extractPattern {pattern:?} matched no cells"));
    }
    files.insert(SELECTION_FILE, to_canonical_file(&selected));
    Ok(Materialized { files, diagnostics })
}

struct PlainCell {
    id: String,
    kind: CellKind,
    source: String,
}

/// A fresh document holding `cells`: a notebook for `.ipynb`, otherwise
/// the sources separated by blank lines.
fn render_document(path: &str, cells: &[PlainCell]) -> Vec<u8> {
    if is_notebook_path(path) {
        let cells: Vec<Value> = cells
            .iter()
            .map(|c| {
                let lines: Vec<&str> = c.source.split_inclusive('\n').collect();
                let mut o = json!({"cell_type": c.kind.as_str(), "id": c.id, "metadata": {}, "source": lines});
                if c.kind == CellKind::Code {
                    o["execution_count"] = Value::Null;
                    o["outputs"] = json!([]);
                }
                o
            })
            .collect();
        to_jupyter_string(&json!({"cells": cells, "metadata": {}, "nbformat": 4, "nbformat_minor": 5})).into_bytes()
    } else {
        let mut text = cells.iter().map(|c| c.source.trim_end_matches('\n')).collect::<Vec<_>>().join("\n\n");
        if !text.is_empty() {
            text.push('\n');
        }
        text.into_bytes()
    }
}

fn unextract_cells(view: &FileSet) -> Result<FileSet, LensError> {
    let Some(sel) = view.get(SELECTION_FILE) else { return Ok(FileSet::new()) };
    let mut selected: Vec<Selected> =
        serde_json::from_slice(sel).map_err(|e| LensError::Template(format!("bad {SELECTION_FILE}: {e}")))?;
    selected.sort_by(|a, b| (&a.path, a.position).cmp(&(&b.path, b.position)));
    let mut by_path: BTreeMap<String, Vec<PlainCell>> = BTreeMap::new();
    for s in selected {
        let source = view.get_str(&s.file).unwrap_or_default().to_owned();
        by_path.entry(s.path).or_default().push(PlainCell { id: s.cell_id, kind: s.cell_type, source });
    }
    Ok(by_path.into_iter().map(|(p, cells)| {
        let bytes = render_document(&p, &cells);
        (p, bytes)
    }).collect())
}

fn parse_structured(path: &str, bytes: &[u8]) -> Result<Value, String> {
    if path.ends_with(".yaml") || path.ends_with(".yml") {
        serde_yaml::from_slice::<Value>(bytes).map_err(|e| e.to_string())
    } else {
        serde_json::from_slice::<Value>(bytes).map_err(|e| e.to_string())
    }
}

fn extract_structured(t: &Value, source: &FileSet) -> Result<Materialized, LensError> {
    let mut diagnostics = Vec::new();
    let paths = glob(str_field(t, "pathPattern", "**/*.json"))?;
    let expr = JsonPath::parse(str_field(t, "extractPattern", "$")).map_err(|e| LensError::Template(e.to_string()))?;
    let mut files = FileSet::new();
    for (path, bytes) in source.iter().filter(|(p, _)| paths.is_match(p)) {
        let root = match parse_structured(path, bytes) {
            Ok(v) => v,
            Err(e) => {
                diagnostics.push(format!("skipped {path}: {e}"));
                continue;
            }
        };
        let hits = expr.select(&root);
        if hits.is_empty() {
            diagnostics.push(format!("{expr} matched nothing in {path}"));
            continue;
        }
        let mut obj = Map::new();
        for (k, v) in hits {
            if obj.insert(k.clone(), v.clone()).is_some() {
                diagnostics.push(format!("{path}: key {k} matched more than once; last match kept"));
            }
        }
        files.insert(format!("{EXTRACTED_DIR}/{path}.json"), to_canonical_file(&obj));
    }
    if files.is_empty() {
        diagnostics.push(format!("{expr} matched nothing"));
    }
    Ok(Materialized { files, diagnostics })
}

fn unextract_structured(t: &Value, view: &FileSet) -> Result<FileSet, LensError> {
    let target = JsonPath::parse(str_field(t, "targetPath", "$")).map_err(|e| LensError::Template(e.to_string()))?;
    let strategy = str_field(t, "mergeStrategy", "deep-merge");
    if strategy != "deep-merge" {
        return Err(LensError::Template(format!("unsupported mergeStrategy {strategy:?}")));
    }
    let prefix = format!("{EXTRACTED_DIR}/");
    let mut out = FileSet::new();
    for (p, bytes) in view.iter() {
        let Some(orig) = p.strip_prefix(&prefix).and_then(|r| r.strip_suffix(".json")) else { continue };
        let Ok(obj) = serde_json::from_slice::<Value>(bytes) else { continue };
        let mut root = Value::Null;
        target.merge_into(&mut root, obj).map_err(|e| LensError::Template(e.to_string()))?;
        let text = if orig.ends_with(".yaml") || orig.ends_with(".yml") {
            serde_yaml::to_string(&root).map_err(|e| LensError::Template(e.to_string()))?
        } else {
            let mut s = serde_json::to_string_pretty(&root).expect("json value serializes");
            s.push('\n');
            s
        };
        out.insert(orig.to_owned(), text.into_bytes());
    }
    Ok(out)
}

fn fence_for(source: &str) -> String {
    let longest = source
        .split(|c| c != '`')
        .map(str::len)
        .max()
        .unwrap_or(0);
    "`".repeat(longest.max(2) + 1)
}

fn fence_lang(kind: CellKind) -> &'static str {
    match kind {
        CellKind::Code => "python",
        CellKind::Markdown => "markdown",
        CellKind::Raw => "text",
    }
}

fn summarize(source: &FileSet, ctx: &EvalContext<'_>) -> Materialized {
    let mut diagnostics = Vec::new();
    let mut out = String::from("# Procedure summary\n");
    for (path, bytes) in source.iter() {
        let doc = match parse_entry(path, bytes) {
            None => continue,
            Some(Ok(d)) => d,
            Some(Err(e)) => {
                diagnostics.push(format!("skipped {path}: {e}"));
                continue;
            }
        };
        out.push_str(&format!("\n## `{path}`\n"));
        let tags = doc_tags(&doc, ctx.rules);
        let mut groups: Vec<(String, Vec<usize>)> = Vec::new();
        for (i, c) in doc.cells.iter().enumerate() {
            let group = match c.kind {
                CellKind::Markdown => "notes".to_owned(),
                CellKind::Raw => "raw".to_owned(),
                CellKind::Code => tags[&c.cell_id].first().cloned().unwrap_or_else(|| "untagged".to_owned()),
            };
            match groups.iter_mut().find(|(g, _)| *g == group) {
                Some((_, v)) => v.push(i),
                None => groups.push((group, vec![i])),
            }
        }
        for (group, members) in groups {
            out.push_str(&format!("\n### {group} ({} unit{})\n", members.len(), if members.len() == 1 { "" } else { "s" }));
            for i in members {
                let c = &doc.cells[i];
                let all = &tags[&c.cell_id];
                let fence = fence_for(&c.source);
                out.push_str(&format!("\n<!-- unit: {} kind: {} tags: {} -->\n", c.cell_id, c.kind.as_str(), all.join("; ")));
                out.push_str(&format!("{fence}{}\n{}", fence_lang(c.kind), c.source));
                if !c.source.is_empty() && !c.source.ends_with('\n') {
                    out.push('\n');
                }
                out.push_str(&format!("{fence}\n"));
            }
        }
    }
    let mut files = FileSet::new();
    files.insert(SUMMARY_FILE, out.into_bytes());
    Materialized { files, diagnostics }
}

/// Parse a summary back into documents (unit order follows the summary).
fn unsummarize(view: &FileSet) -> FileSet {
    let Some(text) = view.get_str(SUMMARY_FILE) else { return FileSet::new() };
    let lines: Vec<&str> = text.split_inclusive('\n').collect();
    let mut docs: Vec<(String, Vec<PlainCell>)> = Vec::new();
    let mut i = 0;
    while i < lines.len() {
        let line = lines[i].trim_end_matches('\n');
        if let Some(path) = line.strip_prefix("## `").and_then(|r| r.strip_suffix('`')) {
            docs.push((path.to_owned(), Vec::new()));
        } else if let Some(meta) = line.strip_prefix("<!-- unit: ").and_then(|r| r.strip_suffix(" -->")) {
            let mut parts = meta.splitn(2, " kind: ");
            let id = parts.next().unwrap_or_default().to_owned();
            let kind = parts
                .next()
                .and_then(|r| r.split(' ').next())
                .and_then(CellKind::parse)
                .unwrap_or(CellKind::Code);
            let open = lines.get(i + 1).map(|l| l.trim_end_matches('\n')).unwrap_or_default();
            let ticks = open.chars().take_while(|c| *c == '`').count();
            if ticks >= 3 {
                let fence = &open[..ticks];
                let mut source = String::new();
                let mut j = i + 2;
                while j < lines.len() && lines[j].trim_end_matches('\n') != fence {
                    source.push_str(lines[j]);
                    j += 1;
                }
                if let Some((_, cells)) = docs.last_mut() {
                    cells.push(PlainCell { id, kind, source });
                }
                i = j;
            }
        }
        i += 1;
    }
    docs.into_iter().map(|(p, cells)| {
        let bytes = render_document(&p, &cells);
        (p, bytes)
    }).collect()
}

fn escape_cell(s: &str) -> String {
    s.replace('\\', "\\\\").replace('|', "\\|").replace('\n', "\\n")
}

fn split_row(line: &str) -> Vec<String> {
    let inner = line.trim().trim_start_matches('|');
    let mut cells = Vec::new();
    let mut cur = String::new();
    let mut chars = inner.chars();
    while let Some(c) = chars.next() {
        match c {
            '\\' => match chars.next() {
                Some('n') => cur.push('\n'),
                Some(x) => cur.push(x),
                None => cur.push('\\'),
            },
            '|' => cells.push(std::mem::take(&mut cur).trim().to_owned()),
            _ => cur.push(c),
        }
    }
    if !cur.trim().is_empty() {
        cells.push(cur.trim().to_owned());
    }
    cells
}

fn tabulate(source: &FileSet) -> Materialized {
    let mut diagnostics = Vec::new();
    let mut files = FileSet::new();
    for (path, bytes) in source.iter() {
        if !path.ends_with(".json") {
            continue;
        }
        let Ok(Value::Object(obj)) = serde_json::from_slice::<Value>(bytes) else {
            diagnostics.push(format!("skipped {path}: not a JSON object"));
            continue;
        };
        let mut out = String::from("| name | value |\n| --- | --- |\n");
        for (k, v) in &obj {
            out.push_str(&format!("| {} | {} |\n", escape_cell(k), escape_cell(&to_canonical_string(v))));
        }
        files.insert(format!("{TABLES_DIR}/{path}.md"), out.into_bytes());
    }
    if files.is_empty() {
        diagnostics.push("no JSON objects to tabulate".to_owned());
    }
    Materialized { files, diagnostics }
}

fn untabulate(view: &FileSet) -> FileSet {
    let prefix = format!("{TABLES_DIR}/");
    let mut out = FileSet::new();
    for (p, _) in view.iter() {
        let Some(orig) = p.strip_prefix(&prefix).and_then(|r| r.strip_suffix(".md")) else { continue };
        let text = view.get_str(p).unwrap_or_default();
        let mut obj = Map::new();
        for line in text.lines().skip(2) {
            let cells = split_row(line);
            if let [k, v] = cells.as_slice() {
                let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.clone()));
                obj.insert(k.clone(), value);
            }
        }
        out.insert(orig.to_owned(), to_canonical_file(&obj));
    }
    out
}

fn version_diff(t: &Value, ctx: &EvalContext<'_>) -> Result<Materialized, LensError> {
    let from = t.get("fromVersion").and_then(Value::as_str).ok_or_else(|| LensError::Template("fromVersion missing".into()))?;
    let to = t.get("toVersion").and_then(Value::as_str).ok_or_else(|| LensError::Template("toVersion missing".into()))?;
    let context = t.get("contextLines").and_then(Value::as_u64).map_or(ctx.context_lines, |n| n as usize);
    let a = ctx.versions.version_state(from)?;
    let b = ctx.versions.version_state(to)?;
    let (diff_text, ops) = semantic_diff_states(&a, &b, ctx.rules, &ParamRule::default(), context)?;
    let mut files = FileSet::new();
    files.insert(DIFF_FILE, diff_text.into_bytes());
    files.insert(REPORT_FILE, to_canonical_file(&json!({"from_version": from, "to_version": to, "ops": ops})));
    Ok(Materialized { files, diagnostics: Vec::new() })
}

/// Markdown rendering of a view for export.
pub fn render_markdown(view: &FileSet) -> String {
    if let Some(s) = view.get_str(SUMMARY_FILE) {
        return s.to_owned();
    }
    let mut out = String::from("# View\n");
    for (path, bytes) in view.iter() {
        out.push_str(&format!("\n## `{path}`\n\n"));
        match std::str::from_utf8(bytes) {
            Ok(text) if path.ends_with(".md") => {
                out.push_str(text);
                if !text.ends_with('\n') {
                    out.push('\n');
                }
            }
            Ok(text) => {
                let fence = fence_for(text);
                out.push_str(&format!("{fence}\n{text}"));
                if !text.is_empty() && !text.ends_with('\n') {
                    out.push('\n');
                }
                out.push_str(&format!("{fence}\n"));
            }
            Err(_) => out.push_str(&format!("({} bytes of binary data)\n", bytes.len())),
        }
    }
    out
}

/// Canonical JSON rendering of a view: path -> text (or null for binary).
pub fn render_json(view: &FileSet) -> Vec<u8> {
    let m: Map<String, Value> = view
        .iter()
        .map(|(p, b)| (p.to_owned(), std::str::from_utf8(b).map_or(Value::Null, |s| Value::String(s.to_owned()))))
        .collect();
    to_canonical_file(&m)
}
