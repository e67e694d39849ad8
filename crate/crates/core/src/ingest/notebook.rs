use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use serde_json::{Map, Value};

use super::{derive_cell_id, Cell, CellKind, IngestError, NotebookDoc, Output, OutputKind, SourceForm};

const CELL_KEYS: [&str; 6] = ["cell_type", "id", "source", "metadata", "execution_count", "outputs"];
const TOP_KEYS: [&str; 4] = ["cells", "metadata", "nbformat", "nbformat_minor"];

struct Ctx<'a> {
    path: &'a str,
}

impl Ctx<'_> {
    fn err(&self, pointer: impl Into<String>, message: impl Into<String>) -> IngestError {
        IngestError::MalformedDocument {
            path: self.path.to_owned(),
            pointer: pointer.into(),
            message: message.into(),
        }
    }
}

/// Parse notebook JSON (nbformat 4 layout).
pub fn parse_notebook_bytes(bytes: &[u8], source_path: &str) -> Result<NotebookDoc, IngestError> {
    let ctx = Ctx { path: source_path };
    let root: Value = serde_json::from_slice(bytes)
        .map_err(|e| ctx.err("", format!("invalid JSON at line {} column {}: {e}", e.line(), e.column())))?;
    let Value::Object(mut top) = root else {
        return Err(ctx.err("", "top level is not an object"));
    };

    let major = top
        .get("nbformat")
        .and_then(Value::as_u64)
        .ok_or_else(|| ctx.err("/nbformat", "missing or not an integer"))?;
    if major < 4 {
        return Err(ctx.err("/nbformat", format!("unsupported nbformat {major}, need >= 4")));
    }
    let minor = match top.get("nbformat_minor") {
        None => 0,
        Some(v) => v.as_u64().ok_or_else(|| ctx.err("/nbformat_minor", "not an integer"))?,
    };
    let notebook_metadata = object_field(&ctx, &mut top, "metadata", "/metadata")?;
    let cells_value = top.remove("cells").ok_or_else(|| ctx.err("/cells", "missing"))?;
    let Value::Array(raw_cells) = cells_value else {
        return Err(ctx.err("/cells", "not an array"));
    };

    let mut cells = Vec::with_capacity(raw_cells.len());
    for (i, raw) in raw_cells.into_iter().enumerate() {
        cells.push(parse_cell(&ctx, i, raw)?);
    }

    let extra = top.into_iter().filter(|(k, _)| !TOP_KEYS.contains(&k.as_str())).collect();
    Ok(NotebookDoc {
        cells,
        notebook_metadata,
        source_path: source_path.to_owned(),
        format_version: format!("{major}.{minor}"),
        extra,
    })
}

fn object_field(
    ctx: &Ctx<'_>,
    obj: &mut Map<String, Value>,
    key: &str,
    pointer: &str,
) -> Result<BTreeMap<String, Value>, IngestError> {
    match obj.remove(key) {
        None => Ok(BTreeMap::new()),
        Some(Value::Object(m)) => Ok(m.into_iter().collect()),
        Some(_) => Err(ctx.err(pointer, "not an object")),
    }
}

fn parse_cell(ctx: &Ctx<'_>, index: usize, raw: Value) -> Result<Cell, IngestError> {
    let base = format!("/cells/{index}");
    let Value::Object(mut obj) = raw else {
        return Err(ctx.err(&base, "cell is not an object"));
    };
    let kind = match obj.get("cell_type") {
        Some(Value::String(s)) => CellKind::parse(s)
            .ok_or_else(|| ctx.err(format!("{base}/cell_type"), format!("unknown cell type {s:?}")))?,
        Some(_) => return Err(ctx.err(format!("{base}/cell_type"), "not a string")),
        None => return Err(ctx.err(format!("{base}/cell_type"), "missing")),
    };
    let (source, source_form) = match obj.get("source") {
        Some(Value::String(s)) => (s.clone(), SourceForm::Text),
        Some(Value::Array(parts)) => {
            let mut s = String::new();
            for (j, part) in parts.iter().enumerate() {
                match part {
                    Value::String(p) => s.push_str(p),
                    _ => return Err(ctx.err(format!("{base}/source/{j}"), "not a string")),
                }
            }
            (s, SourceForm::Lines)
        }
        Some(_) => return Err(ctx.err(format!("{base}/source"), "not a string or list of strings")),
        None => return Err(ctx.err(format!("{base}/source"), "missing")),
    };
    let (cell_id, id_in_file) = match obj.get("id") {
        Some(Value::String(s)) if !s.is_empty() => (s.clone(), true),
        Some(Value::String(_)) => return Err(ctx.err(format!("{base}/id"), "empty cell id")),
        Some(_) => return Err(ctx.err(format!("{base}/id"), "not a string")),
        None => (derive_cell_id(index, kind, &source), false),
    };
    let cell_metadata = object_field(ctx, &mut obj, "metadata", &format!("{base}/metadata"))?;

    let mut execution_count = None;
    let mut outputs = Vec::new();
    match kind {
        CellKind::Code => {
            execution_count = match obj.get("execution_count") {
                None | Some(Value::Null) => None,
                Some(v) => Some(v.as_u64().ok_or_else(|| {
                    ctx.err(format!("{base}/execution_count"), "not a non-negative integer")
                })?),
            };
            let stamp = execution_timestamp(&cell_metadata);
            match obj.get("outputs") {
                None => {}
                Some(Value::Array(items)) => {
                    for (j, item) in items.iter().enumerate() {
                        outputs.push(parse_output(ctx, &format!("{base}/outputs/{j}"), item, stamp)?);
                    }
                }
                Some(_) => return Err(ctx.err(format!("{base}/outputs"), "not an array")),
            }
        }
        CellKind::Markdown | CellKind::Raw => {
            if let Some(v) = obj.get("outputs") {
                if v.as_array().is_none_or(|a| !a.is_empty()) {
                    return Err(ctx.err(format!("{base}/outputs"), "non-code cell carries outputs"));
                }
            }
            if obj.get("execution_count").is_some_and(|v| !v.is_null()) {
                return Err(ctx.err(format!("{base}/execution_count"), "non-code cell has an execution count"));
            }
        }
    }

    let extra = obj.into_iter().filter(|(k, _)| !CELL_KEYS.contains(&k.as_str())).collect();
    Ok(Cell {
        cell_id,
        id_in_file,
        kind,
        source,
        source_form,
        execution_count,
        outputs,
        cell_metadata,
        extra,
    })
}

/// JupyterLab's `recordTiming` writes `metadata.execution` with ISO instants.
fn execution_timestamp(meta: &BTreeMap<String, Value>) -> Option<DateTime<Utc>> {
    let exec = meta.get("execution")?.as_object()?;
    ["shell.execute_reply", "iopub.status.idle"]
        .iter()
        .filter_map(|k| exec.get(*k)?.as_str())
        .find_map(|s| DateTime::parse_from_rfc3339(s).ok())
        .map(|t| t.with_timezone(&Utc))
}

const MEDIA_PRIORITY: [&str; 6] =
    ["image/png", "image/jpeg", "image/svg+xml", "text/html", "application/json", "text/plain"];

fn parse_output(
    ctx: &Ctx<'_>,
    pointer: &str,
    item: &Value,
    timestamp: Option<DateTime<Utc>>,
) -> Result<Output, IngestError> {
    let obj = item.as_object().ok_or_else(|| ctx.err(pointer, "output is not an object"))?;
    let kind_str = obj
        .get("output_type")
        .and_then(Value::as_str)
        .ok_or_else(|| ctx.err(format!("{pointer}/output_type"), "missing or not a string"))?;
    let output_kind = OutputKind::parse(kind_str)
        .ok_or_else(|| ctx.err(format!("{pointer}/output_type"), format!("unknown output type {kind_str:?}")))?;
    let media_type = match output_kind {
        OutputKind::Stream | OutputKind::Error => "text/plain".to_owned(),
        OutputKind::DisplayData | OutputKind::ExecuteResult => match obj.get("data") {
            Some(Value::Object(data)) => MEDIA_PRIORITY
                .iter()
                .find(|m| data.contains_key(**m))
                .map(|m| (*m).to_owned())
                .or_else(|| data.keys().next().cloned())
                .unwrap_or_else(|| "application/octet-stream".to_owned()),
            Some(_) => return Err(ctx.err(format!("{pointer}/data"), "not an object")),
            None => "application/octet-stream".to_owned(),
        },
    };
    Ok(Output { output_kind, payload: item.clone(), media_type, timestamp })
}

/// Split text into line strings the way notebook files store `source`.
pub(crate) fn split_lines_keep_ends(s: &str) -> Vec<String> {
    s.split_inclusive('\n').map(str::to_owned).collect()
}

/// Serialize a document model back into notebook JSON.
pub fn to_notebook_json(doc: &NotebookDoc) -> Value {
    let (major, minor) = doc
        .format_version
        .split_once('.')
        .and_then(|(a, b)| Some((a.parse::<u64>().ok()?, b.parse::<u64>().ok()?)))
        .unwrap_or((4, 5));
    let mut top: Map<String, Value> = doc.extra.clone().into_iter().collect();
    top.insert("cells".into(), Value::Array(doc.cells.iter().map(cell_json).collect()));
    top.insert("metadata".into(), Value::Object(doc.notebook_metadata.clone().into_iter().collect()));
    top.insert("nbformat".into(), major.into());
    top.insert("nbformat_minor".into(), minor.into());
    Value::Object(top)
}

fn cell_json(cell: &Cell) -> Value {
    let mut obj: Map<String, Value> = cell.extra.clone().into_iter().collect();
    obj.insert("cell_type".into(), cell.kind.as_str().into());
    if cell.id_in_file {
        obj.insert("id".into(), cell.cell_id.clone().into());
    }
    obj.insert("metadata".into(), Value::Object(cell.cell_metadata.clone().into_iter().collect()));
    let source = match cell.source_form {
        SourceForm::Text => Value::String(cell.source.clone()),
        SourceForm::Lines => Value::Array(split_lines_keep_ends(&cell.source).into_iter().map(Value::String).collect()),
    };
    obj.insert("source".into(), source);
    if cell.kind == CellKind::Code {
        obj.insert("execution_count".into(), cell.execution_count.map_or(Value::Null, Value::from));
        obj.insert("outputs".into(), Value::Array(cell.outputs.iter().map(|o| o.payload.clone()).collect()));
    }
    Value::Object(obj)
}

/// Notebook file bytes in Jupyter's on-disk layout.
pub fn render_notebook(doc: &NotebookDoc) -> String {
    crate::canonical::to_jupyter_string(&to_notebook_json(doc))
}
