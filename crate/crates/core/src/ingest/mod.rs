//! Notebook and script ingestion into a normalized document model.

mod notebook;
mod order;
mod script;
pub mod trace;

use std::collections::BTreeMap;
use std::path::Path;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;

pub use notebook::{parse_notebook_bytes, render_notebook, to_notebook_json};
pub use order::{reconstruct_execution_order, ExecutionOrder};
pub use script::{parse_script_str, segment_script, ScriptBlock};

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("{0}: file not found")]
    NotFound(String),
    #[error("malformed document {path}: {pointer}: {message}")]
    MalformedDocument {
        path: String,
        /// JSON pointer of the offending element inside the document.
        pointer: String,
        message: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Code,
    Markdown,
    Raw,
}

impl CellKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CellKind::Code => "code",
            CellKind::Markdown => "markdown",
            CellKind::Raw => "raw",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "code" => Some(CellKind::Code),
            "markdown" => Some(CellKind::Markdown),
            "raw" => Some(CellKind::Raw),
            _ => None,
        }
    }
}

/// How a cell's `source` was laid out in the file: one string or a list of
/// line strings. Kept so re-serialization reproduces the file shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SourceForm {
    #[default]
    Lines,
    Text,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputKind {
    Stream,
    DisplayData,
    ExecuteResult,
    Error,
}

impl OutputKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OutputKind::Stream => "stream",
            OutputKind::DisplayData => "display_data",
            OutputKind::ExecuteResult => "execute_result",
            OutputKind::Error => "error",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "stream" => Some(OutputKind::Stream),
            "display_data" => Some(OutputKind::DisplayData),
            "execute_result" => Some(OutputKind::ExecuteResult),
            "error" => Some(OutputKind::Error),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Output {
    pub output_kind: OutputKind,
    /// The output object exactly as it appeared in the file.
    pub payload: Value,
    /// Primary media type of the payload (`text/plain` for streams and errors).
    pub media_type: String,
    /// Completion instant of the producing execution, when recorded.
    pub timestamp: Option<DateTime<Utc>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub cell_id: String,
    /// Whether `cell_id` came from the file (`id` key) or was derived.
    pub id_in_file: bool,
    pub kind: CellKind,
    pub source: String,
    pub source_form: SourceForm,
    pub execution_count: Option<u64>,
    pub outputs: Vec<Output>,
    pub cell_metadata: BTreeMap<String, Value>,
    /// Unrecognized cell keys (e.g. `attachments`), retained verbatim.
    pub extra: BTreeMap<String, Value>,
}

impl Cell {
    /// A code cell with a derived id, as produced for script blocks.
    pub fn synthetic(cell_id: String, source: String) -> Self {
        Cell {
            cell_id,
            id_in_file: false,
            kind: CellKind::Code,
            source,
            source_form: SourceForm::Text,
            execution_count: None,
            outputs: Vec::new(),
            cell_metadata: BTreeMap::new(),
            extra: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NotebookDoc {
    pub cells: Vec<Cell>,
    pub notebook_metadata: BTreeMap<String, Value>,
    pub source_path: String,
    /// `"{nbformat}.{nbformat_minor}"` as found in the file; `"script"` for scripts.
    pub format_version: String,
    /// Unrecognized top-level keys.
    pub extra: BTreeMap<String, Value>,
}

impl NotebookDoc {
    pub fn code_cells(&self) -> impl Iterator<Item = &Cell> {
        self.cells.iter().filter(|c| c.kind == CellKind::Code)
    }

    pub fn cell(&self, id: &str) -> Option<&Cell> {
        self.cells.iter().find(|c| c.cell_id == id)
    }

    /// Canonical JSON of the normalized model (sorted keys, LF-terminated).
    pub fn to_canonical_json(&self) -> Vec<u8> {
        crate::canonical::to_canonical_file(self)
    }
}

/// Stable id for a cell without one: hash of position, kind and content.
pub fn derive_cell_id(position: usize, kind: CellKind, source: &str) -> String {
    let digest = crate::canonical::sha256_hex(format!("{position}\0{}\0{source}", kind.as_str()).as_bytes());
    digest[..16].to_owned()
}

/// Read and parse a notebook file.
pub fn parse_notebook(path: &Path) -> Result<NotebookDoc, IngestError> {
    let bytes = read(path)?;
    parse_notebook_bytes(&bytes, &path.display().to_string())
}

/// Read a plain source file and split it into top-level blocks.
pub fn parse_script(path: &Path) -> Result<NotebookDoc, IngestError> {
    let bytes = read(path)?;
    let text = String::from_utf8_lossy(&bytes);
    Ok(parse_script_str(&text, &path.display().to_string()))
}

/// True for file names the ingester treats as notebooks.
pub fn is_notebook_path(path: &str) -> bool {
    path.ends_with(".ipynb")
}

/// True for file names the ingester treats as scripts.
pub fn is_script_path(path: &str) -> bool {
    path.ends_with(".py")
}

/// Parse a file set entry into a document, if its type is recognized.
pub fn parse_entry(path: &str, bytes: &[u8]) -> Option<Result<NotebookDoc, IngestError>> {
    if is_notebook_path(path) {
        Some(parse_notebook_bytes(bytes, path))
    } else if is_script_path(path) {
        Some(Ok(parse_script_str(&String::from_utf8_lossy(bytes), path)))
    } else {
        None
    }
}

fn read(path: &Path) -> Result<Vec<u8>, IngestError> {
    std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => IngestError::NotFound(path.display().to_string()),
        _ => IngestError::Io { path: path.display().to_string(), source: e },
    })
}
