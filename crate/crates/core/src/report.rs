//! Semantic diffs: structural operations on units, each with the tags of
//! the unit it touches.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::classify::RuleTable;
use crate::fileset::FileSet;
use crate::ingest::{IngestError, NotebookDoc};
use crate::patch::{derive_structural_ops, generate_patch_with, ParamRule, StructuralOp, StructuralOpKind};
use crate::store::units::{doc_tags, parse_documents, unit_ids};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaggedOp {
    pub op: StructuralOpKind,
    pub unit_ref: String,
    pub file_path: String,
    pub detail: String,
    pub tags: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub old_position: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub new_position: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiffReport {
    pub procedure_id: String,
    pub from_version: String,
    pub to_version: String,
    pub diff_text: String,
    pub ops: Vec<TaggedOp>,
}

impl DiffReport {
    pub fn is_empty(&self) -> bool {
        self.diff_text.is_empty() && self.ops.is_empty()
    }

    pub fn render_text(&self) -> String {
        let mut out = format!("{} {} -> {}\n", self.procedure_id, self.from_version, self.to_version);
        if self.ops.is_empty() {
            out.push_str("no changes\n");
        }
        for op in &self.ops {
            let tags = if op.tags.is_empty() { "untagged".to_owned() } else { op.tags.join(", ") };
            out.push_str(&format!("{:<15} {:<24} [{}] {}\n", op.op.as_str(), op.unit_ref, tags, op.detail));
        }
        if !self.diff_text.is_empty() {
            out.push('\n');
            out.push_str(&self.diff_text);
        }
        out
    }
}

fn empty_doc(path: &str) -> NotebookDoc {
    NotebookDoc {
        cells: Vec::new(),
        notebook_metadata: BTreeMap::new(),
        source_path: path.to_owned(),
        format_version: String::new(),
        extra: BTreeMap::new(),
    }
}

/// Structural ops between two states, aligned per document path, plus the
/// unified diff text.
pub fn semantic_diff_states(
    from: &FileSet,
    to: &FileSet,
    rules: &RuleTable,
    params: &ParamRule,
    context_lines: usize,
) -> Result<(String, Vec<TaggedOp>), IngestError> {
    let diff_text = generate_patch_with(from, to, context_lines, rules).diff_text();
    let from_docs = parse_documents(from)?;
    let to_docs = parse_documents(to)?;
    let id_map = |docs: &[NotebookDoc]| -> BTreeMap<(String, String), String> {
        docs.iter()
            .zip(unit_ids(docs))
            .flat_map(|(d, ids)| d.cells.iter().zip(ids).map(|(c, u)| ((d.source_path.clone(), c.cell_id.clone()), u)))
            .collect()
    };
    let (from_ids, to_ids) = (id_map(&from_docs), id_map(&to_docs));
    let by_path = |docs: Vec<NotebookDoc>| -> BTreeMap<String, NotebookDoc> {
        docs.into_iter().map(|d| (d.source_path.clone(), d)).collect()
    };
    let (mut a, mut b) = (by_path(from_docs), by_path(to_docs));
    let mut paths: Vec<String> = a.keys().chain(b.keys()).cloned().collect();
    paths.sort();
    paths.dedup();
    let mut ops = Vec::new();
    for path in paths {
        let da = a.remove(&path).unwrap_or_else(|| empty_doc(&path));
        let db = b.remove(&path).unwrap_or_else(|| empty_doc(&path));
        let (ta, tb) = (doc_tags(&da, rules), doc_tags(&db, rules));
        for StructuralOp { op, unit_ref, detail, old_position, new_position } in derive_structural_ops(&da, &db, params) {
            let key = (path.clone(), unit_ref.clone());
            let (unit, tags) = if op == StructuralOpKind::CellRemoved {
                (from_ids.get(&key), ta.get(&unit_ref))
            } else {
                (to_ids.get(&key), tb.get(&unit_ref))
            };
            ops.push(TaggedOp {
                op,
                unit_ref: unit.cloned().unwrap_or(unit_ref),
                file_path: path.clone(),
                detail,
                tags: tags.cloned().unwrap_or_default(),
                old_position,
                new_position,
            });
        }
    }
    Ok((diff_text, ops))
}
