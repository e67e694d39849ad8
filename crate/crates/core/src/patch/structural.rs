use std::collections::BTreeMap;

use regex::Regex;
use serde::{Deserialize, Serialize};

use crate::ingest::NotebookDoc;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StructuralOpKind {
    CellAdded,
    CellRemoved,
    CellModified,
    CellReordered,
    ParamChanged,
}

impl StructuralOpKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StructuralOpKind::CellAdded => "cell_added",
            StructuralOpKind::CellRemoved => "cell_removed",
            StructuralOpKind::CellModified => "cell_modified",
            StructuralOpKind::CellReordered => "cell_reordered",
            StructuralOpKind::ParamChanged => "param_changed",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructuralOp {
    pub op: StructuralOpKind,
    pub unit_ref: String,
    pub detail: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub old_position: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub new_position: Option<usize>,
}

/// Which top-level `NAME = value` assignments count as parameters.
#[derive(Debug, Clone)]
pub struct ParamRule {
    name: Regex,
}

const DEFAULT_PARAM_NAMES: &str = r"^(?i:lr|learning_rate|batch_size|epochs?|n_epochs|num_epochs|n_estimators|max_depth|dropout|momentum|weight_decay|seed|random_state|test_size)$|^[A-Z][A-Z0-9_]*$";

impl Default for ParamRule {
    fn default() -> Self {
        ParamRule { name: Regex::new(DEFAULT_PARAM_NAMES).expect("valid pattern") }
    }
}

impl ParamRule {
    pub fn new(name_pattern: &str) -> Result<Self, regex::Error> {
        Ok(ParamRule { name: Regex::new(name_pattern)? })
    }

    /// Parameter assignments in `source`, last one winning.
    pub fn params(&self, source: &str) -> BTreeMap<String, String> {
        let assign = assignment_re();
        let mut out = BTreeMap::new();
        for line in source.lines() {
            if let Some(c) = assign.captures(line) {
                if self.name.is_match(&c[1]) {
                    out.insert(c[1].to_owned(), c[2].trim().to_owned());
                }
            }
        }
        out
    }
}

fn assignment_re() -> &'static Regex {
    static RE: std::sync::OnceLock<Regex> = std::sync::OnceLock::new();
    RE.get_or_init(|| Regex::new(r"^([A-Za-z_][A-Za-z0-9_]*)\s*=\s*([^=#][^#]*?)\s*(?:#.*)?$").expect("valid pattern"))
}

/// Cell-level edit operations by id alignment.
///
/// Removed cells come first in base order, then added, modified (each
/// followed by its parameter changes) and reordered cells in target order.
pub fn derive_structural_ops(base: &NotebookDoc, target: &NotebookDoc, params: &ParamRule) -> Vec<StructuralOp> {
    let base_pos: BTreeMap<&str, usize> = base.cells.iter().enumerate().map(|(i, c)| (c.cell_id.as_str(), i)).collect();
    let target_pos: BTreeMap<&str, usize> =
        target.cells.iter().enumerate().map(|(i, c)| (c.cell_id.as_str(), i)).collect();
    let op = |op, id: &str, detail: String, old, new| StructuralOp {
        op,
        unit_ref: id.to_owned(),
        detail,
        old_position: old,
        new_position: new,
    };
    let mut ops = Vec::new();
    for (i, c) in base.cells.iter().enumerate() {
        if !target_pos.contains_key(c.cell_id.as_str()) {
            ops.push(op(StructuralOpKind::CellRemoved, &c.cell_id, format!("removed {} cell", c.kind.as_str()), Some(i), None));
        }
    }
    // rank among cells present on both sides
    let common_base: BTreeMap<&str, usize> = base
        .cells
        .iter()
        .filter(|c| target_pos.contains_key(c.cell_id.as_str()))
        .enumerate()
        .map(|(r, c)| (c.cell_id.as_str(), r))
        .collect();
    let mut common_rank = 0;
    let mut added = Vec::new();
    let mut modified = Vec::new();
    let mut reordered = Vec::new();
    for (j, c) in target.cells.iter().enumerate() {
        let Some(&i) = base_pos.get(c.cell_id.as_str()) else {
            added.push(op(StructuralOpKind::CellAdded, &c.cell_id, format!("added {} cell", c.kind.as_str()), None, Some(j)));
            continue;
        };
        let old = &base.cells[i];
        if old.source != c.source {
            modified.push(op(StructuralOpKind::CellModified, &c.cell_id, "source changed".into(), Some(i), Some(j)));
            let (before, after) = (params.params(&old.source), params.params(&c.source));
            let mut names: Vec<&String> = before.keys().chain(after.keys()).collect();
            names.sort();
            names.dedup();
            for name in names {
                let (a, b) = (before.get(name), after.get(name));
                if a != b {
                    let show = |v: Option<&String>| v.map_or("(unset)".to_owned(), Clone::clone);
                    let detail = format!("{name}: {} -> {}", show(a), show(b));
                    modified.push(op(StructuralOpKind::ParamChanged, &c.cell_id, detail, Some(i), Some(j)));
                }
            }
        }
        if common_base[c.cell_id.as_str()] != common_rank {
            let detail = format!("moved from position {i} to {j}");
            reordered.push(op(StructuralOpKind::CellReordered, &c.cell_id, detail, Some(i), Some(j)));
        }
        common_rank += 1;
    }
    ops.extend(added);
    ops.extend(modified);
    ops.extend(reordered);
    ops
}
