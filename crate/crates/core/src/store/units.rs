//! Turning a procedure state into indexed units.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::classify::{classify_unit_with_context, facts_for, infer_dependencies, CodeFacts, RuleTable};
use crate::clock::{ClockState, LamportStamp};
use crate::fileset::FileSet;
use crate::ingest::trace::{latest_stamps, order_from_trace, TraceEvent};
use crate::ingest::{parse_entry, reconstruct_execution_order, CellKind, IngestError, NotebookDoc};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitRecord {
    pub unit_id: String,
    pub procedure_id: String,
    pub file_path: String,
    pub cell_id: String,
    pub kind: CellKind,
    pub content: String,
    pub start_line: u64,
    pub end_line: u64,
    /// First tag, as in the single-valued index column.
    pub semantic_tag: Option<String>,
    pub tags: Vec<String>,
    pub lamport: u64,
    pub agent: String,
    /// Position across the whole procedure in file then cell order.
    pub doc_order: u64,
}

impl UnitRecord {
    pub fn stamp(&self) -> LamportStamp {
        LamportStamp::new(self.lamport, self.agent.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnitEdge {
    pub from_unit: String,
    pub to_unit: String,
    pub variable: String,
}

#[derive(Debug, Clone, Default)]
pub struct Extracted {
    pub units: Vec<UnitRecord>,
    pub edges: Vec<UnitEdge>,
    pub docs: Vec<NotebookDoc>,
    pub warnings: Vec<String>,
}

/// Parse every recognized document in `files`.
pub fn parse_documents(files: &FileSet) -> Result<Vec<NotebookDoc>, IngestError> {
    files.iter().filter_map(|(p, b)| parse_entry(p, b)).collect()
}

/// Unit ids: the cell id, qualified by file path when two documents share it.
pub fn unit_ids(docs: &[NotebookDoc]) -> Vec<Vec<String>> {
    let mut count: BTreeMap<&str, usize> = BTreeMap::new();
    for d in docs {
        for c in &d.cells {
            *count.entry(c.cell_id.as_str()).or_default() += 1;
        }
    }
    docs.iter()
        .map(|d| {
            d.cells
                .iter()
                .map(|c| {
                    if count[c.cell_id.as_str()] > 1 {
                        format!("{}#{}", d.source_path, c.cell_id)
                    } else {
                        c.cell_id.clone()
                    }
                })
                .collect()
        })
        .collect()
}

/// Tags for every cell of `doc`, keyed by cell id. Imports anywhere in the
/// document are context for rule requirements.
pub fn doc_tags(doc: &NotebookDoc, rules: &RuleTable) -> BTreeMap<String, Vec<String>> {
    let facts: Vec<(&str, CodeFacts)> = doc.code_cells().map(|c| (c.cell_id.as_str(), facts_for(&c.source))).collect();
    let context: BTreeSet<String> = facts.iter().flat_map(|(_, f)| f.imports.iter().cloned()).collect();
    let mut out: BTreeMap<String, Vec<String>> = doc.cells.iter().map(|c| (c.cell_id.clone(), Vec::new())).collect();
    for (id, f) in &facts {
        out.insert((*id).to_owned(), classify_unit_with_context(f, &context, rules).into_iter().map(|t| t.tag).collect());
    }
    out
}

/// Stamps for a new procedure state.
///
/// `previous` carries stamps of the prior state: a unit with identical
/// content keeps its stamp. Changed and new units are stamped by `clock`
/// in execution order. Markdown and never-run cells inherit the stamp of
/// the closest preceding unit in the document.
pub fn extract_units(
    procedure_id: &str,
    files: &FileSet,
    rules: &RuleTable,
    trace: Option<&[TraceEvent]>,
    previous: &[UnitRecord],
    clock: &mut ClockState,
) -> Result<Extracted, IngestError> {
    let docs = parse_documents(files)?;
    let ids = unit_ids(&docs);
    let prev: BTreeMap<(&str, &str), &UnitRecord> =
        previous.iter().map(|u| ((u.unit_id.as_str(), u.content.as_str()), u)).collect();
    for u in previous {
        clock.time = clock.time.max(u.lamport);
    }
    let traced = trace.map(latest_stamps).unwrap_or_default();
    for s in traced.values() {
        clock.time = clock.time.max(s.time);
    }

    let mut out = Extracted::default();
    let mut doc_order = 0u64;
    for (doc, doc_ids) in docs.iter().zip(&ids) {
        let order = match trace {
            Some(events) => order_from_trace(doc, events),
            None => reconstruct_execution_order(doc),
        };
        out.warnings.extend(order.warnings.iter().cloned());
        let tags = doc_tags(doc, rules);
        let id_of: BTreeMap<&str, &str> =
            doc.cells.iter().zip(doc_ids).map(|(c, u)| (c.cell_id.as_str(), u.as_str())).collect();

        let mut stamps: BTreeMap<&str, LamportStamp> = BTreeMap::new();
        for cell_id in &order.executed {
            let cell = doc.cell(cell_id).expect("order lists document cells");
            let uid = id_of[cell_id.as_str()];
            let stamp = match (prev.get(&(uid, cell.source.as_str())), traced.get(cell_id)) {
                (Some(p), _) => p.stamp(),
                (None, Some(t)) => t.clone(),
                (None, None) => clock.tick(),
            };
            stamps.insert(cell_id, stamp);
        }

        let mut line = 1u64;
        let mut last = LamportStamp::new(0, clock.agent.clone());
        for (cell, uid) in doc.cells.iter().zip(doc_ids) {
            let stamp = match stamps.get(cell.cell_id.as_str()) {
                Some(s) => s.clone(),
                None => match prev.get(&(uid.as_str(), cell.source.as_str())) {
                    Some(p) => p.stamp(),
                    None => last.clone(),
                },
            };
            last = stamp.clone();
            let (start, end) = match (cell.cell_metadata.get("start_line"), cell.cell_metadata.get("end_line")) {
                (Some(s), Some(e)) => (s.as_u64().unwrap_or(line), e.as_u64().unwrap_or(line)),
                _ => {
                    let n = cell.source.lines().count().max(1) as u64;
                    (line, line + n - 1)
                }
            };
            line = end + 1;
            let t = tags[&cell.cell_id].clone();
            out.units.push(UnitRecord {
                unit_id: uid.clone(),
                procedure_id: procedure_id.to_owned(),
                file_path: doc.source_path.clone(),
                cell_id: cell.cell_id.clone(),
                kind: cell.kind,
                content: cell.source.clone(),
                start_line: start,
                end_line: end,
                semantic_tag: t.first().cloned(),
                tags: t,
                lamport: stamp.time,
                agent: stamp.agent,
                doc_order,
            });
            doc_order += 1;
        }

        let facts: Vec<(String, CodeFacts)> =
            doc.code_cells().map(|c| (id_of[c.cell_id.as_str()].to_owned(), facts_for(&c.source))).collect();
        let exec: Vec<String> = order.executed.iter().chain(&order.unexecuted).map(|c| id_of[c.as_str()].to_owned()).collect();
        out.edges.extend(
            infer_dependencies(&facts, &exec)
                .into_iter()
                .map(|e| UnitEdge { from_unit: e.from_unit, to_unit: e.to_unit, variable: e.variable }),
        );
    }
    out.docs = docs;
    Ok(out)
}

/// Units sorted by causal rank: stamp, then document order.
pub fn causal_sort(units: &mut [UnitRecord]) {
    units.sort_by(|a, b| a.stamp().cmp(&b.stamp()).then(a.doc_order.cmp(&b.doc_order)));
}
