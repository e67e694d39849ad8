//! Execution trace files (`*.pkltrace.jsonl`) written by the in-kernel
//! capture hook: one JSON event per line.

use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use super::{CellKind, ExecutionOrder, NotebookDoc};
use crate::clock::LamportStamp;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceEventKind {
    ExecuteStart,
    ExecuteEnd,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceEvent {
    pub event: TraceEventKind,
    pub cell_id: String,
    pub execution_count: u64,
    pub wall_time: DateTime<Utc>,
    /// Kernel session id; a restart starts a new agent.
    pub agent: String,
    pub lamport: u64,
}

impl TraceEvent {
    pub fn stamp(&self) -> LamportStamp {
        LamportStamp::new(self.lamport, self.agent.clone())
    }
}

#[derive(Debug, thiserror::Error)]
#[error("trace line {line}: {message}")]
pub struct TraceError {
    pub line: usize,
    pub message: String,
}

/// Parse a line-delimited trace. Blank lines are ignored.
pub fn parse_trace(text: &str) -> Result<Vec<TraceEvent>, TraceError> {
    let mut events: Vec<TraceEvent> = Vec::new();
    let mut last_per_agent: BTreeMap<String, u64> = BTreeMap::new();
    let mut open: BTreeMap<(String, String), u64> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let ev: TraceEvent =
            serde_json::from_str(line).map_err(|e| TraceError { line: lineno, message: e.to_string() })?;
        if let Some(prev) = last_per_agent.get(&ev.agent) {
            if ev.lamport <= *prev {
                return Err(TraceError {
                    line: lineno,
                    message: format!("lamport {} does not increase for agent {}", ev.lamport, ev.agent),
                });
            }
        }
        last_per_agent.insert(ev.agent.clone(), ev.lamport);
        let key = (ev.agent.clone(), ev.cell_id.clone());
        match ev.event {
            TraceEventKind::ExecuteStart => {
                open.insert(key, ev.execution_count);
            }
            TraceEventKind::ExecuteEnd => {
                if open.remove(&key) != Some(ev.execution_count) {
                    return Err(TraceError {
                        line: lineno,
                        message: format!("execute_end for {} without matching execute_start", ev.cell_id),
                    });
                }
            }
        }
        events.push(ev);
    }
    Ok(events)
}

/// Execution order implied by a trace: code cells ordered by the causal
/// position of their latest `execute_start`.
pub fn order_from_trace(doc: &NotebookDoc, events: &[TraceEvent]) -> ExecutionOrder {
    let mut latest: BTreeMap<&str, &TraceEvent> = BTreeMap::new();
    for ev in events.iter().filter(|e| e.event == TraceEventKind::ExecuteStart) {
        let slot = latest.entry(ev.cell_id.as_str()).or_insert(ev);
        if ev.stamp() > slot.stamp() {
            *slot = ev;
        }
    }
    let mut warnings = Vec::new();
    for id in latest.keys() {
        if doc.cell(id).is_none() {
            warnings.push(format!("trace references unknown cell {id}"));
        }
    }
    let mut executed: Vec<&TraceEvent> = Vec::new();
    let mut unexecuted = Vec::new();
    for cell in doc.cells.iter().filter(|c| c.kind == CellKind::Code) {
        match latest.get(cell.cell_id.as_str()) {
            Some(ev) => executed.push(ev),
            None => unexecuted.push(cell.cell_id.clone()),
        }
    }
    executed.sort_by_key(|ev| ev.stamp());
    ExecutionOrder {
        executed: executed.into_iter().map(|e| e.cell_id.clone()).collect(),
        unexecuted,
        warnings,
    }
}

/// Latest stamp per cell id, for seeding unit clocks.
pub fn latest_stamps(events: &[TraceEvent]) -> BTreeMap<String, LamportStamp> {
    let mut out: BTreeMap<String, LamportStamp> = BTreeMap::new();
    for ev in events {
        let stamp = ev.stamp();
        match out.get(&ev.cell_id) {
            Some(prev) if *prev >= stamp => {}
            _ => {
                out.insert(ev.cell_id.clone(), stamp);
            }
        }
    }
    out
}
