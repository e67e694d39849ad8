//! The PKL query language: `FIND`, `GET UNITS`, `VIEW`, `DIFF` and
//! `GET STEPS`, compiled to SQL over the store index.

mod fuzzy;
mod parse;

use rusqlite::types::Value as SqlValue;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::report::{semantic_diff_states, DiffReport};
use crate::patch::ParamRule;
use crate::store::units::UnitRecord;
use crate::store::{procedure_row, unit_row, LensStep, ProcedureRecord, Store, StoreError, ViewRecord, UNIT_SELECT};

pub use fuzzy::{normalize_tag, register_functions, tag_matches, trigram_similarity, trigrams};
pub use parse::{parse_query, role_tag, CmpOp, LensRef, ParseError, Pred, Query, PROCEDURE_FIELDS, UNIT_FIELDS};

#[derive(Debug, thiserror::Error)]
pub enum QueryError {
    #[error(transparent)]
    Parse(#[from] ParseError),
    #[error("unknown procedure {0}")]
    UnknownProcedure(String),
    #[error("steps {from} to {to} out of bounds: procedure has {count} units")]
    RangeOutOfBounds { from: u64, to: u64, count: u64 },
    #[error(transparent)]
    Store(StoreError),
}

impl From<StoreError> for QueryError {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::ProcedureNotFound(p) => QueryError::UnknownProcedure(p),
            other => QueryError::Store(other),
        }
    }
}

impl From<rusqlite::Error> for QueryError {
    fn from(e: rusqlite::Error) -> Self {
        QueryError::Store(e.into())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "result", rename_all = "snake_case")]
pub enum QueryResult {
    Procedures(Vec<ProcedureRecord>),
    Units(Vec<UnitRecord>),
    View(ViewRecord),
    Diff(DiffReport),
}

/// Where a predicate is evaluated: over procedures `p` or units `u`.
#[derive(Clone, Copy, PartialEq, Eq)]
enum Scope {
    Procedure,
    Unit,
}

fn compile(pred: &Pred, scope: Scope, threshold: f64, args: &mut Vec<SqlValue>) -> String {
    match pred {
        Pred::And(a, b) => format!("({} AND {})", compile(a, scope, threshold, args), compile(b, scope, threshold, args)),
        Pred::Or(a, b) => format!("({} OR {})", compile(a, scope, threshold, args), compile(b, scope, threshold, args)),
        Pred::Cmp { field, op, value } => {
            let mut bind = |v: SqlValue| {
                args.push(v);
                format!("?{}", args.len())
            };
            let text = |col: &str, bind: &mut dyn FnMut(SqlValue) -> String| match op {
                CmpOp::Eq => format!("{col} = {}", bind(SqlValue::Text(value.clone()))),
                CmpOp::Contains => format!("instr({col}, {}) > 0", bind(SqlValue::Text(value.clone()))),
                CmpOp::Fuzzy => format!(
                    "pkl_trigram({}, {col}) >= {}",
                    bind(SqlValue::Text(value.clone())),
                    bind(SqlValue::Real(threshold))
                ),
            };
            let tag_test = |json_col: &str, bind: &mut dyn FnMut(SqlValue) -> String| match op {
                CmpOp::Fuzzy => format!(
                    "EXISTS (SELECT 1 FROM json_each({json_col}) WHERE pkl_trigram({}, json_each.value) >= {})",
                    bind(SqlValue::Text(value.clone())),
                    bind(SqlValue::Real(threshold))
                ),
                _ => format!(
                    "EXISTS (SELECT 1 FROM json_each({json_col}) WHERE pkl_tag_match(json_each.value, {}))",
                    bind(SqlValue::Text(value.clone()))
                ),
            };
            match (scope, field.as_str()) {
                (Scope::Procedure, "tags") => {
                    let own = tag_test("p.Tags", &mut bind);
                    let units = tag_test("u.Tags", &mut bind);
                    format!("({own} OR EXISTS (SELECT 1 FROM Units u WHERE u.ProcedureID = p.ProcedureID AND {units}))")
                }
                (Scope::Procedure, "content") => {
                    format!("EXISTS (SELECT 1 FROM Units u WHERE u.ProcedureID = p.ProcedureID AND {})", text("u.Content", &mut bind))
                }
                (Scope::Procedure, f) => text(procedure_column(f), &mut bind),
                (Scope::Unit, "tags") => tag_test("u.Tags", &mut bind),
                (Scope::Unit, f) => text(unit_column(f), &mut bind),
            }
        }
    }
}

fn procedure_column(field: &str) -> &'static str {
    match field {
        "name" => "p.Name",
        "id" => "p.ProcedureID",
        "description" => "p.Description",
        "schema" => "p.Schema",
        other => unreachable!("parser admits only procedure fields, got {other}"),
    }
}

fn unit_column(field: &str) -> &'static str {
    match field {
        "content" => "u.Content",
        "file" => "u.FilePath",
        "kind" => "u.Kind",
        "id" => "u.UnitID",
        "procedure" => "u.ProcedureID",
        other => unreachable!("parser admits only unit fields, got {other}"),
    }
}

pub fn find_procedures(store: &Store, filter: &Pred) -> Result<Vec<ProcedureRecord>, QueryError> {
    let mut args = Vec::new();
    let cond = compile(filter, Scope::Procedure, store.config().fuzzy_threshold, &mut args);
    let sql = format!(
        "SELECT p.ProcedureID, p.Name, p.BasePath, p.SourcePath, p.Description, p.Tags, p.Schema, p.Head, p.CreatedAt
         FROM Procedures p WHERE {cond} ORDER BY p.ProcedureID"
    );
    let mut stmt = store.connection().prepare(&sql)?;
    let rows = stmt.query_map(rusqlite::params_from_iter(args), procedure_row)?.collect::<rusqlite::Result<_>>()?;
    Ok(rows)
}

pub fn find_units(store: &Store, procedure_id: Option<&str>, filter: Option<&Pred>) -> Result<Vec<UnitRecord>, QueryError> {
    let mut args = Vec::new();
    let mut conds = Vec::new();
    if let Some(p) = procedure_id {
        args.push(SqlValue::Text(p.to_owned()));
        conds.push("u.ProcedureID = ?1".to_owned());
    }
    if let Some(f) = filter {
        conds.push(compile(f, Scope::Unit, store.config().fuzzy_threshold, &mut args));
    }
    let cond = if conds.is_empty() { "1".to_owned() } else { conds.join(" AND ") };
    let sql = format!("{} u WHERE {cond} ORDER BY u.ProcedureID, u.DocOrder", UNIT_SELECT);
    let mut stmt = store.connection().prepare(&sql)?;
    let rows = stmt.query_map(rusqlite::params_from_iter(args), unit_row)?.collect::<rusqlite::Result<_>>()?;
    Ok(rows)
}

/// Units ranked `from..=to` (1-based) by Lamport stamp, then document order.
pub fn get_steps(store: &Store, procedure_id: &str, from: u64, to: u64) -> Result<Vec<UnitRecord>, QueryError> {
    let count: u64 =
        store.connection().query_row("SELECT COUNT(*) FROM Units WHERE ProcedureID = ?1", [procedure_id], |r| r.get(0))?;
    if from < 1 || to < from || to > count {
        return Err(QueryError::RangeOutOfBounds { from, to, count });
    }
    let sql = format!("{UNIT_SELECT} WHERE ProcedureID = ?1 ORDER BY LamportClock, Agent, DocOrder LIMIT ?2 OFFSET ?3");
    let mut stmt = store.connection().prepare(&sql)?;
    let rows = stmt
        .query_map(rusqlite::params![procedure_id, to - from + 1, from - 1], unit_row)?
        .collect::<rusqlite::Result<_>>()?;
    Ok(rows)
}

pub fn execute_query(store: &mut Store, query: &Query) -> Result<QueryResult, QueryError> {
    match query {
        Query::Find { filter } => Ok(QueryResult::Procedures(find_procedures(store, filter)?)),
        Query::Units { target, filter } => {
            let pid = match target {
                Some(t) => Some(store.find_procedure(t)?.procedure_id),
                None => None,
            };
            Ok(QueryResult::Units(find_units(store, pid.as_deref(), filter.as_ref())?))
        }
        Query::View { target, version, chain } => {
            let pid = store.find_procedure(target)?.procedure_id;
            let steps: Vec<LensStep> =
                chain.iter().map(|l| LensStep { lens_id: l.name.clone(), parameters: l.params.clone() }).collect();
            Ok(QueryResult::View(store.apply_lens(&pid, &steps, version.as_deref())?))
        }
        Query::Diff { target, from_version, other, to_version } => {
            let a = store.find_procedure(target)?.procedure_id;
            let b = match other {
                Some(o) => store.find_procedure(o)?.procedure_id,
                None => a.clone(),
            };
            if a == b {
                return Ok(QueryResult::Diff(store.semantic_diff(&a, from_version, to_version)?));
            }
            let from = store.reconstruct_version(&a, from_version)?;
            let to = store.reconstruct_version(&b, to_version)?;
            let (diff_text, ops) =
                semantic_diff_states(&from, &to, store.rules(), &ParamRule::default(), store.config().context_lines)
                    .map_err(|e| QueryError::Store(e.into()))?;
            Ok(QueryResult::Diff(DiffReport {
                procedure_id: a.clone(),
                from_version: format!("{a}:{from_version}"),
                to_version: format!("{b}:{to_version}"),
                diff_text,
                ops,
            }))
        }
        Query::Steps { target, from, to } => {
            let pid = store.find_procedure(target)?.procedure_id;
            Ok(QueryResult::Units(get_steps(store, &pid, *from, *to)?))
        }
    }
}

pub fn run_query(store: &mut Store, text: &str) -> Result<QueryResult, QueryError> {
    let q = parse_query(text)?;
    execute_query(store, &q)
}

fn table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |cells: Vec<String>| {
        let n = cells.len();
        let mut s = String::new();
        for (i, (c, w)) in cells.into_iter().zip(&widths).enumerate() {
            if i + 1 == n {
                s.push_str(&c);
            } else {
                s.push_str(&format!("{c:<w$}  "));
            }
        }
        s.trim_end().to_owned() + "\n"
    };
    let mut out = line(header.iter().map(|h| (*h).to_owned()).collect());
    for r in rows {
        out.push_str(&line(r.clone()));
    }
    out
}

fn first_line(s: &str) -> String {
    let l = s.lines().next().unwrap_or("");
    if l.chars().count() > 60 {
        format!("{}...", l.chars().take(57).collect::<String>())
    } else {
        l.to_owned()
    }
}

impl QueryResult {
    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("results serialize")
    }

    pub fn render_text(&self) -> String {
        match self {
            QueryResult::Procedures(ps) => table(
                &["ID", "NAME", "SCHEMA", "HEAD", "TAGS"],
                &ps.iter()
                    .map(|p| vec![p.procedure_id.clone(), p.name.clone(), p.schema.clone(), p.head.clone(), p.tags.join(", ")])
                    .collect::<Vec<_>>(),
            ),
            QueryResult::Units(us) => table(
                &["UNIT", "PROCEDURE", "STAMP", "LINES", "TAGS", "CONTENT"],
                &us.iter()
                    .map(|u| {
                        vec![
                            u.unit_id.clone(),
                            u.procedure_id.clone(),
                            format!("{}@{}", u.lamport, u.agent),
                            format!("{}-{}", u.start_line, u.end_line),
                            u.tags.join(", "),
                            first_line(&u.content),
                        ]
                    })
                    .collect::<Vec<_>>(),
            ),
            QueryResult::View(v) => {
                let mut s = format!("{}\n", v.view_id);
                s.push_str(&format!("path: {}\n", v.path));
                s.push_str(&format!("source: {}\n", v.source_version));
                if let Some(c) = &v.complement_ref {
                    s.push_str(&format!("complement: {c}\n"));
                }
                for d in &v.diagnostics {
                    s.push_str(&format!("note: {d}\n"));
                }
                s
            }
            QueryResult::Diff(d) => d.render_text(),
        }
    }
}
