use std::fs;

use rusqlite::{params, OptionalExtension};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::{io_at, now, read_patch, write_patch, Result, Store, StoreError};
use crate::canonical::{params_hash, to_canonical_file, to_canonical_string};
use crate::fileset::FileSet;
use crate::lens::{self, chain_params_hash, compose_lenses, resolve_alias, EvalContext, Lens, LensError};
use crate::patch::{apply_patch, generate_patch_with};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LensStep {
    pub lens_id: String,
    pub parameters: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViewRecord {
    pub view_id: String,
    pub procedure_id: String,
    /// Lens id, or ids joined with `+` for a chain.
    pub lens_id: String,
    pub lens_chain: Vec<LensStep>,
    pub params_hash: String,
    /// View directory, relative to the store home.
    pub path: String,
    pub complement_ref: Option<String>,
    pub source_version: String,
    pub created_at: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompositionRecord {
    pub composition_id: String,
    pub name: String,
    pub lens_sequence: Vec<String>,
    /// Schema-compatibility proof for each adjacent pair.
    pub validation_rules: Vec<Vec<String>>,
    pub created_at: String,
}

/// Bookkeeping directory next to a view: record and complement patch.
pub(super) fn sidecar_path(view_path: &str) -> String {
    format!("{view_path}.pkl")
}

const VIEW_SELECT: &str =
    "SELECT ViewID, ProcedureID, LensID, LensChain, ParamsHash, Path, ComplementRef, SourceVersion, CreatedAt FROM Views";

fn view_row(r: &rusqlite::Row<'_>) -> rusqlite::Result<ViewRecord> {
    let chain: String = r.get(3)?;
    Ok(ViewRecord {
        view_id: r.get(0)?,
        procedure_id: r.get(1)?,
        lens_id: r.get(2)?,
        lens_chain: serde_json::from_str(&chain).unwrap_or_default(),
        params_hash: r.get(4)?,
        path: r.get(5)?,
        complement_ref: r.get(6)?,
        source_version: r.get(7)?,
        created_at: r.get(8)?,
        diagnostics: Vec::new(),
    })
}

impl Store {
    pub fn has_lens(&self, id: &str) -> Result<bool> {
        Ok(self.conn.query_row("SELECT EXISTS(SELECT 1 FROM Lenses WHERE LensID = ?1)", [id], |r| r.get(0))?)
    }

    /// Register a lens definition. Unknown schema ids are registered with
    /// no generalizations. Definitions are immutable once registered.
    pub fn register_lens(&mut self, lens: &Lens) -> Result<String> {
        lens.validate()?;
        let definition = to_canonical_string(lens);
        if let Some(existing) = self
            .conn
            .query_row("SELECT Definition FROM Lenses WHERE LensID = ?1", [&lens.lens_id], |r| r.get::<_, String>(0))
            .optional()?
        {
            if existing == definition {
                return Ok(lens.lens_id.clone());
            }
            return Err(LensError::InvalidLens(format!("lens {} is already registered with a different definition", lens.lens_id)).into());
        }
        let rel = format!("lenses/{}.json", lens.lens_id);
        let path = self.home.join(&rel);
        fs::write(&path, lens.to_json()).map_err(io_at(&path))?;
        let tx = self.conn.transaction()?;
        for s in [&lens.source_schema, &lens.target_schema] {
            tx.execute("INSERT OR IGNORE INTO Schemas (SchemaID) VALUES (?1)", [s])?;
        }
        tx.execute(
            "INSERT INTO Lenses (LensID, Type, Description, SourceSchema, TargetSchema, PatchTemplate, InversePatchTemplate, ParametersSchema, Definition, Path)
             VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8, ?9, ?10)",
            params![
                lens.lens_id,
                lens.lens_type.as_str(),
                lens.description,
                lens.source_schema,
                lens.target_schema,
                to_canonical_string(&lens.patch_template),
                to_canonical_string(&lens.inverse_patch_template),
                to_canonical_string(&lens.parameters_schema),
                definition,
                rel
            ],
        )?;
        tx.commit()?;
        Ok(lens.lens_id.clone())
    }

    /// A registered lens by id or alias.
    pub fn lens(&self, name: &str) -> Result<Lens> {
        let id = if self.has_lens(name)? { name.to_owned() } else { resolve_alias(name) };
        let def: Option<String> =
            self.conn.query_row("SELECT Definition FROM Lenses WHERE LensID = ?1", [&id], |r| r.get(0)).optional()?;
        let def = def.ok_or_else(|| LensError::UnknownLens(name.to_owned()))?;
        Ok(serde_json::from_str(&def).map_err(|e| LensError::InvalidLens(e.to_string()))?)
    }

    pub fn list_lenses(&self) -> Result<Vec<Lens>> {
        let mut stmt = self.conn.prepare("SELECT Definition FROM Lenses ORDER BY LensID")?;
        let defs: Vec<String> = stmt.query_map([], |r| r.get(0))?.collect::<rusqlite::Result<_>>()?;
        defs.iter()
            .map(|d| serde_json::from_str(d).map_err(|e| LensError::InvalidLens(e.to_string()).into()))
            .collect()
    }

    /// Register a named lens sequence after checking each adjacent pair.
    pub fn register_composition(&mut self, name: &str, lens_names: &[String]) -> Result<CompositionRecord> {
        if lens_names.is_empty() {
            return Err(LensError::InvalidLens("a composition needs at least one lens".into()).into());
        }
        let reg = self.schema_registry()?;
        let lenses: Vec<Lens> = lens_names.iter().map(|n| self.lens(n)).collect::<Result<_>>()?;
        let mut proofs = Vec::new();
        let mut acc = lenses[0].clone();
        for l in &lenses[1..] {
            let composed = compose_lenses(&acc, l, &reg)?;
            proofs.push(reg.proof(&acc.target_schema, &l.source_schema).expect("compose_lenses checked compatibility"));
            acc = composed;
        }
        let n: u64 = self.conn.query_row("SELECT COUNT(*) FROM Compositions", [], |r| r.get(0))?;
        let record = CompositionRecord {
            composition_id: format!("composition-{}", n + 1),
            name: name.to_owned(),
            lens_sequence: lenses.iter().map(|l| l.lens_id.clone()).collect(),
            validation_rules: proofs,
            created_at: now(),
        };
        self.conn
            .execute(
                "INSERT INTO Compositions (CompositionID, Name, LensSequence, ValidationRules, CreatedAt) VALUES (?1, ?2, ?3, ?4, ?5)",
                params![
                    record.composition_id,
                    record.name,
                    to_canonical_string(&record.lens_sequence),
                    to_canonical_string(&record.validation_rules),
                    record.created_at
                ],
            )
            .map_err(|e| match e {
                rusqlite::Error::SqliteFailure(f, _) if f.code == rusqlite::ErrorCode::ConstraintViolation => {
                    StoreError::DuplicateName(name.to_owned())
                }
                e => e.into(),
            })?;
        Ok(record)
    }

    pub fn list_compositions(&self) -> Result<Vec<CompositionRecord>> {
        let mut stmt =
            self.conn.prepare("SELECT CompositionID, Name, LensSequence, ValidationRules, CreatedAt FROM Compositions ORDER BY CompositionID")?;
        let rows = stmt
            .query_map([], |r| {
                Ok(CompositionRecord {
                    composition_id: r.get(0)?,
                    name: r.get(1)?,
                    lens_sequence: serde_json::from_str(&r.get::<_, String>(2)?).unwrap_or_default(),
                    validation_rules: serde_json::from_str(&r.get::<_, String>(3)?).unwrap_or_default(),
                    created_at: r.get(4)?,
                })
            })?
            .collect::<rusqlite::Result<_>>()?;
        Ok(rows)
    }

    /// Lens steps for a name: a registered composition expands to its
    /// sequence, anything else is a single lens.
    pub fn expand_lens_name(&self, name: &str) -> Result<Vec<String>> {
        let seq: Option<String> =
            self.conn.query_row("SELECT LensSequence FROM Compositions WHERE Name = ?1", [name], |r| r.get(0)).optional()?;
        Ok(match seq {
            Some(s) => serde_json::from_str(&s).unwrap_or_default(),
            None => vec![name.to_owned()],
        })
    }

    pub fn view(&self, view_id: &str) -> Result<ViewRecord> {
        let mut v = self
            .conn
            .query_row(&format!("{VIEW_SELECT} WHERE ViewID = ?1"), [view_id], view_row)
            .optional()?
            .ok_or_else(|| StoreError::ViewNotFound(view_id.to_owned()))?;
        if let Ok(bytes) = fs::read(self.home.join(sidecar_path(&v.path)).join("view.json")) {
            if let Ok(saved) = serde_json::from_slice::<ViewRecord>(&bytes) {
                v.diagnostics = saved.diagnostics;
            }
        }
        Ok(v)
    }

    pub fn list_views(&self, procedure_id: Option<&str>) -> Result<Vec<ViewRecord>> {
        let mut out = Vec::new();
        let mut stmt = self.conn.prepare(&format!("{VIEW_SELECT} WHERE ?1 IS NULL OR ProcedureID = ?1 ORDER BY ViewID"))?;
        for v in stmt.query_map([procedure_id], view_row)? {
            out.push(v?);
        }
        Ok(out)
    }

    /// Files of a materialized view.
    pub fn view_files(&self, view: &ViewRecord) -> Result<FileSet> {
        let dir = self.home.join(&view.path);
        FileSet::load_dir(&dir).map_err(|e| StoreError::Storage(format!("view {}: {e}", view.view_id)))
    }

    /// Materialize a lens chain over a procedure version (head by default).
    /// An existing view with the same chain, parameters and source version
    /// is reused.
    pub fn apply_lens(&mut self, procedure_id: &str, chain: &[LensStep], at_version: Option<&str>) -> Result<ViewRecord> {
        if chain.is_empty() {
            return Err(LensError::InvalidLens("empty lens chain".into()).into());
        }
        let proc = self.procedure(procedure_id)?;
        let version = at_version.unwrap_or(&proc.head).to_owned();
        self.version(procedure_id, &version)?;
        let reg = self.schema_registry()?;
        let mut steps = Vec::new();
        for s in chain {
            for id in self.expand_lens_name(&s.lens_id)? {
                steps.push((self.lens(&id)?, s.parameters.clone()));
            }
        }
        let first = &steps[0].0;
        if !reg.compatible(&proc.schema, &first.source_schema) {
            return Err(LensError::SchemaMismatch {
                lens: first.lens_id.clone(),
                expected: first.source_schema.clone(),
                found: proc.schema.clone(),
            }
            .into());
        }
        let mut acc = first.clone();
        for (l, _) in &steps[1..] {
            acc = compose_lenses(&acc, l, &reg)?;
        }
        for (l, p) in &steps {
            l.resolve_params(p)?;
        }

        let lens_chain: Vec<LensStep> =
            steps.iter().map(|(l, p)| LensStep { lens_id: l.lens_id.clone(), parameters: p.clone() }).collect();
        let lens_id = lens_chain.iter().map(|s| s.lens_id.as_str()).collect::<Vec<_>>().join("+");
        let hash = match lens_chain.as_slice() {
            [one] => params_hash(&one.parameters),
            many => chain_params_hash(&many.iter().map(|s| (s.lens_id.clone(), s.parameters.clone())).collect::<Vec<_>>()),
        };
        let name = format!("{lens_id}-{hash}");
        let view_id = format!("{procedure_id}-{name}");
        let rel = format!("procedures/{procedure_id}/views/{name}");

        if let Ok(cached) = self.view(&view_id) {
            let complement_ok = cached
                .complement_ref
                .as_ref()
                .is_none_or(|c| self.home.join(sidecar_path(&cached.path)).join(format!("{c}.diff")).is_file());
            if cached.source_version == version && self.home.join(&cached.path).is_dir() && complement_ok {
                return Ok(cached);
            }
        }

        let _lock = self.lock_procedure(procedure_id)?;
        let source = self.reconstruct_version(procedure_id, &version)?;
        let versions = self.version_source(procedure_id);
        let ctx = EvalContext { rules: &self.rules, versions: &versions, context_lines: self.config.context_lines };
        let mut files = source.clone();
        let mut diagnostics = Vec::new();
        for (l, p) in &steps {
            let m = lens::forward(l, p, &files, &ctx)?;
            files = m.files;
            diagnostics.extend(m.diagnostics);
        }
        let naive = naive_inverse(&steps, &files)?;
        let complement = generate_patch_with(&naive, &source, self.config.context_lines, &self.rules);
        let complement_ref = (!complement.is_empty()).then(|| complement.patch_id.clone());

        let dir = self.home.join(&rel);
        let side = self.home.join(sidecar_path(&rel));
        for d in [&dir, &side] {
            if d.exists() {
                fs::remove_dir_all(d).map_err(io_at(d))?;
            }
        }
        fs::create_dir_all(&dir).map_err(io_at(&dir))?;
        files.write_dir(&dir).map_err(io_at(&dir))?;
        fs::create_dir_all(&side).map_err(io_at(&side))?;
        if complement_ref.is_some() {
            write_patch(&side, &complement)?;
        }
        let record = ViewRecord {
            view_id: view_id.clone(),
            procedure_id: procedure_id.to_owned(),
            lens_id: lens_id.clone(),
            lens_chain,
            params_hash: hash.clone(),
            path: rel.clone(),
            complement_ref,
            source_version: version,
            created_at: super::now(),
            diagnostics,
        };
        fs::write(side.join("view.json"), to_canonical_file(&record)).map_err(io_at(&side))?;
        let parameters = match record.lens_chain.as_slice() {
            [one] => to_canonical_string(&one.parameters),
            many => to_canonical_string(&many.iter().map(|s| &s.parameters).collect::<Vec<_>>()),
        };
        self.conn.execute(
            "INSERT OR REPLACE INTO Views (ViewID, ProcedureID, LensID, Parameters, Path, CreatedAt, LensChain, ParamsHash, ComplementRef, SourceVersion)
             VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8, ?9, ?10)",
            params![
                record.view_id,
                record.procedure_id,
                record.lens_id,
                parameters,
                record.path,
                record.created_at,
                to_canonical_string(&record.lens_chain),
                record.params_hash,
                record.complement_ref,
                record.source_version
            ],
        )?;
        Ok(record)
    }

    /// Exact source state of a view: inverse templates, then the complement.
    pub fn invert_view(&self, view_id: &str) -> Result<FileSet> {
        let view = self.view(view_id)?;
        let files = self.view_files(&view)?;
        let steps: Vec<(Lens, Map<String, Value>)> =
            view.lens_chain.iter().map(|s| Ok((self.lens(&s.lens_id)?, s.parameters.clone()))).collect::<Result<_>>()?;
        let naive = naive_inverse(&steps, &files)?;
        match &view.complement_ref {
            None => Ok(naive),
            Some(c) => {
                let side = self.home.join(sidecar_path(&view.path));
                if !side.join(format!("{c}.diff")).is_file() {
                    return Err(LensError::MissingComplement(c.clone()).into());
                }
                let patch = read_patch(&side, c)?;
                Ok(apply_patch(&patch, &naive)?)
            }
        }
    }

    /// Directory holding a view's record and complement patch.
    pub fn complement_dir(&self, view: &ViewRecord) -> std::path::PathBuf {
        self.home.join(sidecar_path(&view.path))
    }
}

fn naive_inverse(steps: &[(Lens, Map<String, Value>)], view: &FileSet) -> Result<FileSet, LensError> {
    let mut current = view.clone();
    for (l, p) in steps.iter().rev() {
        current = lens::inverse(l, p, &current)?;
    }
    Ok(current)
}
