//! Procedure store: a directory tree of base snapshots, patch chains and
//! views, indexed by an SQLite database.
//!
//! ```text
//! $PKL_HOME/
//!   pkl.toml
//!   index.sqlite
//!   lenses/{lens-id}.json
//!   procedures/{procedure-id}/
//!     base/
//!     versions/v1/version.json
//!     versions/vN/{patch-id}.diff, {patch-id}.meta.json, blobs/, [snapshot/]
//!     views/{lens-id}-{params-hash}/
//!     views/{lens-id}-{params-hash}.pkl/
//! ```

mod schema;
pub mod units;
mod views;

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File, OpenOptions, TryLockError};
use std::io;
use std::path::{Path, PathBuf};

use rusqlite::{params, Connection, OptionalExtension, Transaction};
use serde::{Deserialize, Serialize};

use crate::canonical::{to_canonical_file, to_canonical_string};
use crate::classify::{default_rules, RuleTable, RuleTableError};
use crate::clock::ClockState;
use crate::fileset::FileSet;
use crate::ingest::trace::{TraceError, TraceEvent};
use crate::ingest::IngestError;
use crate::lens::{builtin_lenses, LensError, SchemaRegistry, VersionSource};
use crate::patch::{apply_projected, generate_patch_with, project, unproject, ParamRule, Patch, PatchError};
use crate::report::{semantic_diff_states, DiffReport};
use units::{extract_units, UnitEdge, UnitRecord};

pub use views::{CompositionRecord, LensStep, ViewRecord};

pub const CONFIG_FILE: &str = "pkl.toml";
pub const HOME_ENV: &str = "PKL_HOME";
const LOCK_FILE: &str = ".pkl.lock";

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("storage error: {0}")]
    Storage(String),
    #[error("index error: {0}")]
    Index(#[from] rusqlite::Error),
    #[error("config error: {0}")]
    Config(String),
    #[error("procedure {0} not found")]
    ProcedureNotFound(String),
    #[error("version {version} of {procedure} not found")]
    VersionNotFound { procedure: String, version: String },
    #[error("a procedure named {0:?} already exists")]
    DuplicateName(String),
    #[error("no changes to commit")]
    NoChange,
    #[error("version chain of {procedure} is corrupt at {version}: {message}")]
    CorruptChain { procedure: String, version: String, message: String },
    #[error("view {0} not found")]
    ViewNotFound(String),
    #[error("{0} is locked by another writer")]
    Locked(String),
    #[error("foreign key violation: {0}")]
    ForeignKey(String),
    #[error(transparent)]
    Lens(#[from] LensError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Trace(#[from] TraceError),
    #[error(transparent)]
    Patch(#[from] PatchError),
    #[error(transparent)]
    Rules(#[from] RuleTableError),
}

impl From<io::Error> for StoreError {
    fn from(e: io::Error) -> Self {
        StoreError::Storage(e.to_string())
    }
}

fn io_at(path: &Path) -> impl Fn(io::Error) -> StoreError + '_ {
    move |e| StoreError::Storage(format!("{}: {e}", path.display()))
}

pub type Result<T, E = StoreError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StoreConfig {
    /// Index database file, relative to the store home unless absolute.
    pub index: String,
    /// Reject a second procedure with an existing name.
    pub strict_names: bool,
    /// Every this many versions a full snapshot is kept.
    pub checkpoint_interval: u64,
    pub context_lines: usize,
    pub fuzzy_threshold: f64,
    /// Agent id used for clock stamps of post-hoc ingestion.
    pub agent: String,
    /// Optional rule table file replacing the built-in tagging rules.
    pub rules: Option<String>,
}

impl Default for StoreConfig {
    fn default() -> Self {
        StoreConfig {
            index: "index.sqlite".into(),
            strict_names: false,
            checkpoint_interval: 16,
            context_lines: crate::patch::DEFAULT_CONTEXT_LINES,
            fuzzy_threshold: 0.35,
            agent: "pkl".into(),
            rules: None,
        }
    }
}

/// Store home: explicit flag, else `$PKL_HOME`, else `./.pkl`.
pub fn resolve_home(flag: Option<&Path>) -> PathBuf {
    if let Some(p) = flag {
        return p.to_owned();
    }
    match std::env::var_os(HOME_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => PathBuf::from(".pkl"),
    }
}

pub fn now() -> String {
    chrono::Utc::now().format("%Y-%m-%dT%H:%M:%S%.3fZ").to_string()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProcedureRecord {
    pub procedure_id: String,
    pub name: String,
    /// Base snapshot directory, relative to the store home.
    pub base_path: String,
    /// Where the base files were read from.
    pub source_path: String,
    pub description: String,
    pub tags: Vec<String>,
    pub schema: String,
    pub head: String,
    pub created_at: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VersionRecord {
    pub version_id: String,
    pub procedure_id: String,
    pub seq: u64,
    pub parent_version: Option<String>,
    pub patch_id: Option<String>,
    pub checkpoint: bool,
    pub message: Option<String>,
    pub created_at: String,
}

#[derive(Debug, Clone, Default)]
pub struct NewProcedure {
    pub name: String,
    pub base_path: PathBuf,
    pub description: String,
    pub tags: Vec<String>,
    /// Declared schema; detected from unit tags when absent.
    pub schema: Option<String>,
    pub trace: Option<Vec<TraceEvent>>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FsckReport {
    pub checked: usize,
    pub problems: Vec<String>,
}

impl FsckReport {
    pub fn is_clean(&self) -> bool {
        self.problems.is_empty()
    }
}

/// Exclusive advisory lock held for the lifetime of the value.
pub struct WriterLock {
    _file: File,
}

fn lock(path: &Path, what: &str) -> Result<WriterLock> {
    let file = OpenOptions::new().create(true).truncate(false).write(true).open(path).map_err(io_at(path))?;
    match file.try_lock() {
        Ok(()) => Ok(WriterLock { _file: file }),
        Err(TryLockError::WouldBlock) => Err(StoreError::Locked(what.to_owned())),
        Err(TryLockError::Error(e)) => Err(io_at(path)(e)),
    }
}

pub fn version_seq(version_id: &str) -> Option<u64> {
    version_id.strip_prefix('v').and_then(|n| n.parse().ok()).filter(|n| *n > 0)
}

fn read_source(path: &Path) -> Result<FileSet> {
    let meta = fs::metadata(path).map_err(io_at(path))?;
    if meta.is_dir() {
        return FileSet::load_dir(path).map_err(io_at(path));
    }
    let name = path
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| StoreError::Storage(format!("{}: bad file name", path.display())))?;
    let mut fs = FileSet::new();
    fs.insert(name, fs::read(path).map_err(io_at(path))?);
    Ok(fs)
}

/// Schema for a new procedure: training-specific tags mark an
/// ml-training-procedure, anything else is a notebook-procedure.
pub fn detect_schema(units: &[UnitRecord], files: &FileSet) -> &'static str {
    let training = units.iter().any(|u| u.tags.iter().any(|t| t == "model training" || t == "hyperparameter tuning"));
    let config = files.paths().any(|p| p.rsplit('/').next().is_some_and(|n| n.starts_with("model_config.")));
    if training || config {
        "ml-training-procedure"
    } else {
        "notebook-procedure"
    }
}

pub struct Store {
    home: PathBuf,
    conn: Connection,
    config: StoreConfig,
    rules: RuleTable,
}

impl Store {
    /// Open (creating if needed) the store at `home`.
    pub fn open(home: &Path) -> Result<Store> {
        let cfg_path = home.join(CONFIG_FILE);
        let config = match fs::read_to_string(&cfg_path) {
            Ok(text) => toml::from_str(&text).map_err(|e| StoreError::Config(format!("{}: {e}", cfg_path.display())))?,
            Err(e) if e.kind() == io::ErrorKind::NotFound => StoreConfig::default(),
            Err(e) => return Err(io_at(&cfg_path)(e)),
        };
        Store::open_with(home, config)
    }

    /// Open with an explicit configuration, writing it as the store's config file.
    pub fn open_with(home: &Path, config: StoreConfig) -> Result<Store> {
        if config.checkpoint_interval == 0 {
            return Err(StoreError::Config("checkpoint_interval must be positive".into()));
        }
        fs::create_dir_all(home.join("procedures")).map_err(io_at(home))?;
        fs::create_dir_all(home.join("lenses")).map_err(io_at(home))?;
        let cfg_path = home.join(CONFIG_FILE);
        if !cfg_path.exists() {
            let text = toml::to_string(&config).map_err(|e| StoreError::Config(e.to_string()))?;
            fs::write(&cfg_path, text).map_err(io_at(&cfg_path))?;
        }
        let rules = match &config.rules {
            Some(p) => {
                let path = home.join(p);
                RuleTable::from_json(&fs::read_to_string(&path).map_err(io_at(&path))?)?
            }
            None => default_rules(),
        };
        let conn = Connection::open(home.join(&config.index))?;
        conn.busy_timeout(std::time::Duration::from_secs(5))?;
        conn.execute_batch(schema::DDL)?;
        crate::query::register_functions(&conn)?;
        let mut store = Store { home: home.to_owned(), conn, config, rules };
        store.seed()?;
        Ok(store)
    }

    fn seed(&mut self) -> Result<()> {
        let reg = SchemaRegistry::builtin();
        let tx = self.conn.transaction()?;
        for id in reg.ids() {
            tx.execute("INSERT OR IGNORE INTO Schemas (SchemaID) VALUES (?1)", [id])?;
        }
        for (s, g) in reg.edges() {
            tx.execute("INSERT OR IGNORE INTO SchemaGeneralizations (Specific, General) VALUES (?1, ?2)", [s, g])?;
        }
        tx.commit()?;
        for lens in builtin_lenses() {
            if !self.has_lens(&lens.lens_id)? {
                self.register_lens(&lens)?;
            }
        }
        Ok(())
    }

    pub fn home(&self) -> &Path {
        &self.home
    }

    pub fn config(&self) -> &StoreConfig {
        &self.config
    }

    /// Per-invocation overrides; not written back to `pkl.toml`.
    pub fn config_mut(&mut self) -> &mut StoreConfig {
        &mut self.config
    }

    pub fn rules(&self) -> &RuleTable {
        &self.rules
    }

    pub fn connection(&self) -> &Connection {
        &self.conn
    }

    fn procedure_dir(&self, id: &str) -> PathBuf {
        self.home.join("procedures").join(id)
    }

    fn version_dir(&self, id: &str, version: &str) -> PathBuf {
        self.procedure_dir(id).join("versions").join(version)
    }

    /// Take the single-writer lock of a procedure.
    pub fn lock_procedure(&self, id: &str) -> Result<WriterLock> {
        lock(&self.procedure_dir(id).join(LOCK_FILE), id)
    }

    fn next_procedure_id(&self) -> Result<String> {
        let mut stmt = self.conn.prepare("SELECT ProcedureID FROM Procedures")?;
        let ids: Vec<String> = stmt.query_map([], |r| r.get(0))?.collect::<rusqlite::Result<_>>()?;
        let mut n = ids.iter().filter_map(|i| i.strip_prefix("procedure-")?.parse::<u64>().ok()).max().unwrap_or(0) + 1;
        while self.procedure_dir(&format!("procedure-{n}")).exists() {
            n += 1;
        }
        Ok(format!("procedure-{n}"))
    }

    /// Copy `base_path` into a new procedure with version v1 = base.
    pub fn create_procedure(&mut self, new: NewProcedure) -> Result<ProcedureRecord> {
        let files = read_source(&new.base_path)?;
        let _global = lock(&self.home.join(LOCK_FILE), "store")?;
        if self.config.strict_names {
            let exists: bool =
                self.conn.query_row("SELECT EXISTS(SELECT 1 FROM Procedures WHERE Name = ?1)", [&new.name], |r| r.get(0))?;
            if exists {
                return Err(StoreError::DuplicateName(new.name));
            }
        }
        let mut clock = ClockState::new(self.config.agent.clone());
        let extracted = extract_units("", &files, &self.rules, new.trace.as_deref(), &[], &mut clock)?;
        let schema = match &new.schema {
            Some(s) => {
                if !self.schema_registry()?.contains(s) {
                    return Err(LensError::UnknownSchema(s.clone()).into());
                }
                s.clone()
            }
            None => detect_schema(&extracted.units, &files).to_owned(),
        };
        let id = self.next_procedure_id()?;
        let dir = self.procedure_dir(&id);
        for sub in ["base", "versions/v1", "views"] {
            fs::create_dir_all(dir.join(sub)).map_err(io_at(&dir))?;
        }
        files.write_dir(&dir.join("base")).map_err(io_at(&dir))?;
        let record = ProcedureRecord {
            procedure_id: id.clone(),
            name: new.name,
            base_path: format!("procedures/{id}/base"),
            source_path: new.base_path.display().to_string(),
            description: new.description,
            tags: new.tags,
            schema,
            head: "v1".into(),
            created_at: now(),
        };
        let v1 = VersionRecord {
            version_id: "v1".into(),
            procedure_id: id.clone(),
            seq: 1,
            parent_version: None,
            patch_id: None,
            checkpoint: true,
            message: None,
            created_at: record.created_at.clone(),
        };
        fs::write(dir.join("versions/v1/version.json"), to_canonical_file(&v1)).map_err(io_at(&dir))?;
        let mut units = extracted.units;
        for u in &mut units {
            u.procedure_id = id.clone();
        }
        let tx = self.conn.transaction()?;
        tx.execute(
            "INSERT INTO Procedures (ProcedureID, Name, BasePath, SourcePath, Description, Tags, Schema, Head, CreatedAt)
             VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8, ?9)",
            params![
                record.procedure_id,
                record.name,
                record.base_path,
                record.source_path,
                record.description,
                to_canonical_string(&record.tags),
                record.schema,
                record.head,
                record.created_at
            ],
        )?;
        insert_version(&tx, &v1)?;
        replace_units(&tx, &id, &units, &extracted.edges)?;
        tx.commit()?;
        Ok(record)
    }

    pub fn procedure(&self, id: &str) -> Result<ProcedureRecord> {
        self.conn
            .query_row(&format!("{PROCEDURE_SELECT} WHERE ProcedureID = ?1"), [id], procedure_row)
            .optional()?
            .ok_or_else(|| StoreError::ProcedureNotFound(id.to_owned()))
    }

    /// A procedure by id, or by name when no id matches (latest wins).
    pub fn find_procedure(&self, reference: &str) -> Result<ProcedureRecord> {
        match self.procedure(reference) {
            Err(StoreError::ProcedureNotFound(_)) => self
                .conn
                .query_row(&format!("{PROCEDURE_SELECT} WHERE Name = ?1 ORDER BY CreatedAt DESC, ProcedureID DESC LIMIT 1"), [reference], procedure_row)
                .optional()?
                .ok_or_else(|| StoreError::ProcedureNotFound(reference.to_owned())),
            other => other,
        }
    }

    pub fn list_procedures(&self) -> Result<Vec<ProcedureRecord>> {
        let mut stmt = self.conn.prepare(&format!("{PROCEDURE_SELECT} ORDER BY ProcedureID"))?;
        let rows = stmt.query_map([], procedure_row)?.collect::<rusqlite::Result<_>>()?;
        Ok(rows)
    }

    pub fn versions(&self, procedure_id: &str) -> Result<Vec<VersionRecord>> {
        self.procedure(procedure_id)?;
        let mut stmt = self.conn.prepare(&format!("{VERSION_SELECT} WHERE ProcedureID = ?1 ORDER BY Seq"))?;
        let rows = stmt.query_map([procedure_id], version_row)?.collect::<rusqlite::Result<_>>()?;
        Ok(rows)
    }

    pub fn version(&self, procedure_id: &str, version_id: &str) -> Result<VersionRecord> {
        self.procedure(procedure_id)?;
        self.conn
            .query_row(&format!("{VERSION_SELECT} WHERE ProcedureID = ?1 AND VersionID = ?2"), [procedure_id, version_id], version_row)
            .optional()?
            .ok_or_else(|| StoreError::VersionNotFound { procedure: procedure_id.to_owned(), version: version_id.to_owned() })
    }

    /// Record `new_state` as the next version of a procedure.
    pub fn commit_version(
        &mut self,
        procedure_id: &str,
        new_state: &FileSet,
        message: Option<&str>,
        trace: Option<&[TraceEvent]>,
    ) -> Result<VersionRecord> {
        let proc = self.procedure(procedure_id)?;
        let _lock = self.lock_procedure(procedure_id)?;
        let head = self.version(procedure_id, &proc.head)?;
        let current = self.reconstruct_version(procedure_id, &head.version_id)?;
        let seq = head.seq + 1;
        let version_id = format!("v{seq}");
        let mut patch = generate_patch_with(&current, new_state, self.config.context_lines, &self.rules)
            .with_versions(head.version_id.clone(), version_id.clone());
        if patch.is_empty() {
            return Err(StoreError::NoChange);
        }
        if let Some(m) = message {
            patch = patch.with_intent(m);
        }
        let replayed = unproject(&apply_projected(&patch, &project(&current))?).map_err(PatchError::from)?;
        if replayed != *new_state {
            return Err(StoreError::CorruptChain {
                procedure: procedure_id.to_owned(),
                version: version_id,
                message: "generated patch does not reproduce the new state".into(),
            });
        }
        let checkpoint = seq % self.config.checkpoint_interval == 0;
        let record = VersionRecord {
            version_id: version_id.clone(),
            procedure_id: procedure_id.to_owned(),
            seq,
            parent_version: Some(head.version_id.clone()),
            patch_id: Some(patch.patch_id.clone()),
            checkpoint,
            message: message.map(str::to_owned),
            created_at: now(),
        };
        let dir = self.version_dir(procedure_id, &version_id);
        if dir.exists() {
            fs::remove_dir_all(&dir).map_err(io_at(&dir))?;
        }
        write_patch(&dir, &patch)?;
        if checkpoint {
            new_state.write_dir(&dir.join("snapshot")).map_err(io_at(&dir))?;
        }
        fs::write(dir.join("version.json"), to_canonical_file(&record)).map_err(io_at(&dir))?;

        let previous = self.units(procedure_id)?;
        let mut clock = ClockState::new(self.config.agent.clone());
        let extracted = extract_units(procedure_id, new_state, &self.rules, trace, &previous, &mut clock)?;
        let tx = self.conn.transaction()?;
        insert_version(&tx, &record)?;
        tx.execute("UPDATE Procedures SET Head = ?1 WHERE ProcedureID = ?2", [&version_id, procedure_id])?;
        replace_units(&tx, procedure_id, &extracted.units, &extracted.edges)?;
        tx.commit()?;
        Ok(record)
    }

    /// Load the patch stored for a version (v2 onward).
    pub fn load_patch(&self, procedure_id: &str, version: &VersionRecord) -> Result<Patch> {
        let corrupt = |message: String| StoreError::CorruptChain {
            procedure: procedure_id.to_owned(),
            version: version.version_id.clone(),
            message,
        };
        let patch_id = version.patch_id.as_deref().ok_or_else(|| corrupt("no patch recorded".into()))?;
        let dir = self.version_dir(procedure_id, &version.version_id);
        let text = fs::read_to_string(dir.join(format!("{patch_id}.diff"))).map_err(|e| corrupt(format!("{patch_id}.diff: {e}")))?;
        let meta = fs::read(dir.join(format!("{patch_id}.meta.json"))).map_err(|e| corrupt(format!("{patch_id}.meta.json: {e}")))?;
        let mut blobs = BTreeMap::new();
        for h in Patch::blob_refs(&meta).map_err(|e| corrupt(e.to_string()))? {
            let b = fs::read(dir.join("blobs").join(&h)).map_err(|e| corrupt(format!("blob {h}: {e}")))?;
            blobs.insert(h, b);
        }
        let patch = Patch::from_stored(&text, Some(&meta), blobs).map_err(|e| corrupt(e.to_string()))?;
        if patch.patch_id != patch_id {
            return Err(corrupt(format!("{patch_id}.diff content hashes to {}", patch.patch_id)));
        }
        Ok(patch)
    }

    /// Byte-exact state of a version: the nearest checkpoint at or below
    /// it, plus the patches after that.
    pub fn reconstruct_version(&self, procedure_id: &str, version_id: &str) -> Result<FileSet> {
        let target = self.version(procedure_id, version_id)?;
        let start: u64 = self.conn.query_row(
            "SELECT MAX(Seq) FROM Versions WHERE ProcedureID = ?1 AND Seq <= ?2 AND Checkpoint = 1",
            params![procedure_id, target.seq],
            |r| r.get::<_, Option<u64>>(0),
        )?
        .unwrap_or(1);
        let corrupt = |version: String, message: String| StoreError::CorruptChain { procedure: procedure_id.to_owned(), version, message };
        let snapshot = if start == 1 {
            self.procedure_dir(procedure_id).join("base")
        } else {
            self.version_dir(procedure_id, &format!("v{start}")).join("snapshot")
        };
        let state = FileSet::load_dir(&snapshot).map_err(|e| corrupt(format!("v{start}"), format!("snapshot: {e}")))?;
        if start == target.seq {
            return Ok(state);
        }
        let mut stmt = self.conn.prepare(&format!("{VERSION_SELECT} WHERE ProcedureID = ?1 AND Seq > ?2 AND Seq <= ?3 ORDER BY Seq"))?;
        let chain: Vec<VersionRecord> =
            stmt.query_map(params![procedure_id, start, target.seq], version_row)?.collect::<rusqlite::Result<_>>()?;
        if chain.len() as u64 != target.seq - start {
            return Err(corrupt(version_id.to_owned(), "version sequence has gaps".into()));
        }
        let mut projected = project(&state);
        for v in &chain {
            let patch = self.load_patch(procedure_id, v)?;
            projected = apply_projected(&patch, &projected).map_err(|e| corrupt(v.version_id.clone(), e.to_string()))?;
        }
        unproject(&projected).map_err(|e| corrupt(version_id.to_owned(), e.to_string()))
    }

    pub fn head_state(&self, procedure_id: &str) -> Result<FileSet> {
        let p = self.procedure(procedure_id)?;
        self.reconstruct_version(procedure_id, &p.head)
    }

    /// Units of the head version, in document order.
    pub fn units(&self, procedure_id: &str) -> Result<Vec<UnitRecord>> {
        let mut stmt = self.conn.prepare(&format!("{UNIT_SELECT} WHERE ProcedureID = ?1 ORDER BY DocOrder"))?;
        let rows = stmt.query_map([procedure_id], unit_row)?.collect::<rusqlite::Result<_>>()?;
        Ok(rows)
    }

    pub fn dependencies(&self, procedure_id: &str) -> Result<Vec<UnitEdge>> {
        let mut stmt = self.conn.prepare(
            "SELECT FromUnit, ToUnit, Variable FROM Dependencies WHERE ProcedureID = ?1 ORDER BY FromUnit, ToUnit, Variable",
        )?;
        let rows = stmt
            .query_map([procedure_id], |r| Ok(UnitEdge { from_unit: r.get(0)?, to_unit: r.get(1)?, variable: r.get(2)? }))?
            .collect::<rusqlite::Result<_>>()?;
        Ok(rows)
    }

    /// Tagged structural diff between two versions.
    pub fn semantic_diff(&self, procedure_id: &str, from: &str, to: &str) -> Result<DiffReport> {
        let a = self.reconstruct_version(procedure_id, from)?;
        let b = if from == to { a.clone() } else { self.reconstruct_version(procedure_id, to)? };
        let (diff_text, ops) = semantic_diff_states(&a, &b, &self.rules, &ParamRule::default(), self.config.context_lines)?;
        Ok(DiffReport { procedure_id: procedure_id.to_owned(), from_version: from.to_owned(), to_version: to.to_owned(), diff_text, ops })
    }

    /// Versions of one procedure, as seen by temporal lenses.
    pub fn version_source(&self, procedure_id: &str) -> StoreVersions<'_> {
        StoreVersions { store: self, procedure_id: procedure_id.to_owned() }
    }

    pub fn schema_registry(&self) -> Result<SchemaRegistry> {
        let mut reg = SchemaRegistry::new();
        let mut stmt = self.conn.prepare("SELECT SchemaID FROM Schemas")?;
        for id in stmt.query_map([], |r| r.get::<_, String>(0))? {
            reg.register(&id?);
        }
        let mut stmt = self.conn.prepare("SELECT Specific, General FROM SchemaGeneralizations")?;
        for edge in stmt.query_map([], |r| Ok((r.get::<_, String>(0)?, r.get::<_, String>(1)?)))? {
            let (s, g) = edge?;
            reg.declare_generalization(&s, &g);
        }
        Ok(reg)
    }

    /// Register a schema id, optionally declaring what it generalizes to.
    pub fn register_schema(&mut self, id: &str, generalizes_to: Option<&str>) -> Result<()> {
        let tx = self.conn.transaction()?;
        tx.execute("INSERT OR IGNORE INTO Schemas (SchemaID) VALUES (?1)", [id])?;
        if let Some(g) = generalizes_to {
            tx.execute("INSERT OR IGNORE INTO Schemas (SchemaID) VALUES (?1)", [g])?;
            tx.execute("INSERT OR IGNORE INTO SchemaGeneralizations (Specific, General) VALUES (?1, ?2)", [id, g])?;
        }
        tx.commit()?;
        Ok(())
    }

    /// Audit index/filesystem coherence and referential integrity.
    pub fn fsck(&self) -> Result<FsckReport> {
        let mut report = FsckReport::default();
        let procs = self.list_procedures()?;
        let known: BTreeSet<&str> = procs.iter().map(|p| p.procedure_id.as_str()).collect();
        let lens_ids: BTreeSet<String> = {
            let mut stmt = self.conn.prepare("SELECT LensID, Path FROM Lenses")?;
            let rows: Vec<(String, String)> = stmt.query_map([], |r| Ok((r.get(0)?, r.get(1)?)))?.collect::<rusqlite::Result<_>>()?;
            for (id, path) in &rows {
                report.checked += 1;
                if !self.home.join(path).is_file() {
                    report.problems.push(format!("lens {id}: definition file {path} missing"));
                }
            }
            rows.into_iter().map(|r| r.0).collect()
        };
        for p in &procs {
            report.checked += 1;
            if !self.home.join(&p.base_path).is_dir() {
                report.problems.push(format!("{}: base directory {} missing", p.procedure_id, p.base_path));
            }
            for v in self.versions(&p.procedure_id)? {
                report.checked += 1;
                let dir = self.version_dir(&p.procedure_id, &v.version_id);
                if !dir.join("version.json").is_file() {
                    report.problems.push(format!("{}:{}: version.json missing", p.procedure_id, v.version_id));
                }
                if v.seq > 1 {
                    if let Err(e) = self.load_patch(&p.procedure_id, &v) {
                        report.problems.push(e.to_string());
                    }
                }
                if v.checkpoint && v.seq > 1 && !dir.join("snapshot").is_dir() {
                    report.problems.push(format!("{}:{}: checkpoint snapshot missing", p.procedure_id, v.version_id));
                }
            }
            if let Err(e) = self.head_state(&p.procedure_id) {
                report.problems.push(format!("{}: head does not reconstruct: {e}", p.procedure_id));
            }
        }
        for v in self.list_views(None)? {
            report.checked += 1;
            if !known.contains(v.procedure_id.as_str()) {
                report.problems.push(format!("view {}: unknown procedure {}", v.view_id, v.procedure_id));
            }
            for step in &v.lens_chain {
                if !lens_ids.contains(&step.lens_id) {
                    report.problems.push(format!("view {}: unknown lens {}", v.view_id, step.lens_id));
                }
            }
            if !self.home.join(&v.path).is_dir() {
                report.problems.push(format!("view {}: directory {} missing", v.view_id, v.path));
            }
            if let Some(c) = &v.complement_ref {
                if !self.home.join(views::sidecar_path(&v.path)).join(format!("{c}.diff")).is_file() {
                    report.problems.push(format!("view {}: complement {c} missing", v.view_id));
                }
            }
        }
        for c in self.list_compositions()? {
            report.checked += 1;
            for l in &c.lens_sequence {
                if !lens_ids.contains(l) {
                    report.problems.push(format!("composition {}: unknown lens {l}", c.composition_id));
                }
            }
        }
        let root = self.home.join("procedures");
        for entry in fs::read_dir(&root).map_err(io_at(&root))? {
            let entry = entry?;
            if entry.file_type()?.is_dir() {
                let name = entry.file_name().to_string_lossy().into_owned();
                if !known.contains(name.as_str()) {
                    report.problems.push(format!("procedures/{name} has no index row"));
                }
            }
        }
        Ok(report)
    }
}

pub struct StoreVersions<'a> {
    store: &'a Store,
    procedure_id: String,
}

impl VersionSource for StoreVersions<'_> {
    fn version_state(&self, version_id: &str) -> Result<FileSet, LensError> {
        let (pid, v) = match version_id.rsplit_once(':') {
            Some((p, v)) => (p, v),
            None => (self.procedure_id.as_str(), version_id),
        };
        self.store.reconstruct_version(pid, v).map_err(|e| LensError::Version(e.to_string()))
    }
}

fn write_patch(dir: &Path, patch: &Patch) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_at(dir))?;
    fs::write(dir.join(format!("{}.diff", patch.patch_id)), patch.diff_text()).map_err(io_at(dir))?;
    fs::write(dir.join(format!("{}.meta.json", patch.patch_id)), patch.meta_json()).map_err(io_at(dir))?;
    if !patch.blobs.is_empty() {
        let blobs = dir.join("blobs");
        fs::create_dir_all(&blobs).map_err(io_at(&blobs))?;
        for (h, b) in &patch.blobs {
            fs::write(blobs.join(h), b).map_err(io_at(&blobs))?;
        }
    }
    Ok(())
}

fn read_patch(dir: &Path, patch_id: &str) -> Result<Patch> {
    let text = fs::read_to_string(dir.join(format!("{patch_id}.diff"))).map_err(io_at(dir))?;
    let meta = fs::read(dir.join(format!("{patch_id}.meta.json"))).map_err(io_at(dir))?;
    let mut blobs = BTreeMap::new();
    for h in Patch::blob_refs(&meta)? {
        blobs.insert(h.clone(), fs::read(dir.join("blobs").join(&h)).map_err(io_at(dir))?);
    }
    Ok(Patch::from_stored(&text, Some(&meta), blobs)?)
}

const PROCEDURE_SELECT: &str =
    "SELECT ProcedureID, Name, BasePath, SourcePath, Description, Tags, Schema, Head, CreatedAt FROM Procedures";
const VERSION_SELECT: &str =
    "SELECT VersionID, ProcedureID, Seq, ParentVersion, PatchID, Checkpoint, Message, CreatedAt FROM Versions";
pub(crate) const UNIT_SELECT: &str = "SELECT UnitID, ProcedureID, FilePath, CellID, Kind, Content, StartLine, EndLine, SemanticTag, Tags, LamportClock, Agent, DocOrder FROM Units";

fn json_list(text: String) -> Vec<String> {
    serde_json::from_str(&text).unwrap_or_default()
}

pub(crate) fn procedure_row(r: &rusqlite::Row<'_>) -> rusqlite::Result<ProcedureRecord> {
    Ok(ProcedureRecord {
        procedure_id: r.get(0)?,
        name: r.get(1)?,
        base_path: r.get(2)?,
        source_path: r.get(3)?,
        description: r.get(4)?,
        tags: json_list(r.get(5)?),
        schema: r.get(6)?,
        head: r.get(7)?,
        created_at: r.get(8)?,
    })
}

fn version_row(r: &rusqlite::Row<'_>) -> rusqlite::Result<VersionRecord> {
    Ok(VersionRecord {
        version_id: r.get(0)?,
        procedure_id: r.get(1)?,
        seq: r.get(2)?,
        parent_version: r.get(3)?,
        patch_id: r.get(4)?,
        checkpoint: r.get(5)?,
        message: r.get(6)?,
        created_at: r.get(7)?,
    })
}

pub(crate) fn unit_row(r: &rusqlite::Row<'_>) -> rusqlite::Result<UnitRecord> {
    let kind: String = r.get(4)?;
    Ok(UnitRecord {
        unit_id: r.get(0)?,
        procedure_id: r.get(1)?,
        file_path: r.get(2)?,
        cell_id: r.get(3)?,
        kind: crate::ingest::CellKind::parse(&kind).unwrap_or(crate::ingest::CellKind::Code),
        content: r.get(5)?,
        start_line: r.get(6)?,
        end_line: r.get(7)?,
        semantic_tag: r.get(8)?,
        tags: json_list(r.get(9)?),
        lamport: r.get(10)?,
        agent: r.get(11)?,
        doc_order: r.get(12)?,
    })
}

fn insert_version(tx: &Transaction<'_>, v: &VersionRecord) -> rusqlite::Result<()> {
    tx.execute(
        "INSERT INTO Versions (ProcedureID, VersionID, Seq, ParentVersion, PatchID, Checkpoint, Message, CreatedAt)
         VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8)",
        params![v.procedure_id, v.version_id, v.seq, v.parent_version, v.patch_id, v.checkpoint, v.message, v.created_at],
    )?;
    Ok(())
}

fn replace_units(tx: &Transaction<'_>, procedure_id: &str, units: &[UnitRecord], edges: &[UnitEdge]) -> rusqlite::Result<()> {
    tx.execute("DELETE FROM Units WHERE ProcedureID = ?1", [procedure_id])?;
    tx.execute("DELETE FROM Dependencies WHERE ProcedureID = ?1", [procedure_id])?;
    let mut ins = tx.prepare(
        "INSERT INTO Units (UnitID, ProcedureID, FilePath, CellID, Kind, Content, StartLine, EndLine, SemanticTag, Tags, LamportClock, Agent, DocOrder)
         VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8, ?9, ?10, ?11, ?12, ?13)",
    )?;
    for u in units {
        ins.execute(params![
            u.unit_id,
            procedure_id,
            u.file_path,
            u.cell_id,
            u.kind.as_str(),
            u.content,
            u.start_line,
            u.end_line,
            u.semantic_tag,
            to_canonical_string(&u.tags),
            u.lamport,
            u.agent,
            u.doc_order
        ])?;
    }
    let mut dep = tx.prepare("INSERT OR IGNORE INTO Dependencies (ProcedureID, FromUnit, ToUnit, Variable) VALUES (?1, ?2, ?3, ?4)")?;
    for e in edges {
        dep.execute(params![procedure_id, e.from_unit, e.to_unit, e.variable])?;
    }
    Ok(())
}
