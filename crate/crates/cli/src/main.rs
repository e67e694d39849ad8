use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::{Map, Value};

use pkl_core::canonical::to_canonical_string;
use pkl_core::fileset::FileSet;
use pkl_core::ingest::trace::{parse_trace, TraceEvent};
use pkl_core::lens::{render_json, render_markdown, Lens};
use pkl_core::query::{parse_query, execute_query};
use pkl_core::store::{resolve_home, LensStep, NewProcedure, Store};

#[derive(Parser)]
#[command(name = "pkl", version, about = "Procedural knowledge library")]
struct Cli {
    /// Store directory (default: $PKL_HOME, then ./.pkl)
    #[arg(long, global = true)]
    pkl_home: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Output::Text)]
    output: Output,
    /// Context lines in generated diffs
    #[arg(long, global = true)]
    context_lines: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Output {
    Text,
    Json,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ExportFormat {
    Markdown,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Create a procedure from a directory or file
    CreateProcedure {
        #[arg(long)]
        name: String,
        #[arg(long)]
        base_path: PathBuf,
        #[arg(long, default_value = "")]
        description: String,
        #[arg(long = "tag")]
        tags: Vec<String>,
        #[arg(long)]
        schema: Option<String>,
    },
    /// Ingest a notebook or script (optionally with an execution trace) as a new procedure
    Ingest {
        path: PathBuf,
        #[arg(long)]
        name: Option<String>,
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long = "tag")]
        tags: Vec<String>,
        #[arg(long)]
        schema: Option<String>,
    },
    /// Record the contents of a directory or file as the next version
    Commit {
        procedure: String,
        #[arg(long)]
        from: PathBuf,
        #[arg(long, short)]
        message: Option<String>,
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Materialize a view of a procedure through a lens
    ApplyLens {
        lens: String,
        #[arg(long)]
        to: String,
        /// Lens parameter as name=value (value parsed as JSON when possible)
        #[arg(long = "param", value_parser = parse_param)]
        params: Vec<(String, Value)>,
        /// Version to view (default: head)
        #[arg(long)]
        at: Option<String>,
    },
    /// Reconstruct the source of a view from the view and its complement
    Invert {
        view_id: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Semantic diff between two versions (procedure:vN, second may be just vN)
    Diff { from: String, to: String },
    /// Render a procedure through a lens
    Export {
        procedure: String,
        #[arg(long)]
        lens: String,
        #[arg(long, value_enum, default_value_t = ExportFormat::Markdown)]
        format: ExportFormat,
        #[arg(long = "param", value_parser = parse_param)]
        params: Vec<(String, Value)>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run a query
    Query { text: String },
    /// Write the files of a version (procedure or procedure:vN) to a directory
    Checkout {
        reference: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// List the versions of a procedure
    Log { procedure: String },
    /// Register a lens definition file
    RegisterLens { file: PathBuf },
    /// Register a named lens sequence
    RegisterComposition {
        name: String,
        #[arg(required = true)]
        lenses: Vec<String>,
    },
    /// List registered lenses
    Lenses,
    /// Check index and filesystem coherence
    Fsck,
}

fn parse_param(s: &str) -> Result<(String, Value), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected name=value, got {s:?}"))?;
    if k.is_empty() {
        return Err(format!("empty parameter name in {s:?}"));
    }
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_owned()));
    Ok((k.to_owned(), value))
}

fn params_map(params: Vec<(String, Value)>) -> Map<String, Value> {
    params.into_iter().collect()
}

fn read_trace(path: Option<&Path>) -> Result<Option<Vec<TraceEvent>>> {
    match path {
        None => Ok(None),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(Some(parse_trace(&text)?))
        }
    }
}

fn read_state(path: &Path) -> Result<FileSet> {
    let meta = fs::metadata(path).with_context(|| format!("reading {}", path.display()))?;
    if meta.is_dir() {
        return Ok(FileSet::load_dir(path)?);
    }
    let name = path.file_name().and_then(|n| n.to_str()).ok_or_else(|| anyhow!("bad file name {}", path.display()))?;
    let mut fs = FileSet::new();
    fs.insert(name, std::fs::read(path)?);
    Ok(fs)
}

/// `procedure:vN` or `procedure` (head).
fn split_ref(store: &Store, reference: &str) -> Result<(String, String)> {
    match reference.rsplit_once(':') {
        Some((p, v)) => Ok((store.find_procedure(p)?.procedure_id, v.to_owned())),
        None => {
            let p = store.find_procedure(reference)?;
            Ok((p.procedure_id, p.head))
        }
    }
}

fn emit(output: Output, text: impl FnOnce() -> String, json: impl FnOnce() -> Value) {
    let s = match output {
        Output::Text => text(),
        Output::Json => to_canonical_string(&json()) + "\n",
    };
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(s.as_bytes());
}

fn run(cli: Cli) -> Result<()> {
    let home = resolve_home(cli.pkl_home.as_deref());
    let mut store = Store::open(&home).with_context(|| format!("opening store at {}", home.display()))?;
    if let Some(n) = cli.context_lines {
        store.config_mut().context_lines = n;
    }
    let out = cli.output;
    match cli.command {
        Command::CreateProcedure { name, base_path, description, tags, schema } => {
            let rec = store.create_procedure(NewProcedure { name, base_path, description, tags, schema, trace: None })?;
            emit(out, || format!("{}\n", rec.procedure_id), || serde_json::to_value(&rec).expect("serializes"));
        }
        Command::Ingest { path, name, trace, tags, schema } => {
            let name = match name {
                Some(n) => n,
                None => path
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .map(str::to_owned)
                    .ok_or_else(|| anyhow!("cannot derive a name from {}", path.display()))?,
            };
            let trace = read_trace(trace.as_deref())?;
            let rec = store.create_procedure(NewProcedure { name, base_path: path, description: String::new(), tags, schema, trace })?;
            let units = store.units(&rec.procedure_id)?;
            emit(
                out,
                || format!("{}\n", rec.procedure_id),
                || serde_json::json!({"procedure": rec, "units": units}),
            );
        }
        Command::Commit { procedure, from, message, trace } => {
            let pid = store.find_procedure(&procedure)?.procedure_id;
            let state = read_state(&from)?;
            let trace = read_trace(trace.as_deref())?;
            let v = store.commit_version(&pid, &state, message.as_deref(), trace.as_deref())?;
            emit(out, || format!("{}:{}\n", pid, v.version_id), || serde_json::to_value(&v).expect("serializes"));
        }
        Command::ApplyLens { lens, to, params, at } => {
            let pid = store.find_procedure(&to)?.procedure_id;
            let step = LensStep { lens_id: lens, parameters: params_map(params) };
            let view = store.apply_lens(&pid, &[step], at.as_deref())?;
            for d in &view.diagnostics {
                eprintln!("note: {d}");
            }
            emit(out, || format!("{}\n", view.view_id), || serde_json::to_value(&view).expect("serializes"));
        }
        Command::Invert { view_id, out: dir } => {
            let files = store.invert_view(&view_id)?;
            files.write_dir(&dir).with_context(|| format!("writing {}", dir.display()))?;
            emit(out, || format!("{} files written to {}\n", files.len(), dir.display()), || {
                serde_json::json!({"view_id": view_id, "files": files.paths().collect::<Vec<_>>()})
            });
        }
        Command::Diff { from, to } => {
            let (pa, va) = split_ref(&store, &from)?;
            let (pb, vb) = if to.contains(':') { split_ref(&store, &to)? } else { (pa.clone(), to) };
            let q = pkl_core::query::Query::Diff { target: pa, from_version: va, other: Some(pb), to_version: vb };
            let result = execute_query(&mut store, &q)?;
            emit(out, || result.render_text(), || result.to_json()["result"].clone());
        }
        Command::Export { procedure, lens, format, params, out: dest } => {
            let pid = store.find_procedure(&procedure)?.procedure_id;
            let steps: Vec<LensStep> = store
                .expand_lens_name(&lens)?
                .into_iter()
                .map(|id| LensStep { lens_id: id, parameters: params_map(params.clone()) })
                .collect();
            let view = store.apply_lens(&pid, &steps, None)?;
            for d in &view.diagnostics {
                eprintln!("note: {d}");
            }
            let files = store.view_files(&view)?;
            let bytes = match format {
                ExportFormat::Markdown => render_markdown(&files).into_bytes(),
                ExportFormat::Json => render_json(&files),
            };
            match dest {
                Some(p) => fs::write(&p, bytes).with_context(|| format!("writing {}", p.display()))?,
                None => std::io::stdout().lock().write_all(&bytes)?,
            }
        }
        Command::Query { text } => {
            let q = parse_query(&text)?;
            let result = execute_query(&mut store, &q)?;
            emit(out, || result.render_text(), || result.to_json());
        }
        Command::Checkout { reference, out: dir } => {
            let (pid, v) = split_ref(&store, &reference)?;
            let files = store.reconstruct_version(&pid, &v)?;
            files.write_dir(&dir).with_context(|| format!("writing {}", dir.display()))?;
            emit(out, || format!("{pid}:{v} -> {}\n", dir.display()), || {
                serde_json::json!({"procedure_id": pid, "version": v, "files": files.paths().collect::<Vec<_>>()})
            });
        }
        Command::Log { procedure } => {
            let pid = store.find_procedure(&procedure)?.procedure_id;
            let versions = store.versions(&pid)?;
            emit(
                out,
                || {
                    versions
                        .iter()
                        .map(|v| {
                            format!(
                                "{:<5} {} {}{}\n",
                                v.version_id,
                                v.created_at,
                                v.patch_id.as_deref().unwrap_or("base"),
                                v.message.as_deref().map(|m| format!("  {m}")).unwrap_or_default()
                            )
                        })
                        .collect()
                },
                || serde_json::to_value(&versions).expect("serializes"),
            );
        }
        Command::RegisterLens { file } => {
            let text = fs::read_to_string(&file).with_context(|| format!("reading {}", file.display()))?;
            let lens = Lens::from_json(&text)?;
            let id = store.register_lens(&lens)?;
            emit(out, || format!("{id}\n"), || serde_json::json!({"lens_id": id}));
        }
        Command::RegisterComposition { name, lenses } => {
            let rec = store.register_composition(&name, &lenses)?;
            emit(out, || format!("{}\n", rec.composition_id), || serde_json::to_value(&rec).expect("serializes"));
        }
        Command::Lenses => {
            let lenses = store.list_lenses()?;
            emit(
                out,
                || {
                    lenses
                        .iter()
                        .map(|l| format!("{:<22} {:<14} {} -> {}\n", l.lens_id, l.lens_type.as_str(), l.source_schema, l.target_schema))
                        .collect()
                },
                || serde_json::to_value(&lenses).expect("serializes"),
            );
        }
        Command::Fsck => {
            let report = store.fsck()?;
            emit(
                out,
                || {
                    let mut s: String = report.problems.iter().map(|p| format!("{p}\n")).collect();
                    s.push_str(&format!("{} records checked, {} problems\n", report.checked, report.problems.len()));
                    s
                },
                || serde_json::to_value(&report).expect("serializes"),
            );
            if !report.is_clean() {
                bail!("store has {} problems", report.problems.len());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
