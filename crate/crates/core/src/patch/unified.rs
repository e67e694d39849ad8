//! Multi-file unified diffs: generation, parsing, printing, application
//! and inversion.
//!
//! Text files are diffed by line. Non UTF-8 files are recorded as whole
//! object replacements referenced by SHA-256; the blobs travel beside the
//! diff text.

use std::collections::BTreeMap;
use std::fmt;

use similar::{DiffOp, TextDiff};

use crate::canonical::sha256_hex;
use crate::fileset::FileSet;

const NO_NEWLINE: &str = "\\ No newline at end of file";
const DEV_NULL: &str = "/dev/null";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LineKind {
    Context,
    Removed,
    Added,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HunkLine {
    pub kind: LineKind,
    /// Line text without its terminating `\n`.
    pub text: String,
    /// The line is the last one of its file and has no `\n`.
    pub no_newline: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Hunk {
    pub old_start: usize,
    pub old_len: usize,
    pub new_start: usize,
    pub new_len: usize,
    pub lines: Vec<HunkLine>,
}

impl Hunk {
    /// 0-based index of the first old line this hunk touches.
    fn old_index(&self) -> usize {
        if self.old_len == 0 {
            self.old_start
        } else {
            self.old_start - 1
        }
    }

    /// 0-based index of the first new line.
    pub fn new_index(&self) -> usize {
        if self.new_len == 0 {
            self.new_start
        } else {
            self.new_start - 1
        }
    }

    fn inverted(&self) -> Hunk {
        Hunk {
            old_start: self.new_start,
            old_len: self.new_len,
            new_start: self.old_start,
            new_len: self.old_len,
            lines: self
                .lines
                .iter()
                .map(|l| HunkLine {
                    kind: match l.kind {
                        LineKind::Context => LineKind::Context,
                        LineKind::Removed => LineKind::Added,
                        LineKind::Added => LineKind::Removed,
                    },
                    text: l.text.clone(),
                    no_newline: l.no_newline,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum FileChange {
    Text(Vec<Hunk>),
    /// Whole-object replacement; hashes of old and new content.
    Binary { old_hash: Option<String>, new_hash: Option<String> },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FileDiff {
    /// `None` for a created file.
    pub old_path: Option<String>,
    /// `None` for a deleted file.
    pub new_path: Option<String>,
    pub change: FileChange,
}

impl FileDiff {
    pub fn path(&self) -> &str {
        self.new_path.as_deref().or(self.old_path.as_deref()).unwrap_or_default()
    }

    pub fn hunks(&self) -> &[Hunk] {
        match &self.change {
            FileChange::Text(h) => h,
            FileChange::Binary { .. } => &[],
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct UnifiedDiff {
    pub files: Vec<FileDiff>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("diff line {line}: {message}")]
pub struct DiffParseError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ApplyError {
    #[error("context mismatch in {path}, hunk {hunk}: {message}")]
    ContextMismatch { path: String, hunk: usize, message: String },
    #[error("missing blob {0}")]
    MissingBlob(String),
}

fn split_lines(text: &str) -> Vec<&str> {
    text.split_inclusive('\n').collect()
}

fn hunk_line(kind: LineKind, raw: &str) -> HunkLine {
    match raw.strip_suffix('\n') {
        Some(t) => HunkLine { kind, text: t.to_owned(), no_newline: false },
        None => HunkLine { kind, text: raw.to_owned(), no_newline: true },
    }
}

fn display_start(index: usize, len: usize) -> usize {
    if len == 0 {
        index
    } else {
        index + 1
    }
}

fn text_hunks(old: &str, new: &str, context: usize) -> Vec<Hunk> {
    let diff = TextDiff::from_lines(old, new);
    let old_lines = split_lines(old);
    let new_lines = split_lines(new);
    let mut hunks = Vec::new();
    for group in diff.grouped_ops(context) {
        let (Some(first), Some(last)) = (group.first(), group.last()) else { continue };
        let old_range = first.old_range().start..last.old_range().end;
        let new_range = first.new_range().start..last.new_range().end;
        let mut lines = Vec::new();
        for op in &group {
            match *op {
                DiffOp::Equal { old_index, len, .. } => {
                    lines.extend(old_lines[old_index..old_index + len].iter().map(|l| hunk_line(LineKind::Context, l)));
                }
                DiffOp::Delete { old_index, old_len, .. } => {
                    lines.extend(old_lines[old_index..old_index + old_len].iter().map(|l| hunk_line(LineKind::Removed, l)));
                }
                DiffOp::Insert { new_index, new_len, .. } => {
                    lines.extend(new_lines[new_index..new_index + new_len].iter().map(|l| hunk_line(LineKind::Added, l)));
                }
                DiffOp::Replace { old_index, old_len, new_index, new_len } => {
                    lines.extend(old_lines[old_index..old_index + old_len].iter().map(|l| hunk_line(LineKind::Removed, l)));
                    lines.extend(new_lines[new_index..new_index + new_len].iter().map(|l| hunk_line(LineKind::Added, l)));
                }
            }
        }
        hunks.push(Hunk {
            old_start: display_start(old_range.start, old_range.len()),
            old_len: old_range.len(),
            new_start: display_start(new_range.start, new_range.len()),
            new_len: new_range.len(),
            lines,
        });
    }
    hunks
}

/// Diff two file sets. Returns the structured diff plus the blobs any
/// binary change refers to.
pub fn diff_filesets(base: &FileSet, target: &FileSet, context: usize) -> (UnifiedDiff, BTreeMap<String, Vec<u8>>) {
    let mut files = Vec::new();
    let mut blobs = BTreeMap::new();
    let mut paths: Vec<&str> = base.paths().chain(target.paths()).collect();
    paths.sort_unstable();
    paths.dedup();
    for path in paths {
        let old = base.get(path);
        let new = target.get(path);
        if old == new {
            continue;
        }
        let old_text = old.map(std::str::from_utf8);
        let new_text = new.map(std::str::from_utf8);
        let old_path = old.map(|_| path.to_owned());
        let new_path = new.map(|_| path.to_owned());
        let text_ok = !matches!(old_text, Some(Err(_))) && !matches!(new_text, Some(Err(_)));
        if text_ok {
            let o = old_text.and_then(Result::ok).unwrap_or("");
            let n = new_text.and_then(Result::ok).unwrap_or("");
            files.push(FileDiff { old_path, new_path, change: FileChange::Text(text_hunks(o, n, context)) });
        } else {
            let mut hash = |bytes: Option<&[u8]>| {
                bytes.map(|b| {
                    let h = sha256_hex(b);
                    blobs.insert(h.clone(), b.to_vec());
                    h
                })
            };
            let old_hash = hash(old);
            let new_hash = hash(new);
            files.push(FileDiff { old_path, new_path, change: FileChange::Binary { old_hash, new_hash } });
        }
    }
    (UnifiedDiff { files }, blobs)
}

fn side(prefix: &str, path: Option<&str>) -> String {
    match path {
        Some(p) => format!("{prefix}/{p}"),
        None => DEV_NULL.to_owned(),
    }
}

impl fmt::Display for UnifiedDiff {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for file in &self.files {
            let a = side("a", file.old_path.as_deref());
            let b = side("b", file.new_path.as_deref());
            match &file.change {
                FileChange::Binary { old_hash, new_hash } => {
                    writeln!(
                        f,
                        "Binary files {a} and {b} differ (sha256 {} -> {})",
                        old_hash.as_deref().unwrap_or("-"),
                        new_hash.as_deref().unwrap_or("-")
                    )?;
                }
                FileChange::Text(hunks) => {
                    writeln!(f, "--- {a}")?;
                    writeln!(f, "+++ {b}")?;
                    for h in hunks {
                        writeln!(f, "@@ -{},{} +{},{} @@", h.old_start, h.old_len, h.new_start, h.new_len)?;
                        for l in &h.lines {
                            let c = match l.kind {
                                LineKind::Context => ' ',
                                LineKind::Removed => '-',
                                LineKind::Added => '+',
                            };
                            writeln!(f, "{c}{}", l.text)?;
                            if l.no_newline {
                                writeln!(f, "{NO_NEWLINE}")?;
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

fn parse_side(s: &str, prefix: &str, line: usize) -> Result<Option<String>, DiffParseError> {
    // drop a trailing tab-separated timestamp, as GNU diff writes
    let s = s.split('\t').next().unwrap_or(s);
    if s == DEV_NULL {
        return Ok(None);
    }
    let path = s.strip_prefix(prefix).and_then(|p| p.strip_prefix('/')).unwrap_or(s);
    if path.is_empty() {
        return Err(DiffParseError { line, message: "empty path".into() });
    }
    Ok(Some(path.to_owned()))
}

fn parse_range(s: &str, line: usize) -> Result<(usize, usize), DiffParseError> {
    let bad = || DiffParseError { line, message: format!("bad hunk range {s:?}") };
    let (start, len) = match s.split_once(',') {
        Some((a, b)) => (a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?),
        None => (s.parse().map_err(|_| bad())?, 1),
    };
    Ok((start, len))
}

fn parse_hunk_header(s: &str, line: usize) -> Result<(usize, usize, usize, usize), DiffParseError> {
    let bad = || DiffParseError { line, message: format!("bad hunk header {s:?}") };
    let inner = s.strip_prefix("@@ ").and_then(|r| r.split(" @@").next()).ok_or_else(bad)?;
    let mut parts = inner.split(' ');
    let old = parts.next().and_then(|p| p.strip_prefix('-')).ok_or_else(bad)?;
    let new = parts.next().and_then(|p| p.strip_prefix('+')).ok_or_else(bad)?;
    if parts.next().is_some() {
        return Err(bad());
    }
    let (os, ol) = parse_range(old, line)?;
    let (ns, nl) = parse_range(new, line)?;
    if (ol > 0 && os == 0) || (nl > 0 && ns == 0) {
        return Err(bad());
    }
    Ok((os, ol, ns, nl))
}

fn parse_binary(s: &str, line: usize) -> Result<FileDiff, DiffParseError> {
    let bad = || DiffParseError { line, message: "bad binary line".into() };
    let rest = s.strip_prefix("Binary files ").ok_or_else(bad)?;
    let (paths, hashes) = rest.rsplit_once(" differ (sha256 ").ok_or_else(bad)?;
    let hashes = hashes.strip_suffix(')').ok_or_else(bad)?;
    let (oh, nh) = hashes.split_once(" -> ").ok_or_else(bad)?;
    let (a, b) = paths
        .split_once(" and b/")
        .map(|(a, b)| (a.to_owned(), format!("b/{b}")))
        .or_else(|| paths.split_once(" and /dev/null").map(|(a, _)| (a.to_owned(), DEV_NULL.to_owned())))
        .ok_or_else(bad)?;
    let hash = |h: &str| -> Result<Option<String>, DiffParseError> {
        match h {
            "-" => Ok(None),
            h if h.len() == 64 && h.bytes().all(|c| c.is_ascii_hexdigit()) => Ok(Some(h.to_owned())),
            _ => Err(bad()),
        }
    };
    let fd = FileDiff {
        old_path: parse_side(&a, "a", line)?,
        new_path: parse_side(&b, "b", line)?,
        change: FileChange::Binary { old_hash: hash(oh)?, new_hash: hash(nh)? },
    };
    if fd.old_path.is_some() != fd.change_has_old() || fd.new_path.is_some() != fd.change_has_new() {
        return Err(bad());
    }
    Ok(fd)
}

impl FileDiff {
    fn change_has_old(&self) -> bool {
        matches!(&self.change, FileChange::Binary { old_hash: Some(_), .. })
    }
    fn change_has_new(&self) -> bool {
        matches!(&self.change, FileChange::Binary { new_hash: Some(_), .. })
    }
}

impl UnifiedDiff {
    /// Parse diff text. Lines outside file sections (e.g. `diff --git`
    /// headers) are ignored.
    pub fn parse(text: &str) -> Result<Self, DiffParseError> {
        let lines: Vec<&str> = text.split('\n').collect();
        // `split` yields a trailing empty piece for LF-terminated text
        let n = if text.ends_with('\n') || text.is_empty() { lines.len() - 1 } else { lines.len() };
        let mut files = Vec::new();
        let mut i = 0;
        while i < n {
            let line = lines[i];
            if line.starts_with("Binary files ") {
                files.push(parse_binary(line, i + 1)?);
                i += 1;
                continue;
            }
            let Some(a) = line.strip_prefix("--- ") else {
                i += 1;
                continue;
            };
            let b = lines
                .get(i + 1)
                .filter(|_| i + 1 < n)
                .and_then(|l| l.strip_prefix("+++ "))
                .ok_or_else(|| DiffParseError { line: i + 2, message: "expected +++ header".into() })?;
            let old_path = parse_side(a, "a", i + 1)?;
            let new_path = parse_side(b, "b", i + 2)?;
            if old_path.is_none() && new_path.is_none() {
                return Err(DiffParseError { line: i + 1, message: "both sides are /dev/null".into() });
            }
            i += 2;
            let mut hunks: Vec<Hunk> = Vec::new();
            while i < n && lines[i].starts_with("@@") {
                let (os, ol, ns, nl) = parse_hunk_header(lines[i], i + 1)?;
                i += 1;
                let (mut seen_old, mut seen_new) = (0, 0);
                let mut body = Vec::new();
                while seen_old < ol || seen_new < nl {
                    if i >= n {
                        return Err(DiffParseError { line: i + 1, message: "hunk ends early".into() });
                    }
                    let l = lines[i];
                    let (kind, rest) = match l.chars().next() {
                        Some(' ') => (LineKind::Context, &l[1..]),
                        Some('-') => (LineKind::Removed, &l[1..]),
                        Some('+') => (LineKind::Added, &l[1..]),
                        // some tools drop the space on empty context lines
                        None => (LineKind::Context, ""),
                        _ => return Err(DiffParseError { line: i + 1, message: format!("unexpected line in hunk {l:?}") }),
                    };
                    match kind {
                        LineKind::Context => {
                            seen_old += 1;
                            seen_new += 1;
                        }
                        LineKind::Removed => seen_old += 1,
                        LineKind::Added => seen_new += 1,
                    }
                    if seen_old > ol || seen_new > nl {
                        return Err(DiffParseError { line: i + 1, message: "hunk longer than its header".into() });
                    }
                    body.push(HunkLine { kind, text: rest.to_owned(), no_newline: false });
                    i += 1;
                    if i < n && lines[i] == NO_NEWLINE {
                        body.last_mut().expect("just pushed").no_newline = true;
                        i += 1;
                    }
                }
                if let Some(prev) = hunks.last() {
                    if os < prev.old_start + prev.old_len {
                        return Err(DiffParseError { line: i, message: "overlapping hunks".into() });
                    }
                }
                hunks.push(Hunk { old_start: os, old_len: ol, new_start: ns, new_len: nl, lines: body });
            }
            if old_path.is_none() && hunks.iter().any(|h| h.old_len > 0) {
                return Err(DiffParseError { line: i, message: "created file has old lines".into() });
            }
            if new_path.is_none() && hunks.iter().any(|h| h.new_len > 0) {
                return Err(DiffParseError { line: i, message: "deleted file has new lines".into() });
            }
            files.push(FileDiff { old_path, new_path, change: FileChange::Text(hunks) });
        }
        Ok(UnifiedDiff { files })
    }

    pub fn is_empty(&self) -> bool {
        self.files.is_empty()
    }

    pub fn hunk_count(&self) -> usize {
        self.files.iter().map(|f| f.hunks().len()).sum()
    }

    pub fn inverted(&self) -> UnifiedDiff {
        UnifiedDiff {
            files: self
                .files
                .iter()
                .map(|f| FileDiff {
                    old_path: f.new_path.clone(),
                    new_path: f.old_path.clone(),
                    change: match &f.change {
                        FileChange::Text(h) => FileChange::Text(h.iter().map(Hunk::inverted).collect()),
                        FileChange::Binary { old_hash, new_hash } => {
                            FileChange::Binary { old_hash: new_hash.clone(), new_hash: old_hash.clone() }
                        }
                    },
                })
                .collect(),
        }
    }

    /// Apply to `base`, producing the target file set.
    pub fn apply(&self, base: &FileSet, blobs: &BTreeMap<String, Vec<u8>>) -> Result<FileSet, ApplyError> {
        let mut out = base.clone();
        // removals first so a rename-like delete+create of one path works
        for file in &self.files {
            if let (Some(old), None) = (&file.old_path, &file.new_path) {
                let current = base.get(old).ok_or_else(|| mismatch(old, 0, "file to delete is missing"))?;
                let remaining = match &file.change {
                    FileChange::Text(hunks) => apply_text(old, current, hunks)?,
                    FileChange::Binary { old_hash, .. } => {
                        check_hash(old, current, old_hash.as_deref())?;
                        Vec::new()
                    }
                };
                if !remaining.is_empty() {
                    return Err(mismatch(old, 0, "deleted file has content the patch does not remove"));
                }
                out.remove(old);
            }
        }
        for file in &self.files {
            let Some(new) = &file.new_path else { continue };
            let current: &[u8] = match &file.old_path {
                Some(old) => base.get(old).ok_or_else(|| mismatch(old, 0, "file to patch is missing"))?,
                None => {
                    if out.contains(new) {
                        return Err(mismatch(new, 0, "file to create already exists"));
                    }
                    b""
                }
            };
            let bytes = match &file.change {
                FileChange::Text(hunks) => apply_text(new, current, hunks)?,
                FileChange::Binary { old_hash, new_hash } => {
                    if file.old_path.is_some() {
                        check_hash(new, current, old_hash.as_deref())?;
                    }
                    let h = new_hash.as_deref().ok_or_else(|| mismatch(new, 0, "binary change lacks new content"))?;
                    blobs.get(h).cloned().ok_or_else(|| ApplyError::MissingBlob(h.to_owned()))?
                }
            };
            if let Some(old) = &file.old_path {
                if old != new {
                    out.remove(old);
                }
            }
            out.insert(new.clone(), bytes);
        }
        Ok(out)
    }
}

fn mismatch(path: &str, hunk: usize, message: &str) -> ApplyError {
    ApplyError::ContextMismatch { path: path.to_owned(), hunk, message: message.to_owned() }
}

fn check_hash(path: &str, current: &[u8], expected: Option<&str>) -> Result<(), ApplyError> {
    match expected {
        Some(h) if sha256_hex(current) == h => Ok(()),
        _ => Err(mismatch(path, 0, "binary content differs from the patch's base")),
    }
}

fn apply_text(path: &str, current: &[u8], hunks: &[Hunk]) -> Result<Vec<u8>, ApplyError> {
    let text = std::str::from_utf8(current).map_err(|_| mismatch(path, 0, "base is not text"))?;
    let old_lines = split_lines(text);
    let mut out = String::with_capacity(text.len());
    let mut cursor = 0;
    for (hi, h) in hunks.iter().enumerate() {
        let start = h.old_index();
        if start < cursor || start > old_lines.len() {
            return Err(mismatch(path, hi, "hunk position out of range"));
        }
        for l in &old_lines[cursor..start] {
            out.push_str(l);
        }
        let mut idx = start;
        for l in &h.lines {
            match l.kind {
                LineKind::Context | LineKind::Removed => {
                    let actual = old_lines.get(idx).ok_or_else(|| mismatch(path, hi, "base ends inside hunk"))?;
                    let expected_nl = !l.no_newline;
                    let (body, has_nl) = match actual.strip_suffix('\n') {
                        Some(b) => (b, true),
                        None => (*actual, false),
                    };
                    if body != l.text || has_nl != expected_nl {
                        return Err(mismatch(path, hi, &format!("expected {:?}, found {:?}", l.text, body)));
                    }
                    idx += 1;
                    if l.kind == LineKind::Context {
                        out.push_str(actual);
                    }
                }
                LineKind::Added => {
                    out.push_str(&l.text);
                    if !l.no_newline {
                        out.push('\n');
                    }
                }
            }
        }
        cursor = idx;
    }
    for l in &old_lines[cursor.min(old_lines.len())..] {
        out.push_str(l);
    }
    Ok(out.into_bytes())
}
