//! Versioning deltas between procedure states.

mod projection;
mod structural;
mod unified;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::canonical::{sha256_hex, to_canonical_file};
use crate::classify::{classify_unit_with_context, default_rules, facts_for, RuleTable};
use crate::fileset::FileSet;
use crate::ingest::{is_script_path, segment_script};

pub use projection::{cell_file_owner, project, projection_dir, unproject, ProjectionError, PROJECTION_SUFFIX};
pub use structural::{derive_structural_ops, ParamRule, StructuralOp, StructuralOpKind};
pub use unified::{
    diff_filesets, ApplyError, DiffParseError, FileChange, FileDiff, Hunk, HunkLine, LineKind, UnifiedDiff,
};

pub const DEFAULT_CONTEXT_LINES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sense {
    Forward,
    Inverse,
}

impl Sense {
    fn flip(self) -> Sense {
        match self {
            Sense::Forward => Sense::Inverse,
            Sense::Inverse => Sense::Forward,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub hunk: usize,
    pub tag: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub intent: Option<String>,
    pub sense: Sense,
}

#[derive(Debug, thiserror::Error)]
pub enum PatchError {
    #[error(transparent)]
    Parse(#[from] DiffParseError),
    #[error(transparent)]
    Apply(#[from] ApplyError),
    #[error(transparent)]
    Projection(#[from] ProjectionError),
    #[error("annotation refers to hunk {0}, patch has {1}")]
    BadAnnotation(usize, usize),
    #[error("bad patch metadata: {0}")]
    Meta(#[from] serde_json::Error),
}

/// A diff between two states plus per-hunk annotations.
///
/// Notebooks are diffed in their projected form, so `diff` paths name cell
/// files rather than `.ipynb` files. [`apply_patch`] hides this.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Patch {
    pub patch_id: String,
    pub diff: UnifiedDiff,
    pub annotations: Vec<Annotation>,
    pub from_version: Option<String>,
    pub to_version: Option<String>,
    /// Binary contents referenced by hash from `diff`.
    pub blobs: BTreeMap<String, Vec<u8>>,
}

#[derive(Serialize, Deserialize)]
struct PatchMeta {
    patch_id: String,
    annotations: Vec<Annotation>,
    #[serde(default)]
    from_version: Option<String>,
    #[serde(default)]
    to_version: Option<String>,
    #[serde(default)]
    blobs: Vec<String>,
}

fn patch_id_for(text: &str) -> String {
    format!("p-{}", &sha256_hex(text.as_bytes())[..16])
}

impl Patch {
    fn from_parts(diff: UnifiedDiff, annotations: Vec<Annotation>, blobs: BTreeMap<String, Vec<u8>>) -> Patch {
        let patch_id = patch_id_for(&diff.to_string());
        Patch { patch_id, diff, annotations, from_version: None, to_version: None, blobs }
    }

    pub fn diff_text(&self) -> String {
        self.diff.to_string()
    }

    pub fn is_empty(&self) -> bool {
        self.diff.is_empty()
    }

    pub fn hunk_count(&self) -> usize {
        self.diff.hunk_count()
    }

    pub fn with_versions(mut self, from: impl Into<String>, to: impl Into<String>) -> Patch {
        self.from_version = Some(from.into());
        self.to_version = Some(to.into());
        self
    }

    /// Set free-text intent on every annotation.
    pub fn with_intent(mut self, intent: &str) -> Patch {
        for a in &mut self.annotations {
            a.intent = Some(intent.to_owned());
        }
        self
    }

    /// Distinct tags, in first-seen order.
    pub fn tags(&self) -> Vec<&str> {
        let mut seen = BTreeSet::new();
        self.annotations.iter().map(|a| a.tag.as_str()).filter(|t| seen.insert(*t)).collect()
    }

    /// Sidecar `<patch_id>.meta.json` contents.
    pub fn meta_json(&self) -> Vec<u8> {
        to_canonical_file(&PatchMeta {
            patch_id: self.patch_id.clone(),
            annotations: self.annotations.clone(),
            from_version: self.from_version.clone(),
            to_version: self.to_version.clone(),
            blobs: self.blobs.keys().cloned().collect(),
        })
    }

    /// Rebuild from diff text, optional sidecar metadata and blobs.
    pub fn from_stored(text: &str, meta: Option<&[u8]>, blobs: BTreeMap<String, Vec<u8>>) -> Result<Patch, PatchError> {
        let diff = UnifiedDiff::parse(text)?;
        let mut p = Patch::from_parts(diff, Vec::new(), blobs);
        if let Some(meta) = meta {
            let m: PatchMeta = serde_json::from_slice(meta)?;
            let n = p.hunk_count();
            if let Some(a) = m.annotations.iter().find(|a| a.hunk >= n) {
                return Err(PatchError::BadAnnotation(a.hunk, n));
            }
            p.annotations = m.annotations;
            p.from_version = m.from_version;
            p.to_version = m.to_version;
        }
        Ok(p)
    }

    /// Blob hashes listed by a sidecar, so a store can load them.
    pub fn blob_refs(meta: &[u8]) -> Result<Vec<String>, PatchError> {
        Ok(serde_json::from_slice::<PatchMeta>(meta)?.blobs)
    }
}

pub fn generate_patch(base: &FileSet, target: &FileSet) -> Patch {
    generate_patch_with(base, target, DEFAULT_CONTEXT_LINES, &default_rules())
}

pub fn generate_patch_with(base: &FileSet, target: &FileSet, context_lines: usize, rules: &RuleTable) -> Patch {
    generate_projected(&project(base), &project(target), context_lines, rules)
}

/// Diff two already projected file sets.
pub fn generate_projected(base: &FileSet, target: &FileSet, context_lines: usize, rules: &RuleTable) -> Patch {
    let (diff, blobs) = diff_filesets(base, target, context_lines);
    let annotations = annotate(&diff, base, target, rules);
    Patch::from_parts(diff, annotations, blobs)
}

pub fn apply_patch(p: &Patch, base: &FileSet) -> Result<FileSet, PatchError> {
    let projected = apply_projected(p, &project(base))?;
    Ok(unproject(&projected)?)
}

/// Apply to a projected file set, staying in projected form.
pub fn apply_projected(p: &Patch, projected: &FileSet) -> Result<FileSet, PatchError> {
    Ok(p.diff.apply(projected, &p.blobs)?)
}

pub fn invert_patch(p: &Patch) -> Patch {
    let diff = p.diff.inverted();
    let annotations = p
        .annotations
        .iter()
        .map(|a| Annotation { sense: a.sense.flip(), ..a.clone() })
        .collect();
    let mut inv = Patch::from_parts(diff, annotations, p.blobs.clone());
    inv.from_version = p.to_version.clone();
    inv.to_version = p.from_version.clone();
    inv
}

fn imports_of_siblings(files: &FileSet, owner: &str) -> BTreeSet<String> {
    let prefix = format!("{}/cells/", projection_dir(owner));
    files
        .iter()
        .filter(|(p, _)| p.starts_with(&prefix) && p.ends_with(".py"))
        .flat_map(|(_, b)| facts_for(&String::from_utf8_lossy(b)).imports)
        .collect()
}

fn tags_for_source(source: &str, context: &BTreeSet<String>, rules: &RuleTable) -> Vec<String> {
    classify_unit_with_context(&facts_for(source), context, rules).into_iter().map(|t| t.tag).collect()
}

/// Tags of the units enclosing each line range `[start, end)` of `text`.
fn script_tags(text: &str, start: usize, end: usize, rules: &RuleTable) -> Vec<String> {
    let blocks = segment_script(text);
    let context: BTreeSet<String> = blocks.iter().flat_map(|b| facts_for(&b.text).imports).collect();
    let mut tags = Vec::new();
    for b in &blocks {
        // block lines are 1-based inclusive
        let (bs, be) = (b.start_line - 1, b.end_line);
        let touches = if start == end { bs <= start && start <= be } else { bs < end && start < be };
        if touches {
            for t in tags_for_source(&b.text, &context, rules) {
                if !tags.contains(&t) {
                    tags.push(t);
                }
            }
        }
    }
    tags
}

fn annotate(diff: &UnifiedDiff, base: &FileSet, target: &FileSet, rules: &RuleTable) -> Vec<Annotation> {
    let mut out = Vec::new();
    let mut index = 0;
    for file in &diff.files {
        let path = file.path();
        for h in file.hunks() {
            let mut tags = Vec::new();
            if let Some((owner, name)) = cell_file_owner(path) {
                if name.ends_with(".py") {
                    // a deleted cell is tagged from its old source
                    let (set, p) = match &file.new_path {
                        Some(p) => (target, p.as_str()),
                        None => (base, file.old_path.as_deref().unwrap_or(path)),
                    };
                    if let Some(src) = set.get_str(p) {
                        tags = tags_for_source(src, &imports_of_siblings(set, owner), rules);
                    }
                }
            } else if is_script_path(path) {
                if let Some(src) = file.new_path.as_deref().and_then(|p| target.get_str(p)) {
                    let s = h.new_index();
                    tags = script_tags(src, s, s + h.new_len, rules);
                }
                if let Some(src) = file.old_path.as_deref().and_then(|p| base.get_str(p)) {
                    let s = h.old_start.saturating_sub(usize::from(h.old_len > 0));
                    for t in script_tags(src, s, s + h.old_len, rules) {
                        if !tags.contains(&t) {
                            tags.push(t);
                        }
                    }
                }
            }
            out.extend(tags.into_iter().map(|tag| Annotation { hunk: index, tag, intent: None, sense: Sense::Forward }));
            index += 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::canonical::to_jupyter_string;
    use serde_json::json;

    fn nb(cells: &[(&str, &str)]) -> Vec<u8> {
        let cells: Vec<_> = cells
            .iter()
            .map(|(id, src)| json!({"cell_type": "code", "id": id, "metadata": {}, "execution_count": null, "outputs": [], "source": src}))
            .collect();
        to_jupyter_string(&json!({"cells": cells, "metadata": {}, "nbformat": 4, "nbformat_minor": 5})).into_bytes()
    }

    fn one(path: &str, bytes: Vec<u8>) -> FileSet {
        let mut fs = FileSet::new();
        fs.insert(path, bytes);
        fs
    }

    #[test]
    fn notebook_patch_round_trip_and_tags() {
        let a = one("t.ipynb", nb(&[("c1", "import pandas as pd"), ("c2", "df = pd.read_csv('a.csv')")]));
        let b = one("t.ipynb", nb(&[("c1", "import pandas as pd"), ("c2", "df = pd.read_csv('b.csv')")]));
        let p = generate_patch(&a, &b);
        assert_eq!(p.hunk_count(), 1);
        assert!(p.diff_text().contains("t.ipynb.pkl.d/cells/c2.py"));
        assert_eq!(p.tags(), ["data loading"]);
        assert_eq!(apply_patch(&p, &a).unwrap(), b);
        let inv = invert_patch(&p);
        assert_eq!(apply_patch(&inv, &b).unwrap(), a);
        assert!(inv.annotations.iter().all(|x| x.sense == Sense::Inverse));
        assert_eq!(invert_patch(&inv).diff, p.diff);
    }

    #[test]
    fn empty_patch() {
        let a = one("x.py", b"x = 1\n".to_vec());
        let p = generate_patch(&a, &a);
        assert!(p.is_empty());
        assert_eq!(p.hunk_count(), 0);
        assert_eq!(apply_patch(&p, &a).unwrap(), a);
        assert!(invert_patch(&p).is_empty());
    }

    #[test]
    fn script_hunk_tags() {
        let a = one("s.py", b"import matplotlib.pyplot as plt\n\nplt.plot([1])\n".to_vec());
        let b = one("s.py", b"import matplotlib.pyplot as plt\n\nplt.plot([2])\n".to_vec());
        assert_eq!(generate_patch(&a, &b).tags(), ["plotting"]);
    }

    #[test]
    fn stored_form_round_trip() {
        let a = one("t.ipynb", nb(&[("c1", "import optuna")]));
        let b = one("t.ipynb", nb(&[]));
        let p = generate_patch(&a, &b).with_versions("v1", "v2").with_intent("cleanup");
        let q = Patch::from_stored(&p.diff_text(), Some(&p.meta_json()), p.blobs.clone()).unwrap();
        assert_eq!(q, p);
        assert_eq!(q.annotations[0].tag, "hyperparameter tuning");
        assert_eq!(q.annotations[0].intent.as_deref(), Some("cleanup"));
    }

    #[test]
    fn drifted_base_reports_mismatch() {
        let a = one("s.py", b"a\nb\n".to_vec());
        let b = one("s.py", b"a\nc\n".to_vec());
        let p = generate_patch(&a, &b);
        let err = apply_patch(&p, &one("s.py", b"a\nz\n".to_vec())).unwrap_err();
        assert!(matches!(err, PatchError::Apply(ApplyError::ContextMismatch { hunk: 0, .. })));
    }
}
