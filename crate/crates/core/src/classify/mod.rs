//! Semantic tags and structural code facts for procedural units.

mod deps;
mod rules;
mod syntax;

use std::collections::BTreeSet;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub use deps::{infer_dependencies, DependencyEdge};
pub use rules::{
    classify_unit, classify_unit_with_context, default_rules, Confidence, MatchKind, Requirement, Rule, RuleTable,
    RuleTableError, SemanticTag,
};
pub use syntax::{build_syntax_facts, SyntaxUnparseable};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FactsOrigin {
    /// Built from a full syntax tree.
    Syntax,
    /// Line patterns only; the source did not parse.
    #[default]
    Regex,
}

/// Structural facts about one unit of code. All sets hold trimmed entries.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeFacts {
    pub imports: BTreeSet<String>,
    pub defs: BTreeSet<String>,
    /// Dotted call names, e.g. `pd.read_csv`.
    pub calls: BTreeSet<String>,
    pub reads: BTreeSet<String>,
    pub writes: BTreeSet<String>,
    pub origin: FactsOrigin,
}

static IMPORT_LINE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^\s*(import|from)\s+\S+").unwrap());
static DEF_LINE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^\s*def\s+\w+\s*\(").unwrap());

/// Every line that starts an `import`/`from` statement, trimmed.
pub fn extract_imports(source: &str) -> BTreeSet<String> {
    source
        .lines()
        .filter(|l| IMPORT_LINE.is_match(l))
        .map(|l| l.trim().to_owned())
        .collect()
}

/// Every `def name(` header line, trimmed.
pub fn extract_defs(source: &str) -> BTreeSet<String> {
    source
        .lines()
        .filter(|l| DEF_LINE.is_match(l))
        .map(|l| l.trim().to_owned())
        .collect()
}

/// Regex-only facts used when the source does not parse.
pub fn regex_facts(source: &str) -> CodeFacts {
    CodeFacts {
        imports: extract_imports(source),
        defs: extract_defs(source),
        origin: FactsOrigin::Regex,
        ..CodeFacts::default()
    }
}

/// Blank out IPython magics and shell escapes (`%…`, `!…`) so notebook
/// cells parse as plain Python. Line numbering is preserved.
pub fn strip_ipython_magics(source: &str) -> String {
    let mut out = String::with_capacity(source.len());
    let mut in_cell_magic = false;
    for (i, line) in source.split('\n').enumerate() {
        if i > 0 {
            out.push('\n');
        }
        let t = line.trim_start();
        if i == 0 && t.starts_with("%%") {
            in_cell_magic = true;
        }
        if in_cell_magic || t.starts_with('%') || t.starts_with('!') {
            continue;
        }
        out.push_str(line);
    }
    out
}

/// Syntax facts when the source parses, regex facts otherwise.
pub fn facts_for(source: &str) -> CodeFacts {
    let cleaned = strip_ipython_magics(source);
    build_syntax_facts(&cleaned).unwrap_or_else(|_| regex_facts(source))
}

/// Minimal JSON-LD context for tag documents.
pub fn jsonld_context() -> Value {
    json!({
        "@vocab": "https://pkl.dev/ns#",
        "unit": {"@id": "https://pkl.dev/ns#unit", "@type": "@id"},
        "tag": "https://pkl.dev/ns#tag",
        "confidence": "https://pkl.dev/ns#confidence",
        "sourceRule": "https://pkl.dev/ns#sourceRule"
    })
}

/// Linked-data document describing the tags attached to one unit.
pub fn tags_jsonld(unit_id: &str, tags: &[SemanticTag]) -> Value {
    json!({
        "@context": jsonld_context(),
        "@type": "ProceduralUnit",
        "@id": unit_id,
        "tags": tags.iter().map(|t| json!({
            "@type": "SemanticTag",
            "tag": t.tag,
            "confidence": t.confidence,
            "sourceRule": t.source_rule,
        })).collect::<Vec<_>>(),
    })
}
