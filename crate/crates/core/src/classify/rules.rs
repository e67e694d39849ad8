use std::collections::BTreeSet;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{CodeFacts, FactsOrigin};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchKind {
    Import,
    Call,
    Def,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Confidence {
    /// Facts came from a syntax tree.
    Rule,
    /// Facts came from line patterns only.
    Heuristic,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SemanticTag {
    pub tag: String,
    pub confidence: Confidence,
    pub source_rule: String,
}

/// Extra evidence a rule needs besides its own match, checked against the
/// unit's facts plus any context imports.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Requirement {
    pub match_kind: MatchKind,
    pub pattern: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rule {
    pub rule_id: String,
    pub match_kind: MatchKind,
    pub pattern: String,
    pub tag: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub requires: Option<Requirement>,
}

#[derive(Debug, thiserror::Error)]
pub enum RuleTableError {
    #[error("rule table is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("rule {rule_id}: bad pattern: {source}")]
    Pattern {
        rule_id: String,
        #[source]
        source: regex::Error,
    },
    #[error("rule {0}: empty tag")]
    EmptyTag(String),
    #[error("duplicate rule id {0}")]
    DuplicateId(String),
}

#[derive(Debug, Clone)]
struct CompiledRule {
    rule: Rule,
    pattern: Regex,
    requires: Option<(MatchKind, Regex)>,
}

/// An ordered, compiled rule table. Read-only once built.
#[derive(Debug, Clone)]
pub struct RuleTable {
    rules: Vec<CompiledRule>,
}

const DEFAULT_RULES: &str = include_str!("default_rules.json");

pub fn default_rules() -> RuleTable {
    RuleTable::from_json(DEFAULT_RULES).expect("shipped rule table is valid")
}

impl RuleTable {
    pub fn new(rules: Vec<Rule>) -> Result<Self, RuleTableError> {
        let mut seen = BTreeSet::new();
        let mut compiled = Vec::with_capacity(rules.len());
        for rule in rules {
            if !seen.insert(rule.rule_id.clone()) {
                return Err(RuleTableError::DuplicateId(rule.rule_id));
            }
            if rule.tag.trim().is_empty() {
                return Err(RuleTableError::EmptyTag(rule.rule_id));
            }
            let compile = |p: &str| {
                Regex::new(p).map_err(|source| RuleTableError::Pattern { rule_id: rule.rule_id.clone(), source })
            };
            let pattern = compile(&rule.pattern)?;
            let requires = match &rule.requires {
                Some(req) => Some((req.match_kind, compile(&req.pattern)?)),
                None => None,
            };
            compiled.push(CompiledRule { rule, pattern, requires });
        }
        Ok(RuleTable { rules: compiled })
    }

    /// Parse a JSON list of rules.
    pub fn from_json(text: &str) -> Result<Self, RuleTableError> {
        let rules: Vec<Rule> = serde_json::from_str(text)?;
        Self::new(rules)
    }

    pub fn rules(&self) -> impl Iterator<Item = &Rule> {
        self.rules.iter().map(|c| &c.rule)
    }

    pub fn to_json(&self) -> String {
        crate::canonical::to_canonical_string(&self.rules().collect::<Vec<_>>())
    }
}

fn field(facts: &CodeFacts, kind: MatchKind) -> &BTreeSet<String> {
    match kind {
        MatchKind::Import => &facts.imports,
        MatchKind::Call => &facts.calls,
        MatchKind::Def => &facts.defs,
    }
}

pub fn classify_unit(facts: &CodeFacts, rules: &RuleTable) -> Vec<SemanticTag> {
    classify_unit_with_context(facts, &BTreeSet::new(), rules)
}

/// Like [`classify_unit`], with imports from the surrounding document
/// (other cells) available to rule requirements.
pub fn classify_unit_with_context(
    facts: &CodeFacts,
    context_imports: &BTreeSet<String>,
    rules: &RuleTable,
) -> Vec<SemanticTag> {
    let confidence = match facts.origin {
        FactsOrigin::Syntax => Confidence::Rule,
        FactsOrigin::Regex => Confidence::Heuristic,
    };
    let mut tags: Vec<SemanticTag> = Vec::new();
    for c in &rules.rules {
        if tags.iter().any(|t| t.tag == c.rule.tag) {
            continue;
        }
        if !field(facts, c.rule.match_kind).iter().any(|v| c.pattern.is_match(v)) {
            continue;
        }
        if let Some((kind, re)) = &c.requires {
            let mut pool = field(facts, *kind).iter();
            let ok = pool.any(|v| re.is_match(v))
                || (*kind == MatchKind::Import && context_imports.iter().any(|v| re.is_match(v)));
            if !ok {
                continue;
            }
        }
        tags.push(SemanticTag { tag: c.rule.tag.clone(), confidence, source_rule: c.rule.rule_id.clone() });
    }
    tags
}
