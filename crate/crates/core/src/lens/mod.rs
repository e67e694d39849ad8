//! Reversible, parameterized transformations between a procedure state and
//! a view of it.
//!
//! A lens is data: two templates and a parameter declaration. Evaluating
//! the forward template yields view files; the inverse template gives a
//! best-effort source state, and a complement patch stored beside each view
//! makes inversion exact.

pub mod jsonpath;
mod ops;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::canonical::{params_hash, to_canonical_file, to_canonical_string};
use crate::classify::RuleTable;
use crate::fileset::FileSet;
use crate::ingest::IngestError;
use crate::patch::{apply_patch, generate_patch_with, Patch, PatchError};

pub use ops::{normalize_extract_pattern, render_json, render_markdown, Operation, SELECTION_FILE, SUMMARY_FILE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum LensType {
    Extraction,
    Abstraction,
    Transformation,
    Temporal,
}

impl LensType {
    pub fn as_str(self) -> &'static str {
        match self {
            LensType::Extraction => "Extraction",
            LensType::Abstraction => "Abstraction",
            LensType::Transformation => "Transformation",
            LensType::Temporal => "Temporal",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "Extraction" => Some(LensType::Extraction),
            "Abstraction" => Some(LensType::Abstraction),
            "Transformation" => Some(LensType::Transformation),
            "Temporal" => Some(LensType::Temporal),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamType {
    String,
    Integer,
    Number,
    Boolean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamDecl {
    #[serde(rename = "type")]
    pub param_type: ParamType,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<Value>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub required: bool,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub description: String,
}

/// A lens definition in its on-disk shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lens {
    #[serde(rename = "LensID")]
    pub lens_id: String,
    #[serde(rename = "Type")]
    pub lens_type: LensType,
    #[serde(rename = "Description", default)]
    pub description: String,
    #[serde(rename = "SourceSchema")]
    pub source_schema: String,
    #[serde(rename = "TargetSchema")]
    pub target_schema: String,
    #[serde(rename = "PatchTemplate")]
    pub patch_template: Value,
    #[serde(rename = "InversePatchTemplate")]
    pub inverse_patch_template: Value,
    #[serde(rename = "ParametersSchema", default)]
    pub parameters_schema: BTreeMap<String, ParamDecl>,
    /// Primitive lenses of a composite, in application order.
    #[serde(rename = "Components", default, skip_serializing_if = "Vec::is_empty")]
    pub components: Vec<Lens>,
}

#[derive(Debug, thiserror::Error)]
pub enum LensError {
    #[error("invalid lens definition: {0}")]
    InvalidLens(String),
    #[error("parameter error: {0}")]
    ParamValidation(String),
    #[error("unknown lens {0}")]
    UnknownLens(String),
    #[error("unknown schema {0}")]
    UnknownSchema(String),
    #[error("lens {lens} expects schema {expected}, procedure has {found}")]
    SchemaMismatch { lens: String, expected: String, found: String },
    #[error("cannot compose {first} (target {target}) with {second} (source {source_schema})")]
    IncompatibleLens { first: String, second: String, target: String, source_schema: String },
    #[error("template error: {0}")]
    Template(String),
    #[error("complement {0} for a lossy view is missing")]
    MissingComplement(String),
    #[error("version lookup failed: {0}")]
    Version(String),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Patch(#[from] PatchError),
}

/// Supplies other versions of the procedure a lens is evaluated on.
pub trait VersionSource {
    fn version_state(&self, version_id: &str) -> Result<FileSet, LensError>;
}

/// A procedure with a single state: only that state's own ids resolve.
pub struct NoVersions;

impl VersionSource for NoVersions {
    fn version_state(&self, version_id: &str) -> Result<FileSet, LensError> {
        Err(LensError::Version(format!("no version history available for {version_id}")))
    }
}

/// Schema ids plus a declared generalization relation.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SchemaRegistry {
    schemas: BTreeSet<String>,
    parents: BTreeMap<String, BTreeSet<String>>,
}

impl SchemaRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn builtin() -> Self {
        let mut r = Self::new();
        for (s, g) in [
            ("ml-training-procedure", Some("notebook-procedure")),
            ("notebook-procedure", Some("procedure")),
            ("procedure", None),
            ("cell-snippet-set", Some("snippet-set")),
            ("snippet-set", None),
            ("hyperparameter-set", None),
            ("hyperparameter-table", None),
            ("procedure-summary", None),
            ("semantic-diff", None),
        ] {
            r.register(s);
            if let Some(g) = g {
                r.declare_generalization(s, g);
            }
        }
        r
    }

    pub fn register(&mut self, id: &str) {
        self.schemas.insert(id.to_owned());
    }

    /// Declare `general` a generalization of `specific`. Both get registered.
    pub fn declare_generalization(&mut self, specific: &str, general: &str) {
        self.register(specific);
        self.register(general);
        self.parents.entry(specific.to_owned()).or_default().insert(general.to_owned());
    }

    pub fn contains(&self, id: &str) -> bool {
        self.schemas.contains(id)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.schemas.iter().map(String::as_str)
    }

    pub fn edges(&self) -> impl Iterator<Item = (&str, &str)> {
        self.parents.iter().flat_map(|(s, gs)| gs.iter().map(move |g| (s.as_str(), g.as_str())))
    }

    /// Chain of schema ids from `specific` up to `general`, if `general` is
    /// reachable through declared generalizations (or equal).
    pub fn proof(&self, specific: &str, general: &str) -> Option<Vec<String>> {
        let mut queue = vec![vec![specific.to_owned()]];
        let mut seen = BTreeSet::new();
        while let Some(path) = queue.pop() {
            let last = path.last().expect("paths are nonempty");
            if last == general {
                return Some(path);
            }
            if !seen.insert(last.clone()) {
                continue;
            }
            for p in self.parents.get(last).into_iter().flatten() {
                let mut next = path.clone();
                next.push(p.clone());
                queue.insert(0, next);
            }
        }
        None
    }

    /// True when data of schema `have` may be fed where `want` is expected.
    pub fn compatible(&self, have: &str, want: &str) -> bool {
        self.proof(have, want).is_some()
    }
}

pub fn can_compose(l1: &Lens, l2: &Lens, registry: &SchemaRegistry) -> bool {
    registry.compatible(&l1.target_schema, &l2.source_schema)
}

fn primitives(l: &Lens) -> Vec<Lens> {
    if l.components.is_empty() {
        vec![l.clone()]
    } else {
        l.components.clone()
    }
}

/// Composite lens applying `l1` then `l2`.
pub fn compose_lenses(l1: &Lens, l2: &Lens, registry: &SchemaRegistry) -> Result<Lens, LensError> {
    if !can_compose(l1, l2, registry) {
        return Err(LensError::IncompatibleLens {
            first: l1.lens_id.clone(),
            second: l2.lens_id.clone(),
            target: l1.target_schema.clone(),
            source_schema: l2.source_schema.clone(),
        });
    }
    let mut components = primitives(l1);
    components.extend(primitives(l2));
    let ids: Vec<&str> = components.iter().map(|c| c.lens_id.as_str()).collect();
    let types: BTreeSet<LensType> = components.iter().map(|c| c.lens_type).collect();
    let mut parameters_schema = BTreeMap::new();
    for c in &components {
        for (k, v) in &c.parameters_schema {
            parameters_schema.entry(k.clone()).or_insert_with(|| v.clone());
        }
    }
    Ok(Lens {
        lens_id: ids.join("+"),
        lens_type: if types.len() == 1 { *types.iter().next().expect("one type") } else { LensType::Transformation },
        description: ids.join(" then "),
        source_schema: l1.source_schema.clone(),
        target_schema: l2.target_schema.clone(),
        patch_template: serde_json::json!({"compose": ids}),
        inverse_patch_template: serde_json::json!({"compose": ids.iter().rev().collect::<Vec<_>>()}),
        parameters_schema,
        components,
    })
}

/// A lens whose view is its input.
pub fn identity_lens(schema: &str) -> Lens {
    Lens {
        lens_id: format!("identity-{schema}"),
        lens_type: LensType::Transformation,
        description: format!("Identity on {schema}"),
        source_schema: schema.to_owned(),
        target_schema: schema.to_owned(),
        patch_template: Value::Object(Map::new()),
        inverse_patch_template: Value::Object(Map::new()),
        parameters_schema: BTreeMap::new(),
        components: Vec::new(),
    }
}

const BUILTIN_LENSES: &str = include_str!("builtin_lenses.json");

pub fn builtin_lenses() -> Vec<Lens> {
    let lenses: Vec<Lens> = serde_json::from_str(BUILTIN_LENSES).expect("shipped lens catalog parses");
    let mut out: Vec<Lens> = lenses;
    out.push(identity_lens("procedure"));
    out
}

/// Built-in name spellings used in queries (`extract_hyperparams`,
/// `high_level_summary`, `abstraction`) mapped to lens ids.
pub fn resolve_alias(name: &str) -> String {
    let hyphen = name.replace('_', "-");
    match hyphen.as_str() {
        "extract-hyperparams" | "hyperparameters" => "hyperparameter-focus".to_owned(),
        "abstraction" | "summary" => "high-level-summary".to_owned(),
        "extraction" => "cell-extraction".to_owned(),
        "temporal" => "temporal-diff".to_owned(),
        "table" => "visualize-as-table".to_owned(),
        _ => hyphen,
    }
}

impl Lens {
    pub fn from_json(text: &str) -> Result<Lens, LensError> {
        let value: Value = serde_json::from_str(text).map_err(|e| LensError::InvalidLens(e.to_string()))?;
        let lens: Lens = serde_json::from_value(value).map_err(|e| LensError::InvalidLens(e.to_string()))?;
        lens.validate()?;
        Ok(lens)
    }

    pub fn to_json(&self) -> Vec<u8> {
        to_canonical_file(self)
    }

    pub fn is_composite(&self) -> bool {
        !self.components.is_empty()
    }

    /// Structural checks done at registration.
    pub fn validate(&self) -> Result<(), LensError> {
        if self.lens_id.is_empty() || self.lens_id.contains(['/', '\\']) || self.lens_id.starts_with('.') {
            return Err(LensError::InvalidLens(format!("bad lens id {:?}", self.lens_id)));
        }
        for (name, t) in [("PatchTemplate", &self.patch_template), ("InversePatchTemplate", &self.inverse_patch_template)] {
            if !t.is_object() {
                return Err(LensError::InvalidLens(format!("{} missing or not an object", name)));
            }
        }
        for (k, d) in &self.parameters_schema {
            if let Some(v) = &d.default {
                check_type(k, d.param_type, v)?;
            }
        }
        if !self.is_composite() {
            ops::Operation::of(self)?;
        }
        Ok(())
    }

    /// Check user parameters and fill in defaults.
    pub fn resolve_params(&self, params: &Map<String, Value>) -> Result<Map<String, Value>, LensError> {
        for (k, v) in params {
            let decl = self
                .parameters_schema
                .get(k)
                .ok_or_else(|| LensError::ParamValidation(format!("lens {} has no parameter {k}", self.lens_id)))?;
            check_type(k, decl.param_type, v)?;
        }
        let mut out = Map::new();
        for (k, d) in &self.parameters_schema {
            match params.get(k).or(d.default.as_ref()) {
                Some(v) => {
                    out.insert(k.clone(), v.clone());
                }
                None if d.required => {
                    return Err(LensError::ParamValidation(format!("lens {} requires parameter {k}", self.lens_id)))
                }
                None => {}
            }
        }
        Ok(out)
    }

    /// Parameters relevant to one component of a composite.
    fn component_params(&self, params: &Map<String, Value>) -> Map<String, Value> {
        params.iter().filter(|(k, _)| self.parameters_schema.contains_key(*k)).map(|(k, v)| (k.clone(), v.clone())).collect()
    }
}

fn check_type(name: &str, t: ParamType, v: &Value) -> Result<(), LensError> {
    let ok = match t {
        ParamType::String => v.is_string(),
        ParamType::Integer => v.is_i64() || v.is_u64(),
        ParamType::Number => v.is_number(),
        ParamType::Boolean => v.is_boolean(),
    };
    if ok {
        Ok(())
    } else {
        Err(LensError::ParamValidation(format!("parameter {name} must be {t:?}, got {v}")))
    }
}

/// Substitute `{{name}}` placeholders and override same-named top-level
/// keys with parameter values.
pub fn instantiate_value(template: &Value, params: &Map<String, Value>) -> Value {
    fn subst(v: &Value, params: &Map<String, Value>) -> Value {
        match v {
            Value::String(s) => {
                let trimmed = s.trim();
                if let Some(name) = trimmed.strip_prefix("{{").and_then(|r| r.strip_suffix("}}")) {
                    if let Some(p) = params.get(name.trim()) {
                        return p.clone();
                    }
                }
                let mut out = s.clone();
                for (k, p) in params {
                    let text = match p {
                        Value::String(x) => x.clone(),
                        other => other.to_string(),
                    };
                    out = out.replace(&format!("{{{{{k}}}}}"), &text);
                }
                Value::String(out)
            }
            Value::Array(a) => Value::Array(a.iter().map(|x| subst(x, params)).collect()),
            Value::Object(m) => Value::Object(m.iter().map(|(k, x)| (k.clone(), subst(x, params))).collect()),
            other => other.clone(),
        }
    }
    let mut out = subst(template, params);
    if let Value::Object(m) = &mut out {
        for (k, p) in params {
            if m.contains_key(k) {
                m.insert(k.clone(), p.clone());
            }
        }
    }
    out
}

/// Output of evaluating a lens forward.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Materialized {
    pub files: FileSet,
    pub diagnostics: Vec<String>,
}

pub struct EvalContext<'a> {
    pub rules: &'a RuleTable,
    pub versions: &'a dyn VersionSource,
    pub context_lines: usize,
}

impl EvalContext<'_> {
    pub fn standalone(rules: &RuleTable) -> EvalContext<'_> {
        EvalContext { rules, versions: &NoVersions, context_lines: crate::patch::DEFAULT_CONTEXT_LINES }
    }
}

/// Run the forward transform of `lens` (all components, in order).
pub fn forward(lens: &Lens, params: &Map<String, Value>, source: &FileSet, ctx: &EvalContext<'_>) -> Result<Materialized, LensError> {
    if lens.is_composite() {
        let mut current = Materialized { files: source.clone(), diagnostics: Vec::new() };
        for c in &lens.components {
            let p = c.resolve_params(&c.component_params(params))?;
            let next = ops::forward(c, &p, &current.files, ctx)?;
            current.files = next.files;
            current.diagnostics.extend(next.diagnostics);
        }
        return Ok(current);
    }
    let p = lens.resolve_params(params)?;
    ops::forward(lens, &p, source, ctx)
}

/// The inverse template alone: a best-effort source state from a view.
pub fn inverse(lens: &Lens, params: &Map<String, Value>, view: &FileSet) -> Result<FileSet, LensError> {
    if lens.is_composite() {
        let mut current = view.clone();
        for c in lens.components.iter().rev() {
            let p = c.resolve_params(&c.component_params(params))?;
            current = ops::inverse(c, &p, &current)?;
        }
        return Ok(current);
    }
    let p = lens.resolve_params(params)?;
    ops::inverse(lens, &p, view)
}

/// Concrete patch from `base` to the lens view, with diagnostics.
pub fn instantiate_template(
    lens: &Lens,
    params: &Map<String, Value>,
    base: &FileSet,
    ctx: &EvalContext<'_>,
) -> Result<(Patch, Materialized), LensError> {
    let view = forward(lens, params, base, ctx)?;
    let context = lens
        .resolve_params(params)
        .ok()
        .and_then(|p| instantiate_value(&lens.patch_template, &p).get("contextLines").and_then(Value::as_u64))
        .map_or(ctx.context_lines, |n| n as usize);
    let patch = generate_patch_with(base, &view.files, context, ctx.rules);
    Ok((patch, view))
}

/// A view plus whatever makes it invertible.
#[derive(Debug, Clone)]
pub struct ViewBundle {
    pub view: Materialized,
    /// Patch from the naive inverse to the source; `None` when the inverse
    /// template alone reproduces the source.
    pub complement: Option<Patch>,
}

pub fn materialize(lens: &Lens, params: &Map<String, Value>, source: &FileSet, ctx: &EvalContext<'_>) -> Result<ViewBundle, LensError> {
    let view = forward(lens, params, source, ctx)?;
    let naive = inverse(lens, params, &view.files)?;
    let complement = generate_patch_with(&naive, source, ctx.context_lines, ctx.rules);
    Ok(ViewBundle { view, complement: (!complement.is_empty()).then_some(complement) })
}

/// Exact source state from a view and its complement.
pub fn invert(lens: &Lens, params: &Map<String, Value>, view: &FileSet, complement: Option<&Patch>) -> Result<FileSet, LensError> {
    let naive = inverse(lens, params, view)?;
    match complement {
        Some(c) => Ok(apply_patch(c, &naive)?),
        None => Ok(naive),
    }
}

/// Hash for a lens chain's parameters: the single map for one lens, the
/// list of maps for a chain.
pub fn chain_params_hash(chain: &[(String, Map<String, Value>)]) -> String {
    match chain {
        [(_, p)] => params_hash(p),
        _ => crate::canonical::md5_hex(to_canonical_string(&chain.iter().map(|(_, p)| p).collect::<Vec<_>>()).as_bytes()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn lens(id: &str, src: &str, tgt: &str) -> Lens {
        Lens { lens_id: id.into(), source_schema: src.into(), target_schema: tgt.into(), ..identity_lens("x") }
    }

    #[test]
    fn builtin_catalog_is_valid() {
        let ls = builtin_lenses();
        for l in &ls {
            l.validate().unwrap();
            assert_eq!(Lens::from_json(std::str::from_utf8(&l.to_json()).unwrap()).unwrap(), *l);
        }
        let ids: BTreeSet<_> = ls.iter().map(|l| l.lens_id.as_str()).collect();
        for want in ["cell-extraction", "hyperparameter-focus", "high-level-summary", "temporal-diff", "visualize-as-table"] {
            assert!(ids.contains(want), "{want}");
        }
        let reg = SchemaRegistry::builtin();
        for l in &ls {
            assert!(reg.contains(&l.source_schema) && reg.contains(&l.target_schema), "{}", l.lens_id);
        }
    }

    #[test]
    fn compatibility() {
        let mut reg = SchemaRegistry::builtin();
        let hp = lens("a", "ml-training-procedure", "hyperparameter-set");
        assert!(can_compose(&hp, &lens("b", "hyperparameter-set", "t"), &reg));
        assert!(!can_compose(&hp, &lens("b", "ml-training-procedure", "t"), &reg));
        reg.declare_generalization("cell-snippet-set", "snippet-set");
        assert!(can_compose(&lens("c", "p", "cell-snippet-set"), &lens("d", "snippet-set", "t"), &reg));
        // the relation is directed
        assert!(!can_compose(&lens("c", "p", "snippet-set"), &lens("d", "cell-snippet-set", "t"), &reg));
        assert_eq!(reg.proof("ml-training-procedure", "procedure").unwrap().len(), 3);
    }

    #[test]
    fn composition_flattens_and_gates() {
        let reg = SchemaRegistry::builtin();
        let (a, b, c) = (lens("a", "procedure", "snippet-set"), lens("b", "snippet-set", "procedure-summary"), lens("c", "procedure-summary", "semantic-diff"));
        let left = compose_lenses(&compose_lenses(&a, &b, &reg).unwrap(), &c, &reg).unwrap();
        let right = compose_lenses(&a, &compose_lenses(&b, &c, &reg).unwrap(), &reg).unwrap();
        assert_eq!(left, right);
        assert_eq!(left.lens_id, "a+b+c");
        assert_eq!((left.source_schema.as_str(), left.target_schema.as_str()), ("procedure", "semantic-diff"));
        assert!(matches!(compose_lenses(&c, &a, &reg), Err(LensError::IncompatibleLens { .. })));
    }

    #[test]
    fn params_validate_and_substitute() {
        let l = builtin_lenses().into_iter().find(|l| l.lens_id == "temporal-diff").unwrap();
        assert!(matches!(l.resolve_params(&Map::new()), Err(LensError::ParamValidation(_))));
        let mut p = Map::new();
        p.insert("from_version".into(), json!("v1"));
        p.insert("to_version".into(), json!("v2"));
        let resolved = l.resolve_params(&p).unwrap();
        let t = instantiate_value(&l.patch_template, &resolved);
        assert_eq!(t["fromVersion"], json!("v1"));
        p.insert("bogus".into(), json!(1));
        assert!(matches!(l.resolve_params(&p), Err(LensError::ParamValidation(_))));
        p.remove("bogus");
        p.insert("from_version".into(), json!(3));
        assert!(matches!(l.resolve_params(&p), Err(LensError::ParamValidation(_))));
    }

    #[test]
    fn override_by_key_and_placeholder() {
        let t = json!({"contextLines": 0, "path": "{{dir}}/x", "n": "{{n}}"});
        let mut p = Map::new();
        p.insert("contextLines".into(), json!(2));
        p.insert("dir".into(), json!("a"));
        p.insert("n".into(), json!(5));
        assert_eq!(instantiate_value(&t, &p), json!({"contextLines": 2, "path": "a/x", "n": 5}));
    }

    #[test]
    fn missing_inverse_template_rejected() {
        let text = r#"{"LensID":"x","Type":"Extraction","SourceSchema":"procedure","TargetSchema":"procedure","PatchTemplate":{}}"#;
        assert!(matches!(Lens::from_json(text), Err(LensError::InvalidLens(_))));
        let text = r#"{"LensID":"x","Type":"Extraction","SourceSchema":"procedure","TargetSchema":"procedure","PatchTemplate":{},"InversePatchTemplate":null}"#;
        assert!(matches!(Lens::from_json(text), Err(LensError::InvalidLens(_))));
    }

    #[test]
    fn aliases() {
        assert_eq!(resolve_alias("extract_hyperparams"), "hyperparameter-focus");
        assert_eq!(resolve_alias("high_level_summary"), "high-level-summary");
        assert_eq!(resolve_alias("visualize_as_table"), "visualize-as-table");
        assert_eq!(resolve_alias("abstraction"), "high-level-summary");
    }

    #[test]
    fn chain_hash_single_matches_params_hash() {
        assert_eq!(chain_params_hash(&[("x".into(), Map::new())]), "99914b932bd37a50b983c5e7c90ae93b");
        assert_ne!(chain_params_hash(&[("x".into(), Map::new()), ("y".into(), Map::new())]), chain_params_hash(&[("x".into(), Map::new())]));
    }
}
