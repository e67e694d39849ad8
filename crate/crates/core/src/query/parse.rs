use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Number, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CmpOp {
    Contains,
    Eq,
    Fuzzy,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pred {
    Cmp { field: String, op: CmpOp, value: String },
    And(Box<Pred>, Box<Pred>),
    Or(Box<Pred>, Box<Pred>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LensRef {
    pub name: String,
    pub params: Map<String, Value>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Query {
    Find { filter: Pred },
    Units { target: Option<String>, filter: Option<Pred> },
    View { target: String, version: Option<String>, chain: Vec<LensRef> },
    Diff { target: String, from_version: String, other: Option<String>, to_version: String },
    Steps { target: String, from: u64, to: u64 },
}

pub const PROCEDURE_FIELDS: &[&str] = &["tags", "name", "id", "description", "schema", "content"];
pub const UNIT_FIELDS: &[&str] = &["tags", "content", "file", "kind", "id", "procedure"];

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("query parse error at offset {offset}: expected {}, found {found}", expected.join(" or "))]
pub struct ParseError {
    pub offset: usize,
    pub expected: Vec<String>,
    pub found: String,
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Word(String),
    Str(String),
    Sym(char),
    End,
}

impl fmt::Display for Tok {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tok::Word(w) => write!(f, "{w:?}"),
            Tok::Str(s) => write!(f, "string {s:?}"),
            Tok::Sym(c) => write!(f, "'{c}'"),
            Tok::End => f.write_str("end of query"),
        }
    }
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || matches!(c, '_' | '-' | '.')
}

fn lex(text: &str) -> Result<Vec<(usize, Tok)>, ParseError> {
    let mut out = Vec::new();
    let mut it = text.char_indices().peekable();
    while let Some(&(i, c)) = it.peek() {
        if c.is_whitespace() {
            it.next();
        } else if c == '"' {
            it.next();
            let mut s = String::new();
            loop {
                match it.next() {
                    None => {
                        return Err(ParseError { offset: i, expected: vec!["closing '\"'".into()], found: "end of query".into() })
                    }
                    Some((_, '"')) => break,
                    Some((j, '\\')) => match it.next() {
                        Some((_, e @ ('"' | '\\'))) => s.push(e),
                        Some((_, 'n')) => s.push('\n'),
                        _ => return Err(ParseError { offset: j, expected: vec!["escape \\\" \\\\ or \\n".into()], found: "bad escape".into() }),
                    },
                    Some((_, ch)) => s.push(ch),
                }
            }
            out.push((i, Tok::Str(s)));
        } else if is_word_char(c) {
            let mut w = String::new();
            while let Some(&(_, ch)) = it.peek() {
                if !is_word_char(ch) {
                    break;
                }
                w.push(ch);
                it.next();
            }
            out.push((i, Tok::Word(w)));
        } else if matches!(c, '=' | '~' | '(' | ')' | ',' | ':') {
            it.next();
            out.push((i, Tok::Sym(c)));
        } else {
            return Err(ParseError { offset: i, expected: vec!["word, string or one of = ~ ( ) , :".into()], found: format!("'{c}'") });
        }
    }
    out.push((text.len(), Tok::End));
    Ok(out)
}

/// Role names used in unit searches, mapped to rule tags.
pub fn role_tag(role: &str) -> String {
    match super::fuzzy::normalize_tag(role).as_str() {
        "visualization" | "visualisation" | "plot" | "plots" => "plotting".into(),
        "loading" | "load" | "ingestion" => "data loading".into(),
        "training" | "train" => "model training".into(),
        "tuning" | "hyperparameters" => "hyperparameter tuning".into(),
        "cleaning" => "data cleaning".into(),
        "augmentation" => "data augmentation".into(),
        "saving" | "save" => "export".into(),
        other => other.to_owned(),
    }
}

struct Parser {
    toks: Vec<(usize, Tok)>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> &Tok {
        &self.toks[self.pos].1
    }

    fn offset(&self) -> usize {
        self.toks[self.pos].0
    }

    fn fail<T>(&self, expected: &[&str]) -> Result<T, ParseError> {
        Err(ParseError {
            offset: self.offset(),
            expected: expected.iter().map(|s| (*s).to_owned()).collect(),
            found: self.peek().to_string(),
        })
    }

    fn at_keyword(&self, kw: &str) -> bool {
        matches!(self.peek(), Tok::Word(w) if w.eq_ignore_ascii_case(kw))
    }

    fn keyword(&mut self, kw: &str) -> Result<(), ParseError> {
        if self.at_keyword(kw) {
            self.pos += 1;
            Ok(())
        } else {
            self.fail(&[kw])
        }
    }

    fn sym(&mut self, c: char) -> Result<(), ParseError> {
        if *self.peek() == Tok::Sym(c) {
            self.pos += 1;
            Ok(())
        } else {
            self.fail(&[&format!("'{c}'")])
        }
    }

    fn at_sym(&self, c: char) -> bool {
        *self.peek() == Tok::Sym(c)
    }

    /// A bare word or a quoted string.
    fn name(&mut self, what: &str) -> Result<String, ParseError> {
        match self.peek().clone() {
            Tok::Word(w) | Tok::Str(w) => {
                self.pos += 1;
                Ok(w)
            }
            _ => self.fail(&[what]),
        }
    }

    fn string(&mut self) -> Result<String, ParseError> {
        match self.peek().clone() {
            Tok::Str(s) => {
                self.pos += 1;
                Ok(s)
            }
            _ => self.fail(&["quoted string"]),
        }
    }

    fn int(&mut self) -> Result<u64, ParseError> {
        match self.peek().clone() {
            Tok::Word(w) if w.chars().all(|c| c.is_ascii_digit()) => match w.parse() {
                Ok(n) => {
                    self.pos += 1;
                    Ok(n)
                }
                Err(_) => self.fail(&["integer"]),
            },
            _ => self.fail(&["integer"]),
        }
    }

    fn query(&mut self) -> Result<Query, ParseError> {
        let q = if self.at_keyword("FIND") {
            self.pos += 1;
            self.keyword("PROCEDURES")?;
            self.keyword("WHERE")?;
            Query::Find { filter: self.pred(PROCEDURE_FIELDS)? }
        } else if self.at_keyword("GET") {
            self.pos += 1;
            self.units(None)?
        } else if self.at_keyword("VIEW") {
            self.pos += 1;
            let target = self.name("procedure reference")?;
            let version = if self.at_sym(':') {
                self.pos += 1;
                Some(self.name("version")?)
            } else {
                None
            };
            self.keyword("THROUGH")?;
            let mut chain = vec![self.lens_ref()?];
            while self.at_keyword("THEN") {
                self.pos += 1;
                chain.push(self.lens_ref()?);
            }
            Query::View { target, version, chain }
        } else if self.at_keyword("DIFF") {
            self.pos += 1;
            let target = self.name("procedure reference")?;
            self.sym(':')?;
            let from_version = self.name("version")?;
            self.keyword("AGAINST")?;
            let first = self.name("version or procedure reference")?;
            let (other, to_version) = if self.at_sym(':') {
                self.pos += 1;
                (Some(first), self.name("version")?)
            } else {
                (None, first)
            };
            Query::Diff { target, from_version, other, to_version }
        } else if self.at_keyword("FROM") {
            self.pos += 1;
            let target = self.name("procedure reference")?;
            self.keyword("GET")?;
            if self.at_keyword("STEPS") {
                self.pos += 1;
                let from = self.int()?;
                self.keyword("TO")?;
                let to = self.int()?;
                Query::Steps { target, from, to }
            } else {
                self.units(Some(target))?
            }
        } else {
            return self.fail(&["FIND", "GET", "VIEW", "DIFF", "FROM"]);
        };
        if *self.peek() != Tok::End {
            return self.fail(&["end of query"]);
        }
        Ok(q)
    }

    fn units(&mut self, target: Option<String>) -> Result<Query, ParseError> {
        if self.at_keyword("ALL") {
            self.pos += 1;
        }
        self.keyword("UNITS")?;
        let filter = if self.at_keyword("WHERE") {
            self.pos += 1;
            Some(self.pred(UNIT_FIELDS)?)
        } else if target.is_none() {
            return self.fail(&["WHERE"]);
        } else {
            None
        };
        Ok(Query::Units { target, filter })
    }

    fn lens_ref(&mut self) -> Result<LensRef, ParseError> {
        self.keyword("lens")?;
        self.sym(':')?;
        let name = self.name("lens name")?;
        let mut params = Map::new();
        if self.at_sym('(') {
            self.pos += 1;
            if !self.at_sym(')') {
                loop {
                    let key = self.name("parameter name")?;
                    self.sym('=')?;
                    let value = match self.peek().clone() {
                        Tok::Str(s) => Value::String(s),
                        Tok::Word(w) => bare_value(&w),
                        _ => return self.fail(&["parameter value"]),
                    };
                    self.pos += 1;
                    params.insert(key, value);
                    if self.at_sym(',') {
                        self.pos += 1;
                    } else {
                        break;
                    }
                }
            }
            self.sym(')')?;
        }
        Ok(LensRef { name, params })
    }

    fn pred(&mut self, fields: &[&str]) -> Result<Pred, ParseError> {
        let mut left = self.conj(fields)?;
        while self.at_keyword("OR") {
            self.pos += 1;
            let right = self.conj(fields)?;
            left = Pred::Or(Box::new(left), Box::new(right));
        }
        Ok(left)
    }

    fn conj(&mut self, fields: &[&str]) -> Result<Pred, ParseError> {
        let mut left = self.atom(fields)?;
        while self.at_keyword("AND") {
            self.pos += 1;
            let right = self.atom(fields)?;
            left = Pred::And(Box::new(left), Box::new(right));
        }
        Ok(left)
    }

    fn atom(&mut self, fields: &[&str]) -> Result<Pred, ParseError> {
        if self.at_sym('(') {
            self.pos += 1;
            let p = self.pred(fields)?;
            self.sym(')')?;
            return Ok(p);
        }
        let raw = match self.peek().clone() {
            Tok::Word(w) => w.to_lowercase(),
            _ => return self.fail(&["field name", "'('"]),
        };
        let field = match raw.as_str() {
            "tag" | "role" => "tags".to_owned(),
            "procedureid" | "unitid" => "id".to_owned(),
            "path" | "file_path" => "file".to_owned(),
            "semantictag" => "tags".to_owned(),
            f => f.to_owned(),
        };
        if !fields.contains(&field.as_str()) {
            return self.fail(fields);
        }
        self.pos += 1;
        let op = if self.at_keyword("CONTAINS") {
            self.pos += 1;
            CmpOp::Contains
        } else if self.at_sym('=') {
            self.pos += 1;
            CmpOp::Eq
        } else if self.at_sym('~') {
            self.pos += 1;
            CmpOp::Fuzzy
        } else {
            return self.fail(&["CONTAINS", "'='", "'~'"]);
        };
        let mut value = self.string()?;
        let mut op = op;
        if field == "tags" && op != CmpOp::Fuzzy {
            op = CmpOp::Contains;
            if raw == "role" {
                value = role_tag(&value);
            }
        }
        Ok(Pred::Cmp { field, op, value })
    }
}

fn bare_value(w: &str) -> Value {
    match w {
        "true" => Value::Bool(true),
        "false" => Value::Bool(false),
        _ => {
            if let Ok(n) = w.parse::<i64>() {
                Value::Number(n.into())
            } else if let Some(n) = w.parse::<f64>().ok().filter(|f| f.is_finite()).and_then(Number::from_f64) {
                Value::Number(n)
            } else {
                Value::String(w.to_owned())
            }
        }
    }
}

pub fn parse_query(text: &str) -> Result<Query, ParseError> {
    let toks = lex(text)?;
    Parser { toks, pos: 0 }.query()
}

const KEYWORDS: &[&str] = &[
    "find", "procedures", "where", "and", "or", "contains", "view", "through", "then", "diff", "against", "from", "get",
    "steps", "to", "all", "units", "lens",
];

fn quote(s: &str) -> String {
    format!("\"{}\"", s.replace('\\', "\\\\").replace('"', "\\\"").replace('\n', "\\n"))
}

/// A reference printed bare when it lexes back as the same single word.
fn reference(s: &str) -> String {
    if !s.is_empty() && s.chars().all(is_word_char) && !KEYWORDS.contains(&s.to_lowercase().as_str()) {
        s.to_owned()
    } else {
        quote(s)
    }
}

fn param_value(v: &Value) -> String {
    match v {
        Value::String(s) => quote(s),
        other => other.to_string(),
    }
}

impl fmt::Display for Pred {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fn wrap(p: &Pred, parens: bool) -> String {
            if parens {
                format!("({p})")
            } else {
                p.to_string()
            }
        }
        match self {
            Pred::Cmp { field, op, value } => {
                let op = match op {
                    CmpOp::Contains => "CONTAINS",
                    CmpOp::Eq => "=",
                    CmpOp::Fuzzy => "~",
                };
                write!(f, "{field} {op} {}", quote(value))
            }
            Pred::Or(a, b) => write!(f, "{} OR {}", wrap(a, false), wrap(b, matches!(**b, Pred::Or(..)))),
            Pred::And(a, b) => write!(
                f,
                "{} AND {}",
                wrap(a, matches!(**a, Pred::Or(..))),
                wrap(b, !matches!(**b, Pred::Cmp { .. }))
            ),
        }
    }
}

impl fmt::Display for Query {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Query::Find { filter } => write!(f, "FIND PROCEDURES WHERE {filter}"),
            Query::Units { target, filter } => {
                if let Some(t) = target {
                    write!(f, "FROM {} ", reference(t))?;
                }
                f.write_str("GET ALL UNITS")?;
                match filter {
                    Some(p) => write!(f, " WHERE {p}"),
                    None => Ok(()),
                }
            }
            Query::View { target, version, chain } => {
                write!(f, "VIEW {}", reference(target))?;
                if let Some(v) = version {
                    write!(f, ":{}", reference(v))?;
                }
                f.write_str(" THROUGH ")?;
                for (i, l) in chain.iter().enumerate() {
                    if i > 0 {
                        f.write_str(" THEN ")?;
                    }
                    write!(f, "lens:{}", reference(&l.name))?;
                    if !l.params.is_empty() {
                        let ps: Vec<String> = l.params.iter().map(|(k, v)| format!("{}={}", reference(k), param_value(v))).collect();
                        write!(f, "({})", ps.join(", "))?;
                    }
                }
                Ok(())
            }
            Query::Diff { target, from_version, other, to_version } => {
                write!(f, "DIFF {}:{} AGAINST ", reference(target), reference(from_version))?;
                if let Some(o) = other {
                    write!(f, "{}:", reference(o))?;
                }
                f.write_str(&reference(to_version))
            }
            Query::Steps { target, from, to } => write!(f, "FROM {} GET STEPS {from} TO {to}", reference(target)),
        }
    }
}
