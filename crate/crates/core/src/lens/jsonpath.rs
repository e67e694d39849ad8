//! A small JSONPath subset: `$`, `.key`, `.*`, `['key']`, `[n]`, `[*]`.

use std::fmt;

use serde_json::{Map, Value};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Step {
    Key(String),
    Index(usize),
    Wildcard,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JsonPath {
    pub steps: Vec<Step>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("bad path {path:?} at offset {offset}: {message}")]
pub struct PathError {
    pub path: String,
    pub offset: usize,
    pub message: String,
}

fn is_key_char(c: char) -> bool {
    c.is_alphanumeric() || c == '_' || c == '-'
}

impl JsonPath {
    pub fn parse(text: &str) -> Result<JsonPath, PathError> {
        let err = |offset: usize, message: &str| PathError { path: text.to_owned(), offset, message: message.to_owned() };
        let chars: Vec<(usize, char)> = text.char_indices().collect();
        if chars.first().map(|c| c.1) != Some('$') {
            return Err(err(0, "must start with $"));
        }
        let mut steps = Vec::new();
        let mut i = 1;
        while i < chars.len() {
            let (off, c) = chars[i];
            match c {
                '.' => {
                    i += 1;
                    match chars.get(i) {
                        Some((_, '*')) => {
                            steps.push(Step::Wildcard);
                            i += 1;
                        }
                        Some((_, c)) if is_key_char(*c) => {
                            let start = i;
                            while i < chars.len() && is_key_char(chars[i].1) {
                                i += 1;
                            }
                            steps.push(Step::Key(chars[start..i].iter().map(|c| c.1).collect()));
                        }
                        _ => return Err(err(off, "expected key or * after .")),
                    }
                }
                '[' => {
                    i += 1;
                    match chars.get(i).map(|c| c.1) {
                        Some('*') => {
                            i += 1;
                            steps.push(Step::Wildcard);
                        }
                        Some(q @ ('\'' | '"')) => {
                            i += 1;
                            let mut key = String::new();
                            loop {
                                match chars.get(i).map(|c| c.1) {
                                    None => return Err(err(off, "unterminated quoted key")),
                                    Some('\\') => {
                                        let esc = chars.get(i + 1).map(|c| c.1).ok_or_else(|| err(off, "dangling escape"))?;
                                        key.push(esc);
                                        i += 2;
                                    }
                                    Some(c) if c == q => {
                                        i += 1;
                                        break;
                                    }
                                    Some(c) => {
                                        key.push(c);
                                        i += 1;
                                    }
                                }
                            }
                            steps.push(Step::Key(key));
                        }
                        Some(d) if d.is_ascii_digit() => {
                            let start = i;
                            while i < chars.len() && chars[i].1.is_ascii_digit() {
                                i += 1;
                            }
                            let digits: String = chars[start..i].iter().map(|c| c.1).collect();
                            steps.push(Step::Index(digits.parse().map_err(|_| err(off, "index too large"))?));
                        }
                        _ => return Err(err(off, "expected index, * or quoted key")),
                    }
                    if chars.get(i).map(|c| c.1) != Some(']') {
                        return Err(err(off, "expected ]"));
                    }
                    i += 1;
                }
                _ => return Err(err(off, "unexpected character")),
            }
        }
        Ok(JsonPath { steps })
    }

    /// All matches as (key of the matched node, value). The root matches
    /// with key `$`.
    pub fn select<'a>(&self, root: &'a Value) -> Vec<(String, &'a Value)> {
        let mut current: Vec<(String, &Value)> = vec![("$".to_owned(), root)];
        for step in &self.steps {
            let mut next = Vec::new();
            for (_, v) in current {
                match (step, v) {
                    (Step::Key(k), Value::Object(m)) => {
                        if let Some(x) = m.get(k) {
                            next.push((k.clone(), x));
                        }
                    }
                    (Step::Index(n), Value::Array(a)) => {
                        if let Some(x) = a.get(*n) {
                            next.push((n.to_string(), x));
                        }
                    }
                    (Step::Wildcard, Value::Object(m)) => next.extend(m.iter().map(|(k, x)| (k.clone(), x))),
                    (Step::Wildcard, Value::Array(a)) => {
                        next.extend(a.iter().enumerate().map(|(i, x)| (i.to_string(), x)))
                    }
                    _ => {}
                }
            }
            current = next;
        }
        current
    }

    /// Deep-merge `value` into `root` at this path, creating objects along
    /// the way. Only key steps are allowed.
    pub fn merge_into(&self, root: &mut Value, value: Value) -> Result<(), PathError> {
        let mut node = root;
        for step in &self.steps {
            let Step::Key(k) = step else {
                return Err(PathError { path: self.to_string(), offset: 0, message: "merge path must use keys only".into() });
            };
            if !node.is_object() {
                *node = Value::Object(Map::new());
            }
            node = node.as_object_mut().expect("just made an object").entry(k.clone()).or_insert(Value::Null);
        }
        deep_merge(node, value);
        Ok(())
    }
}

/// Objects merge key by key; anything else is replaced.
pub fn deep_merge(dst: &mut Value, src: Value) {
    match (dst, src) {
        (Value::Object(d), Value::Object(s)) => {
            for (k, v) in s {
                deep_merge(d.entry(k).or_insert(Value::Null), v);
            }
        }
        (d, s) => *d = s,
    }
}

impl fmt::Display for JsonPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("$")?;
        for s in &self.steps {
            match s {
                Step::Key(k) if !k.is_empty() && k.chars().all(is_key_char) => write!(f, ".{k}")?,
                Step::Key(k) => write!(f, "['{}']", k.replace('\\', "\\\\").replace('\'', "\\'"))?,
                Step::Index(n) => write!(f, "[{n}]")?,
                Step::Wildcard => f.write_str(".*")?,
            }
        }
        Ok(())
    }
}
