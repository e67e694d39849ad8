//! Canonical JSON and content digests.
//!
//! Canonical JSON here means: object keys sorted, no insignificant
//! whitespace, UTF-8, and a single trailing LF when written to a file.

use md5::Md5;
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

/// Serialize any value to canonical JSON (no trailing newline).
pub fn to_canonical_string<T: Serialize + ?Sized>(value: &T) -> String {
    // Going through `Value` sorts struct fields too: the map type is a BTreeMap.
    let value = serde_json::to_value(value).expect("serializable value");
    serde_json::to_string(&value).expect("json value always serializes")
}

/// Canonical JSON plus a trailing newline, for files on disk.
pub fn to_canonical_file<T: Serialize + ?Sized>(value: &T) -> Vec<u8> {
    let mut s = to_canonical_string(value);
    s.push('\n');
    s.into_bytes()
}

/// Lowercase hex MD5 of `bytes`.
pub fn md5_hex(bytes: &[u8]) -> String {
    hex::encode(Md5::digest(bytes))
}

/// Lowercase hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// MD5 of the canonical JSON encoding of a parameter map. Used for view ids.
pub fn params_hash(params: &serde_json::Map<String, Value>) -> String {
    md5_hex(to_canonical_string(params).as_bytes())
}

/// Render a JSON value the way Jupyter writes notebooks: one-space indent,
/// sorted keys, `", "`/`": "` separators, raw (unescaped) non-ASCII and a
/// trailing newline.
pub fn to_jupyter_string(value: &Value) -> String {
    let mut out = Vec::new();
    let fmt = serde_json::ser::PrettyFormatter::with_indent(b" ");
    let mut ser = serde_json::Serializer::with_formatter(&mut out, fmt);
    value.serialize(&mut ser).expect("json value always serializes");
    let mut s = String::from_utf8(out).expect("serde_json emits utf-8");
    s.push('\n');
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn canonical_sorts_keys_without_whitespace() {
        let v = json!({"b": 1, "a": {"d": [1, 2], "c": null}});
        assert_eq!(to_canonical_string(&v), r#"{"a":{"c":null,"d":[1,2]},"b":1}"#);
    }

    #[test]
    fn md5_of_empty_params() {
        // md5("{}")
        assert_eq!(params_hash(&Default::default()), "99914b932bd37a50b983c5e7c90ae93b");
    }

    #[test]
    fn jupyter_layout() {
        let v = json!({"cells": [], "metadata": {}, "nbformat": 4, "nbformat_minor": 5});
        assert_eq!(
            to_jupyter_string(&v),
            "{\n \"cells\": [],\n \"metadata\": {},\n \"nbformat\": 4,\n \"nbformat_minor\": 5\n}\n"
        );
    }
}
