use std::collections::BTreeSet;

use rusqlite::functions::FunctionFlags;
use rusqlite::Connection;

/// Word trigrams, each word padded with two leading blanks and one
/// trailing blank, case-folded.
pub fn trigrams(text: &str) -> BTreeSet<[char; 3]> {
    let mut out = BTreeSet::new();
    for word in text.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()) {
        let padded: Vec<char> = "  ".chars().chain(word.chars().flat_map(char::to_lowercase)).chain([' ']).collect();
        for w in padded.windows(3) {
            out.insert([w[0], w[1], w[2]]);
        }
    }
    out
}

/// Fraction of the query's trigrams that occur in `text`. A query with no
/// trigrams matches nothing.
pub fn trigram_similarity(query: &str, text: &str) -> f64 {
    let q = trigrams(query);
    if q.is_empty() {
        return 0.0;
    }
    let t = trigrams(text);
    q.intersection(&t).count() as f64 / q.len() as f64
}

/// Tags compare case-insensitively, with `-` and `_` read as spaces.
pub fn normalize_tag(tag: &str) -> String {
    tag.trim().to_lowercase().replace(['-', '_'], " ")
}

pub fn tag_matches(have: &str, want: &str) -> bool {
    normalize_tag(have) == normalize_tag(want)
}

/// SQL functions used by compiled queries: `pkl_trigram(query, text)` and
/// `pkl_tag_match(have, want)`.
pub fn register_functions(conn: &Connection) -> rusqlite::Result<()> {
    let flags = FunctionFlags::SQLITE_UTF8 | FunctionFlags::SQLITE_DETERMINISTIC;
    conn.create_scalar_function("pkl_trigram", 2, flags, |ctx| {
        let q: String = ctx.get(0)?;
        let t: Option<String> = ctx.get(1)?;
        Ok(t.map_or(0.0, |t| trigram_similarity(&q, &t)))
    })?;
    conn.create_scalar_function("pkl_tag_match", 2, flags, |ctx| {
        let have: Option<String> = ctx.get(0)?;
        let want: String = ctx.get(1)?;
        Ok(have.is_some_and(|h| tag_matches(&h, &want)))
    })?;
    Ok(())
}
