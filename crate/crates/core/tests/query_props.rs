use proptest::prelude::*;
use serde_json::{Map, Value};

use pkl_core::query::{parse_query, CmpOp, LensRef, Pred, Query, PROCEDURE_FIELDS, UNIT_FIELDS};

fn word() -> impl Strategy<Value = String> {
    prop_oneof!["[a-z][a-z0-9_-]{0,10}", Just("find".to_owned()), Just("procedure-17".to_owned()), Just("with space".to_owned())]
}

fn value_text() -> impl Strategy<Value = String> {
    prop_oneof!["[ -~]{0,16}", Just("quote \" and \\ back".to_owned()), Just("line\nbreak".to_owned()), Just("données".to_owned())]
}

fn cmp(fields: &'static [&'static str]) -> impl Strategy<Value = Pred> {
    (prop::sample::select(fields), 0u8..3, value_text()).prop_map(|(field, op, value)| {
        let op = match (field, op) {
            ("tags", 0) => CmpOp::Fuzzy,
            ("tags", _) => CmpOp::Contains,
            (_, 0) => CmpOp::Contains,
            (_, 1) => CmpOp::Eq,
            _ => CmpOp::Fuzzy,
        };
        Pred::Cmp { field: field.to_owned(), op, value }
    })
}

fn pred(fields: &'static [&'static str]) -> impl Strategy<Value = Pred> {
    cmp(fields).prop_recursive(4, 16, 2, |inner| {
        prop_oneof![
            (inner.clone(), inner.clone()).prop_map(|(a, b)| Pred::And(Box::new(a), Box::new(b))),
            (inner.clone(), inner).prop_map(|(a, b)| Pred::Or(Box::new(a), Box::new(b))),
        ]
    })
}

fn param() -> impl Strategy<Value = Value> {
    prop_oneof![
        any::<bool>().prop_map(Value::Bool),
        (0i64..100_000).prop_map(|n| Value::Number(n.into())),
        value_text().prop_map(Value::String),
        Just(Value::String("true".into())),
        Just(Value::String("42".into())),
    ]
}

fn lens_ref() -> impl Strategy<Value = LensRef> {
    (word(), prop::collection::btree_map("[a-z_]{1,8}", param(), 0..3))
        .prop_map(|(name, params)| LensRef { name, params: params.into_iter().collect::<Map<_, _>>() })
}

fn version() -> impl Strategy<Value = String> {
    prop_oneof![(1u32..200).prop_map(|n| format!("v{n}")), Just("head".to_owned())]
}

fn query() -> impl Strategy<Value = Query> {
    prop_oneof![
        pred(PROCEDURE_FIELDS).prop_map(|filter| Query::Find { filter }),
        (prop::option::of(word()), prop::option::of(pred(UNIT_FIELDS)))
            .prop_filter("WHERE needed without a target", |(t, f)| t.is_some() || f.is_some())
            .prop_map(|(target, filter)| Query::Units { target, filter }),
        (word(), prop::option::of(version()), prop::collection::vec(lens_ref(), 1..4))
            .prop_map(|(target, version, chain)| Query::View { target, version, chain }),
        (word(), version(), prop::option::of(word()), version())
            .prop_map(|(target, from_version, other, to_version)| Query::Diff { target, from_version, other, to_version }),
        (word(), 0u64..1000, 0u64..1000).prop_map(|(target, from, to)| Query::Steps { target, from, to }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn printed_queries_parse_back(q in query()) {
        let text = q.to_string();
        let back = parse_query(&text).map_err(|e| TestCaseError::fail(format!("{text}: {e}")))?;
        prop_assert_eq!(back, q);
    }

    #[test]
    fn arbitrary_text_never_panics(text in "[ -~\n]{0,80}") {
        let _ = parse_query(&text);
    }

    #[test]
    fn keyword_case_does_not_matter(q in query()) {
        let text = q.to_string();
        let lowered: String = text
            .split(' ')
            .map(|w| if ["FIND", "PROCEDURES", "WHERE", "AND", "OR", "THROUGH", "THEN", "AGAINST", "GET", "STEPS", "TO", "ALL", "UNITS"].contains(&w) { w.to_lowercase() } else { w.to_owned() })
            .collect::<Vec<_>>()
            .join(" ");
        prop_assert_eq!(parse_query(&lowered).ok(), Some(q));
    }
}

#[test]
fn parse_errors_carry_offsets() {
    let err = parse_query("FIND PROCEDURES WHERE colour = \"red\"").unwrap_err();
    assert_eq!(err.offset, 22);
    assert!(err.expected.iter().any(|e| e == "tags"));
    let err = parse_query("GET ALL UNITS").unwrap_err();
    assert_eq!(err.expected, ["WHERE"]);
    assert!(parse_query("FROM p GET STEPS 1 TO").is_err());
}
