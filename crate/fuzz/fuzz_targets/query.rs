#![no_main]

use libfuzzer_sys::fuzz_target;
use pkl_core::query::parse_query;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(q) = parse_query(text) {
        let printed = q.to_string();
        assert_eq!(parse_query(&printed).expect("printed query reparses"), q);
    }
});
