#![no_main]

use libfuzzer_sys::fuzz_target;
use pkl_core::ingest::{parse_notebook_bytes, render_notebook};

fuzz_target!(|data: &[u8]| {
    if let Ok(doc) = parse_notebook_bytes(data, "fuzz.ipynb") {
        let _ = render_notebook(&doc);
    }
});
