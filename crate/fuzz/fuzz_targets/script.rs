#![no_main]

use libfuzzer_sys::fuzz_target;
use pkl_core::ingest::parse_script_str;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = parse_script_str(text, "fuzz.py");
    }
});
