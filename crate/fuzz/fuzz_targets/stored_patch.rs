#![no_main]

use libfuzzer_sys::fuzz_target;
use pkl_core::patch::{apply_patch, Patch};
use pkl_core::FileSet;

// Input: diff text, a NUL byte, then the meta JSON.
fuzz_target!(|data: &[u8]| {
    let (diff, meta) = match data.iter().position(|&b| b == 0) {
        Some(i) => (&data[..i], Some(&data[i + 1..])),
        None => (data, None),
    };
    let Ok(text) = std::str::from_utf8(diff) else { return };
    if let Ok(patch) = Patch::from_stored(text, meta, Default::default()) {
        let _ = apply_patch(&patch, &FileSet::new());
    }
});
