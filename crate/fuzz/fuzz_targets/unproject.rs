#![no_main]

use libfuzzer_sys::fuzz_target;
use pkl_core::patch::{project, unproject};
use pkl_core::FileSet;

// Input: NUL-separated path/content pairs.
fuzz_target!(|data: &[u8]| {
    let mut parts = data.split(|&b| b == 0);
    let mut files = FileSet::new();
    while let (Some(path), Some(body)) = (parts.next(), parts.next()) {
        let Ok(path) = std::str::from_utf8(path) else { return };
        if path.is_empty() {
            return;
        }
        files.insert(path, body.to_vec());
    }
    if let Ok(plain) = unproject(&files) {
        let _ = project(&plain);
    }
});
