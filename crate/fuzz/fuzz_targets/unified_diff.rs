#![no_main]

use libfuzzer_sys::fuzz_target;
use pkl_core::patch::UnifiedDiff;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(diff) = UnifiedDiff::parse(text) {
        let printed = diff.to_string();
        let again = UnifiedDiff::parse(&printed).expect("printed diff reparses");
        assert_eq!(again.to_string(), printed);
    }
});
