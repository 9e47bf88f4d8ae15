#![no_main]

use libfuzzer_sys::fuzz_target;
use std::path::Path;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        // first byte steers the dimension; the parser must reject, not panic
        let dims = 1 + (data.first().copied().unwrap_or(3) as usize % 4);
        let _ = sscn::data::parse_points(text, Path::new("fuzz"), dims);
    }
});
