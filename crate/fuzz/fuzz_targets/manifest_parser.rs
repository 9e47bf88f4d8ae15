#![no_main]

use libfuzzer_sys::fuzz_target;
use std::path::Path;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(m) = sscn::data::CategoryManifest::parse(text, Path::new("fuzz")) {
            // a manifest that parses must also re-render and re-parse
            let again = sscn::data::CategoryManifest::parse(&m.render(), Path::new("fuzz"))
                .expect("rendered manifest must parse");
            assert_eq!(again.sample_category, m.sample_category);
        }
    }
});
