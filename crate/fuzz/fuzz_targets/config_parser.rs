#![no_main]

use libfuzzer_sys::fuzz_target;
use std::path::Path;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = sscn::config::RunConfig::parse(text, Path::new("fuzz")) {
            // accepted configs must round-trip through the canonical form
            let back = sscn::config::RunConfig::parse(&cfg.render(), Path::new("fuzz"))
                .expect("rendered config must parse");
            assert_eq!(back, cfg);
        }
    }
});
