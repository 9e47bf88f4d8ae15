#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(ck) = sscn::checkpoint::Checkpoint::from_bytes(data) {
        // anything the decoder accepts must re-encode and decode identically
        let bytes = ck.to_bytes();
        let again = sscn::checkpoint::Checkpoint::from_bytes(&bytes)
            .expect("re-encoded checkpoint must decode");
        assert_eq!(again, ck);
    }
});
