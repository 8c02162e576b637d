#![no_main]

use libfuzzer_sys::fuzz_target;

use ddvi::pipeline::checkpoint::{decode, encode};

// Checkpoint bytes from any source decode to Ok or Err without panicking,
// and anything that decodes re-encodes to bytes that decode to the same
// checkpoint.
fuzz_target!(|data: &[u8]| {
    if let Ok(cp) = decode(data) {
        let bytes = encode(&cp);
        let again = decode(&bytes).expect("re-encoded checkpoint decodes");
        assert_eq!(cp.config_echo, again.config_echo);
    }
});
