#![no_main]

use libfuzzer_sys::fuzz_target;

use ddvi::pipeline::data::parse_csv;

// Arbitrary byte streams must come back as Ok(dataset) or Err, never panic.
// The first byte picks the parser mode so header/target/label handling all
// get exercised from one corpus.
fuzz_target!(|data: &[u8]| {
    if data.is_empty() {
        return;
    }
    let mode = data[0];
    let body = &data[1..];
    let has_header = mode & 1 != 0;
    let classification = mode & 2 != 0;
    let n_targets = usize::from(mode >> 2) % 4;
    let _ = parse_csv(body, has_header, n_targets, classification, "fuzz");
});
