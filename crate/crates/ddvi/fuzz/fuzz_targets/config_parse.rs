#![no_main]

use libfuzzer_sys::fuzz_target;

use ddvi::pipeline::config::TrainConfig;

// Config text of any shape parses to Ok or a descriptive Err, never panics.
// Parsed configs additionally round-trip through the canonical text form.
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = TrainConfig::from_text(text) {
        let back = TrainConfig::from_text(&cfg.to_text()).expect("canonical text reparses");
        assert_eq!(cfg, back);
    }
});
