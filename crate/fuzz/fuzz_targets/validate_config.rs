#![no_main]

use libfuzzer_sys::fuzz_target;
use stein_core::config::parse_validate_config;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = parse_validate_config(text) {
        cfg.validate().expect("parsed config failed validation");
    }
});
