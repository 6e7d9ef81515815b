#![no_main]

use libfuzzer_sys::fuzz_target;
use stein_core::config::parse_run_config;
use stein_core::report::parse_run_report;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let _ = parse_run_report(text);
    // reports are also accepted wherever a run config is
    let _ = parse_run_config(text);
});
