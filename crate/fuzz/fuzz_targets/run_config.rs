#![no_main]

use libfuzzer_sys::fuzz_target;
use stein_core::config::parse_run_config;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = parse_run_config(text) {
        // accepted configs must be internally consistent
        cfg.validate().expect("parsed config failed validation");
        let checkpoints = cfg.checkpoint_list();
        assert!(checkpoints.windows(2).all(|w| w[0] < w[1]));
    }
});
