#![no_main]

use libfuzzer_sys::fuzz_target;
use stein_core::io::{parse_particles_csv, particles_csv_string};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(ens) = parse_particles_csv(text) {
        let again = parse_particles_csv(&particles_csv_string(&ens)).expect("own output must parse");
        assert_eq!(again, ens);
    }
});
