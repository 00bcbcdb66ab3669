#![no_main]

use frk_core::io::{parse_run_config, run_config_to_string};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cfg) = parse_run_config(text) {
        if let Ok(out) = run_config_to_string(&cfg) {
            assert_eq!(parse_run_config(&out).unwrap(), cfg);
        }
    }
});
