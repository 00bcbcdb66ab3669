#![no_main]

use frk_core::io::{parse_measurements, write_measurements};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(obs) = parse_measurements(data) {
        // Accepted input must survive a write/parse round trip unchanged.
        let mut buf = Vec::new();
        write_measurements(&mut buf, &obs).unwrap();
        let again = parse_measurements(buf.as_slice()).unwrap();
        assert_eq!(obs, again);
    }
});
