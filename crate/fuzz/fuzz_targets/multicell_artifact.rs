#![no_main]

use frk_core::io::parse_multicell_artifact;
use frk_core::multicell::predict_cid_and_power;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(cells) = parse_multicell_artifact(text) {
        for c in &cells {
            let _ = predict_cid_and_power(&c.antenna.site, &cells);
        }
    }
});
