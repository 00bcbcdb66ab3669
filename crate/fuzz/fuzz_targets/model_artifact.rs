#![no_main]

use frk_core::io::parse_model_artifact;
use frk_core::prediction::predict_point;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(model) = parse_model_artifact(text) {
        // A model that passed validation must be usable.
        if let Some(c) = model.basis.centers.first() {
            let _ = predict_point(c, &model);
        }
    }
});
