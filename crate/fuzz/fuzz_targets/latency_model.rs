#![no_main]

use libfuzzer_sys::fuzz_target;
use maskserve_core::latmodel::LatencyModel;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(model) = LatencyModel::from_json(text) {
        let _ = model.comp_latency(1 << 30);
        let _ = model.load_latency(1 << 20);
    }
});
