#![no_main]

use libfuzzer_sys::fuzz_target;
use maskserve_core::workload::{compare, RunReport};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(report) = RunReport::from_json(text) {
        let _ = compare(&report, &report).render();
    }
});
