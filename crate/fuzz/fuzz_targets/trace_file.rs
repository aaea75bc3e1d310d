#![no_main]

use libfuzzer_sys::fuzz_target;
use maskserve_core::workload::{read_trace, trace_digest};

fuzz_target!(|data: &[u8]| {
    if let Ok(records) = read_trace(data) {
        let _ = trace_digest(&records);
    }
});
