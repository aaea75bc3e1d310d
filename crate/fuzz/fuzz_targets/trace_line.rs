#![no_main]

use libfuzzer_sys::fuzz_target;
use maskserve_core::workload::{parse_trace_line, write_trace};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    let Ok(rec) = parse_trace_line(text, 1) else {
        return;
    };
    // Anything accepted must survive a write and re-read unchanged.
    let mut out = Vec::new();
    write_trace(std::slice::from_ref(&rec), &mut out).expect("write accepted record");
    let line = std::str::from_utf8(&out).expect("utf-8 output");
    let again = parse_trace_line(line.trim_end(), 1).expect("re-read written record");
    assert_eq!(rec, again);
});
