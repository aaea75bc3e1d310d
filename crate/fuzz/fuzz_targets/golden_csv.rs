#![no_main]

use libfuzzer_sys::fuzz_target;
use maskserve_core::kernel::golden::read_rows;

fuzz_target!(|data: &[u8]| {
    let _ = read_rows(data);
});
