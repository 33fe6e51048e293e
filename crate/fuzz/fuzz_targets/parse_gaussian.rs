#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok((target, eps)) = otfp::io::parse_gaussian(text) {
            let _ = otfp::gaussian::optimal_kernel(&target, eps);
        }
    }
});
