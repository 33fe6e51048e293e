#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(lp) = otfp::io::parse_problem(text) {
            // Anything that parses must be usable by the dual evaluator.
            let lambda = vec![0.0; lp.problem.m()];
            let _ = otfp::dual::dual_value_fpr(&lp.problem, &lambda, lp.epsilon.unwrap_or(1.0));
        }
    }
});
