#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok((problem, _)) = otfp::io::parse_markov(text) {
            let lambda = vec![0.0; problem.horizon()];
            let path = vec![0; problem.horizon() + 1];
            let _ = otfp::markov::forward_marginals(&problem, &lambda, &path);
        }
    }
});
