#![no_main]

use ere_core::problem::validate_assumptions;
use ere_core::ProblemInstance;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|src: &str| {
    if let Ok(p) = ProblemInstance::from_toml_str(src) {
        // Accepted instances must survive validation and a round trip.
        let _ = validate_assumptions(&p);
        let back = ProblemInstance::from_toml_str(&p.to_toml_string()).expect("round trip");
        assert_eq!(back, p);
    }
});
