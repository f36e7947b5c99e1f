#![no_main]

use libfuzzer_sys::fuzz_target;
use rebirth_core::slim::{format_plan, parse_plan};

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(plan) = parse_plan(text) {
        let again = parse_plan(&format_plan(&plan)).expect("formatted plans parse");
        assert_eq!(again.records, plan.records);
    }
});
