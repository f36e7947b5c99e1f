#![no_main]

//! Weight blobs against a fixed, valid manifest.

use std::sync::OnceLock;

use libfuzzer_sys::fuzz_target;
use rebirth_core::graph::{parse_model, write_model};

fn manifest() -> &'static str {
    static TEXT: OnceLock<String> = OnceLock::new();
    TEXT.get_or_init(|| write_model(&rebirth_core::fixtures::conv_bn_scale(0, 2, 3, 3, true, 1e-5)).unwrap().0)
}

fuzz_target!(|data: &[u8]| {
    if let Ok(g) = parse_model(manifest(), data) {
        let (_, blob) = write_model(&g).expect("accepted graphs encode");
        assert_eq!(blob, data);
    }
});
