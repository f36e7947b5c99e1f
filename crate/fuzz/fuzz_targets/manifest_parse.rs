#![no_main]

//! Manifest text plus weight bytes. The first two bytes give the manifest
//! length; the rest of the input after it is the weight blob.

use libfuzzer_sys::fuzz_target;
use rebirth_core::graph::{parse_model, write_model};

fuzz_target!(|data: &[u8]| {
    if data.len() < 2 {
        return;
    }
    let split = (u16::from_le_bytes([data[0], data[1]]) as usize).min(data.len() - 2);
    let (manifest, weights) = data[2..].split_at(split);
    let Ok(text) = std::str::from_utf8(manifest) else {
        return;
    };
    if let Ok(g) = parse_model(text, weights) {
        // anything accepted must re-encode to something that decodes the same
        let (t2, w2) = write_model(&g).expect("accepted graphs encode");
        assert_eq!(parse_model(&t2, &w2).expect("re-encoded graphs decode"), g);
    }
});
