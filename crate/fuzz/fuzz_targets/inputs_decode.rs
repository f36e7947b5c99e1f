#![no_main]

use libfuzzer_sys::fuzz_target;
use rebirth_cli::inputs::{decode_inputs, encode_inputs};
use rebirth_core::Chw;

fuzz_target!(|data: &[u8]| {
    if data.is_empty() {
        return;
    }
    let shape = Chw::new(1 + (data[0] % 3) as usize, 2, 2);
    if let Ok(t) = decode_inputs(&data[1..], shape) {
        assert_eq!(encode_inputs(&t), &data[1..]);
    }
});
