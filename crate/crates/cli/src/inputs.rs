//! Network-input batches on disk: little-endian `f32` values, one sample
//! after another in `C x H x W` order, no header.

use rebirth_core::{Chw, Tensor4};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum InputsError {
    #[error("input file is empty")]
    Empty,
    #[error("input file has {0} bytes, not a whole number of f32 values")]
    Ragged(usize),
    #[error("input file holds {values} values, not a whole number of {per_sample}-value samples")]
    PartialSample { values: usize, per_sample: usize },
    #[error("input value {index} is not finite")]
    NonFinite { index: usize },
}

pub fn decode_inputs(bytes: &[u8], shape: Chw) -> Result<Tensor4, InputsError> {
    if bytes.is_empty() {
        return Err(InputsError::Empty);
    }
    if bytes.len() % 4 != 0 {
        return Err(InputsError::Ragged(bytes.len()));
    }
    let values = bytes.len() / 4;
    let per_sample = shape.numel();
    if per_sample == 0 || values % per_sample != 0 {
        return Err(InputsError::PartialSample { values, per_sample });
    }
    let mut data = Vec::with_capacity(values);
    for (index, chunk) in bytes.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes(chunk.try_into().expect("chunks of four"));
        if !v.is_finite() {
            return Err(InputsError::NonFinite { index });
        }
        data.push(v);
    }
    Ok(Tensor4::new(values / per_sample, shape.c, shape.h, shape.w, data).expect("length checked"))
}

pub fn encode_inputs(t: &Tensor4) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}
