//! 8-bit quantization of optimized patches.
//!
//! Optimization runs in continuous floats; deployment is an 8-bit PNG.
//! Rounding may push the reloaded patch up to 1/255 past the optimization
//! budget, so downstream checks allow epsilon + 1/255.

use crate::scene::io::{dequantize, quantize_u8};

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedPatch {
    /// 8-bit channel values, row-major.
    pub bytes: Vec<u8>,
    /// The dequantized floats actually evaluated and deployed.
    pub reloaded: Vec<f32>,
}

/// Rounds each channel to the nearest 8-bit value and reloads it; all final
/// evaluations run on the reloaded values, never the raw float tensor.
pub fn quantize_patch(x: &[f32]) -> QuantizedPatch {
    let bytes: Vec<u8> = x.iter().map(|&v| quantize_u8(v)).collect();
    let reloaded = bytes.iter().map(|&b| dequantize(b)).collect();
    QuantizedPatch { bytes, reloaded }
}
