//! Group min/max quantization for cached values.
//!
//! The feature axis is cut into contiguous groups. Each group stores
//! scale = (max - min) / (2^bits - 1) and zero = min; an element encodes as
//! round((v - zero) / scale) and decodes as code * scale + zero, so the
//! reconstruction error is at most scale/2 per element. A constant group
//! (max == min) stores scale 0 with all codes 0.
//!
//! Decoding is done in f64; the final f32 rounding of `dequantize` adds at
//! most half an ulp on top of the scale/2 bound.

use crate::error::{Result, SalsError};

/// One quantized value row. Codes are kept one per byte; the configured bit
/// width governs traffic accounting, not the in-memory layout.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedVector {
    codes: Vec<u8>,
    scales: Vec<f32>,
    zeros: Vec<f32>,
    bits: u32,
    group: usize,
}

/// Quantizes `v` into groups of `group` elements at `bits` in {2, 4}.
pub fn quantize_value(v: &[f32], bits: u32, group: usize) -> Result<QuantizedVector> {
    if bits != 2 && bits != 4 {
        return Err(SalsError::InvalidConfig {
            field: "value_bits",
            reason: format!("quantizer supports 2 or 4 bits, got {bits}"),
        });
    }
    if group == 0 || !v.len().is_multiple_of(group) {
        return Err(SalsError::InvalidConfig {
            field: "quant_group",
            reason: format!("group {group} must divide length {}", v.len()),
        });
    }
    if let Some(index) = v.iter().position(|x| !x.is_finite()) {
        return Err(SalsError::NonFinite { index });
    }
    let levels = (1u32 << bits) - 1;
    let num_groups = v.len() / group;
    let mut codes = vec![0u8; v.len()];
    let mut scales = Vec::with_capacity(num_groups);
    let mut zeros = Vec::with_capacity(num_groups);
    for g in 0..num_groups {
        let chunk = &v[g * group..(g + 1) * group];
        let mut min = chunk[0];
        let mut max = chunk[0];
        for &x in chunk {
            min = min.min(x);
            max = max.max(x);
        }
        let scale = ((max as f64 - min as f64) / levels as f64) as f32;
        scales.push(scale);
        zeros.push(min);
        if scale > 0.0 {
            for (off, &x) in chunk.iter().enumerate() {
                let code = ((x as f64 - min as f64) / scale as f64).round();
                codes[g * group + off] = (code.max(0.0).min(levels as f64)) as u8;
            }
        }
    }
    Ok(QuantizedVector {
        codes,
        scales,
        zeros,
        bits,
        group,
    })
}

impl QuantizedVector {
    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn bits(&self) -> u32 {
        self.bits
    }

    pub fn group(&self) -> usize {
        self.group
    }

    pub fn codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn scales(&self) -> &[f32] {
        &self.scales
    }

    pub fn zeros(&self) -> &[f32] {
        &self.zeros
    }

    /// Decoded element in f64 (code * scale + zero exactly).
    pub fn dequant_f64(&self, i: usize) -> f64 {
        let g = i / self.group;
        self.codes[i] as f64 * self.scales[g] as f64 + self.zeros[g] as f64
    }

    pub fn dequantize(&self) -> Vec<f32> {
        (0..self.len()).map(|i| self.dequant_f64(i) as f32).collect()
    }

    pub fn dequantize_into(&self, out: &mut [f32]) {
        for (i, slot) in out.iter_mut().enumerate() {
            *slot = self.dequant_f64(i) as f32;
        }
    }
}
