//! Latent key/value cache with a full-precision recent window.
//!
//! Per token the cache stores the r-dim latent key (pre-rotation key
//! projected through U), the value row at the configured width, and the
//! original position. The last `recent_window` tokens additionally live in
//! a ring buffer holding the raw key and value rows, so recent tokens are
//! served bit-exactly and never pay reconstruction or quantization error.
//!
//! Stored-element accounting (in f32-element equivalents) is
//! `s*r + s*nd*bits/32 + buffer_len*2*nd`; group scale/zero metadata is
//! deliberately excluded to match the closed-form traffic model.

use std::collections::VecDeque;

use crate::calibration::ProjectionMatrix;
use crate::config::AttentionConfig;
use crate::error::{Result, SalsError};
use crate::quant::{quantize_value, QuantizedVector};
use crate::tensor::DenseMatrix;
use crate::traffic::TrafficCounter;

/// Value row at the configured width: 2- and 4-bit rows quantize, 16- and
/// 32-bit rows keep f32 content (the width only affects traffic accounting).
#[derive(Debug, Clone)]
enum StoredValue {
    Quantized(QuantizedVector),
    Full(Vec<f32>),
}

#[derive(Debug, Clone)]
struct RecentEntry {
    key: Vec<f32>,
    value: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct LatentKvCache {
    nd: usize,
    rank: usize,
    value_bits: u32,
    quant_group: usize,
    window: usize,
    latent: Vec<f32>,
    values: Vec<StoredValue>,
    positions: Vec<usize>,
    recent: VecDeque<RecentEntry>,
}

/// Snapshot of the cache contents as dense tensors, for debugging dumps.
/// `value_codes` carries codes as f32 for quantized widths and the raw
/// values otherwise; `value_scales`/`value_zeros` are empty at full widths.
#[derive(Debug, Clone)]
pub struct CacheSnapshot {
    pub latent_keys: DenseMatrix,
    pub value_codes: DenseMatrix,
    pub value_scales: DenseMatrix,
    pub value_zeros: DenseMatrix,
    pub positions: DenseMatrix,
}

impl LatentKvCache {
    pub fn new(cfg: &AttentionConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            nd: cfg.nd(),
            rank: cfg.latent_rank,
            value_bits: cfg.value_bits,
            quant_group: cfg.quant_group,
            window: cfg.recent_window,
            latent: Vec::new(),
            values: Vec::new(),
            positions: Vec::new(),
            recent: VecDeque::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn nd(&self) -> usize {
        self.nd
    }

    pub fn positions(&self) -> &[usize] {
        &self.positions
    }

    pub fn latent_row(&self, index: usize) -> &[f32] {
        &self.latent[index * self.rank..(index + 1) * self.rank]
    }

    /// Index of the first token still in the recent buffer.
    pub fn recent_start(&self) -> usize {
        self.len() - self.recent.len()
    }

    fn recent_entry(&self, index: usize) -> Option<&RecentEntry> {
        index
            .checked_sub(self.recent_start())
            .map(|off| &self.recent[off])
    }

    /// Stored f32-element equivalents: latent keys, value rows at their
    /// configured width, and the double-width recent buffer.
    pub fn stored_elements(&self) -> f64 {
        let s = self.len() as f64;
        let nd = self.nd as f64;
        s * self.rank as f64
            + s * nd * self.value_bits as f64 / 32.0
            + self.recent.len() as f64 * 2.0 * nd
    }

    pub fn snapshot(&self) -> CacheSnapshot {
        let s = self.len();
        let groups = self.nd / self.quant_group;
        let quantized = matches!(self.values.first(), Some(StoredValue::Quantized(_)));
        let mut value_codes = DenseMatrix::zeros(s, self.nd);
        let mut value_scales = DenseMatrix::zeros(if quantized { s } else { 0 }, groups);
        let mut value_zeros = DenseMatrix::zeros(if quantized { s } else { 0 }, groups);
        for (t, stored) in self.values.iter().enumerate() {
            match stored {
                StoredValue::Quantized(q) => {
                    for (i, &c) in q.codes().iter().enumerate() {
                        value_codes.set(t, i, c as f32);
                    }
                    for (g, &sc) in q.scales().iter().enumerate() {
                        value_scales.set(t, g, sc);
                    }
                    for (g, &z) in q.zeros().iter().enumerate() {
                        value_zeros.set(t, g, z);
                    }
                }
                StoredValue::Full(v) => {
                    value_codes.row_mut(t).copy_from_slice(v);
                }
            }
        }
        let mut positions = DenseMatrix::zeros(s, 1);
        for (t, &p) in self.positions.iter().enumerate() {
            positions.set(t, 0, p as f32);
        }
        let mut latent_keys = DenseMatrix::zeros(s, self.rank);
        for t in 0..s {
            latent_keys.row_mut(t).copy_from_slice(self.latent_row(t));
        }
        CacheSnapshot {
            latent_keys,
            value_codes,
            value_scales,
            value_zeros,
            positions,
        }
    }
}

/// U^T k with f64 accumulation.
pub fn project_key(key: &[f32], u: &ProjectionMatrix) -> Result<Vec<f32>> {
    if key.len() != u.dim() {
        return Err(SalsError::ShapeMismatch {
            context: "project_key",
            expected: format!("key of length {}", u.dim()),
            got: format!("{}", key.len()),
        });
    }
    let nd = u.dim();
    let r = u.rank();
    let basis = u.basis();
    let mut out = vec![0.0f32; r];
    for (c, slot) in out.iter_mut().enumerate() {
        let mut acc = 0.0f64;
        for i in 0..nd {
            acc += key[i] as f64 * basis[i * r + c];
        }
        *slot = acc as f32;
    }
    Ok(out)
}

/// Projects and appends one token. Positions must be strictly increasing.
pub fn append_token(
    cache: &mut LatentKvCache,
    key: &[f32],
    value: &[f32],
    position: usize,
    u: &ProjectionMatrix,
    cfg: &AttentionConfig,
) -> Result<()> {
    if key.len() != cache.nd || value.len() != cache.nd {
        return Err(SalsError::ShapeMismatch {
            context: "append_token",
            expected: format!("key/value of length {}", cache.nd),
            got: format!("{}/{}", key.len(), value.len()),
        });
    }
    if u.dim() != cache.nd || u.rank() != cache.rank {
        return Err(SalsError::ShapeMismatch {
            context: "append_token",
            expected: format!("projection {}x{}", cache.nd, cache.rank),
            got: format!("{}x{}", u.dim(), u.rank()),
        });
    }
    if let Some(&last) = cache.positions.last() {
        if position <= last {
            return Err(SalsError::NonMonotonePosition {
                got: position,
                last,
            });
        }
    }
    if let Some(index) = key
        .iter()
        .chain(value.iter())
        .position(|v| !v.is_finite())
    {
        return Err(SalsError::NonFinite { index });
    }
    let latent = project_key(key, u)?;
    cache.latent.extend_from_slice(&latent);
    let stored = match cfg.value_bits {
        2 | 4 => StoredValue::Quantized(quantize_value(value, cfg.value_bits, cfg.quant_group)?),
        _ => StoredValue::Full(value.to_vec()),
    };
    cache.values.push(stored);
    cache.positions.push(position);
    if cache.window > 0 {
        if cache.recent.len() == cache.window {
            cache.recent.pop_front();
        }
        cache.recent.push_back(RecentEntry {
            key: key.to_vec(),
            value: value.to_vec(),
        });
    }
    Ok(())
}

/// Pre-rotation keys for `indices`: recent tokens come verbatim from the
/// buffer, older ones are rebuilt as latent * U^T.
pub fn reconstruct_keys(
    cache: &LatentKvCache,
    indices: &[usize],
    u: &ProjectionMatrix,
    traffic: &mut TrafficCounter,
) -> Result<DenseMatrix> {
    let nd = cache.nd;
    let r = cache.rank;
    if u.dim() != nd || u.rank() != r {
        return Err(SalsError::ShapeMismatch {
            context: "reconstruct_keys",
            expected: format!("projection {}x{}", nd, r),
            got: format!("{}x{}", u.dim(), u.rank()),
        });
    }
    let mut out = DenseMatrix::zeros(indices.len(), nd);
    for (row, &index) in indices.iter().enumerate() {
        if index >= cache.len() {
            return Err(SalsError::IndexOutOfRange {
                index,
                len: cache.len(),
            });
        }
        let dst = out.row_mut(row);
        if let Some(entry) = cache.recent_entry(index) {
            dst.copy_from_slice(&entry.key);
            traffic.buffered_key(nd, r);
        } else {
            let latent = cache.latent_row(index);
            for (i, slot) in dst.iter_mut().enumerate() {
                let basis_row = u.basis_row(i);
                let mut acc = 0.0f64;
                for (l, b) in latent.iter().zip(basis_row) {
                    acc += *l as f64 * b;
                }
                *slot = acc as f32;
            }
            traffic.latent_key(r);
        }
    }
    Ok(out)
}

/// Value rows for `indices`: recent tokens verbatim, older ones decoded
/// from their stored width.
pub fn gather_values(
    cache: &LatentKvCache,
    indices: &[usize],
    traffic: &mut TrafficCounter,
) -> Result<DenseMatrix> {
    let nd = cache.nd;
    let mut out = DenseMatrix::zeros(indices.len(), nd);
    for (row, &index) in indices.iter().enumerate() {
        if index >= cache.len() {
            return Err(SalsError::IndexOutOfRange {
                index,
                len: cache.len(),
            });
        }
        let dst = out.row_mut(row);
        if let Some(entry) = cache.recent_entry(index) {
            dst.copy_from_slice(&entry.value);
            traffic.buffered_value(nd, cache.rank);
        } else {
            match &cache.values[index] {
                StoredValue::Quantized(q) => q.dequantize_into(dst),
                StoredValue::Full(v) => dst.copy_from_slice(v),
            }
            traffic.stored_value(nd, cache.value_bits, cache.rank);
        }
    }
    Ok(out)
}
