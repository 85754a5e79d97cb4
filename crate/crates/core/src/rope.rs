//! Rotary position embedding over stacked heads.
//!
//! A [`RotaryTable`] precomputes angles `m * base^(-2i/d)` for positions
//! `m < max_positions` and pair indices `i < d/2`. Application is per head:
//! an n*d vector is treated as n contiguous d-dim blocks, and within each
//! block dimension pairs are rotated by the position's angle.
//!
//! Two pairing conventions exist because tensor dumps differ in layout:
//! `Adjacent` rotates (2i, 2i+1); `HalfSplit` rotates (i, i + d/2). The
//! convention is part of the table so ingested tensors can declare theirs.
//! Rotations are orthogonal either way: norms are preserved exactly up to
//! rounding, and scores depend only on relative position.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SalsError};
use crate::tensor::DenseMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairingConvention {
    #[default]
    Adjacent,
    HalfSplit,
}

/// Precomputed rotation angles for one head dimension.
#[derive(Debug, Clone)]
pub struct RotaryTable {
    max_positions: usize,
    head_dim: usize,
    pairing: PairingConvention,
    /// max_positions x d/2, row-major, strictly increasing in m for the
    /// standard constructor.
    angles: Vec<f64>,
}

impl RotaryTable {
    pub fn new(max_positions: usize, head_dim: usize, base: f64) -> Result<Self> {
        Self::with_pairing(max_positions, head_dim, base, PairingConvention::Adjacent)
    }

    pub fn with_pairing(
        max_positions: usize,
        head_dim: usize,
        base: f64,
        pairing: PairingConvention,
    ) -> Result<Self> {
        if head_dim == 0 || !head_dim.is_multiple_of(2) {
            return Err(SalsError::InvalidConfig {
                field: "head_dim",
                reason: "must be a positive even number".into(),
            });
        }
        if !(base.is_finite() && base > 1.0) {
            return Err(SalsError::InvalidConfig {
                field: "rope_base",
                reason: "must be finite and > 1".into(),
            });
        }
        let half = head_dim / 2;
        let mut angles = Vec::with_capacity(max_positions * half);
        for m in 0..max_positions {
            for i in 0..half {
                let freq = base.powf(-2.0 * i as f64 / head_dim as f64);
                angles.push(m as f64 * freq);
            }
        }
        Ok(Self {
            max_positions,
            head_dim,
            pairing,
            angles,
        })
    }

    /// Table with every angle negated; applying it at the same position
    /// undoes the forward rotation. Skips the monotone-angle invariant of
    /// the standard constructor by design.
    pub fn inverted(&self) -> Self {
        Self {
            max_positions: self.max_positions,
            head_dim: self.head_dim,
            pairing: self.pairing,
            angles: self.angles.iter().map(|a| -a).collect(),
        }
    }

    pub fn max_positions(&self) -> usize {
        self.max_positions
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn pairing(&self) -> PairingConvention {
        self.pairing
    }

    pub fn angle(&self, position: usize, pair: usize) -> f64 {
        self.angles[position * (self.head_dim / 2) + pair]
    }

    fn check_position(&self, position: usize) -> Result<()> {
        if position >= self.max_positions {
            return Err(SalsError::PositionOutOfRange {
                position,
                max_positions: self.max_positions,
            });
        }
        Ok(())
    }

    fn pair_indices(&self, pair: usize) -> (usize, usize) {
        match self.pairing {
            PairingConvention::Adjacent => (2 * pair, 2 * pair + 1),
            PairingConvention::HalfSplit => (pair, pair + self.head_dim / 2),
        }
    }
}

/// Rotates `x` (length n*d) in place at `position`.
pub fn apply_rope_inplace(x: &mut [f32], position: usize, table: &RotaryTable) -> Result<()> {
    table.check_position(position)?;
    let d = table.head_dim();
    if x.is_empty() || !x.len().is_multiple_of(d) {
        return Err(SalsError::ShapeMismatch {
            context: "apply_rope",
            expected: format!("length divisible by head_dim {d}"),
            got: format!("{}", x.len()),
        });
    }
    let half = d / 2;
    let heads = x.len() / d;
    for h in 0..heads {
        let block = &mut x[h * d..(h + 1) * d];
        for i in 0..half {
            let angle = table.angle(position, i);
            let (c, s) = (angle.cos(), angle.sin());
            let (a, b) = table.pair_indices(i);
            let x0 = block[a] as f64;
            let x1 = block[b] as f64;
            block[a] = (x0 * c - x1 * s) as f32;
            block[b] = (x0 * s + x1 * c) as f32;
        }
    }
    Ok(())
}

/// Rotated copy of `x` at `position`.
pub fn apply_rope(x: &[f32], position: usize, table: &RotaryTable) -> Result<Vec<f32>> {
    let mut out = x.to_vec();
    apply_rope_inplace(&mut out, position, table)?;
    Ok(out)
}

/// Rotates each row of `x` at its own position.
pub fn apply_rope_batch(
    x: &DenseMatrix,
    positions: &[usize],
    table: &RotaryTable,
) -> Result<DenseMatrix> {
    if positions.len() != x.rows() {
        return Err(SalsError::ShapeMismatch {
            context: "apply_rope_batch",
            expected: format!("{} positions", x.rows()),
            got: format!("{}", positions.len()),
        });
    }
    let mut out = x.clone();
    for (i, &m) in positions.iter().enumerate() {
        apply_rope_inplace(out.row_mut(i), m, table)?;
    }
    Ok(out)
}
