//! Exact and low-rank baseline attention paths.
//!
//! These are the yardsticks the sparse pipeline is measured against:
//! `full_attention` is the uncompressed ground truth, and the two low-rank
//! variants differ only in whether compression happens before or after the
//! rotary rotation. Compressing after rotation damages position structure
//! that compressing before rotation preserves, which is the ordering the
//! integration tests pin down.

use crate::calibration::ProjectionMatrix;
use crate::config::AttentionConfig;
use crate::error::{Result, SalsError};
use crate::rope::{apply_rope, RotaryTable};
use crate::tensor::{dot64, DenseMatrix};
use crate::traffic::TrafficReport;

fn check_shapes(
    context: &'static str,
    queries: &DenseMatrix,
    keys: &DenseMatrix,
    values: &DenseMatrix,
    positions: &[usize],
    cfg: &AttentionConfig,
) -> Result<()> {
    let nd = cfg.nd();
    if queries.cols() != nd || keys.cols() != nd || values.cols() != nd {
        return Err(SalsError::ShapeMismatch {
            context,
            expected: format!("width {nd}"),
            got: format!(
                "queries {}, keys {}, values {}",
                queries.cols(),
                keys.cols(),
                values.cols()
            ),
        });
    }
    if keys.rows() != values.rows() || keys.rows() != positions.len() {
        return Err(SalsError::ShapeMismatch {
            context,
            expected: format!("{} rows and positions", keys.rows()),
            got: format!("{} values, {} positions", values.rows(), positions.len()),
        });
    }
    if queries.rows() > keys.rows() {
        return Err(SalsError::InvalidInput {
            context,
            reason: format!(
                "{} queries exceed {} cached tokens",
                queries.rows(),
                keys.rows()
            ),
        });
    }
    for w in positions.windows(2) {
        if w[1] <= w[0] {
            return Err(SalsError::NonMonotonePosition {
                got: w[1],
                last: w[0],
            });
        }
    }
    Ok(())
}

fn rotate_rows(
    rows: &DenseMatrix,
    positions: &[usize],
    table: Option<&RotaryTable>,
) -> Result<DenseMatrix> {
    debug_assert_eq!(rows.rows(), positions.len());
    let mut out = DenseMatrix::zeros(rows.rows(), rows.cols());
    for (t, &pos) in positions.iter().enumerate() {
        let rotated = match table {
            Some(tab) => apply_rope(rows.row(t), pos, tab)?,
            None => rows.row(t).to_vec(),
        };
        out.row_mut(t).copy_from_slice(&rotated);
    }
    Ok(out)
}

/// Per-head softmax attention of rotated query `t` over rotated key rows
/// `0..limit`, accumulated in f64.
fn attend_row(
    q_rot: &[f32],
    keys_rot: &DenseMatrix,
    values: &DenseMatrix,
    limit: usize,
    cfg: &AttentionConfig,
    out: &mut [f32],
) {
    let scale = 1.0 / (cfg.head_dim as f64).sqrt();
    for h in 0..cfg.num_heads {
        let lo = h * cfg.head_dim;
        let hi = lo + cfg.head_dim;
        let logits: Vec<f64> = (0..limit)
            .map(|j| dot64(&q_rot[lo..hi], &keys_rot.row(j)[lo..hi]) * scale)
            .collect();
        let max = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let norm: f64 = exps.iter().sum();
        let mut acc = vec![0.0f64; cfg.head_dim];
        for (j, e) in exps.iter().enumerate() {
            let p = e / norm;
            for (a, v) in acc.iter_mut().zip(&values.row(j)[lo..hi]) {
                *a += p * *v as f64;
            }
        }
        for (slot, a) in out[lo..hi].iter_mut().zip(&acc) {
            *slot = *a as f32;
        }
    }
}

/// Exact attention of a single query at an explicit position over every
/// key row. This is the decode-step oracle: the query's position is
/// independent of the key positions, and nothing is masked.
pub fn attend_one(
    q: &[f32],
    keys: &DenseMatrix,
    values: &DenseMatrix,
    q_position: usize,
    key_positions: &[usize],
    table: Option<&RotaryTable>,
    cfg: &AttentionConfig,
) -> Result<Vec<f32>> {
    let nd = cfg.nd();
    if q.len() != nd {
        return Err(SalsError::ShapeMismatch {
            context: "attend_one",
            expected: format!("query of length {nd}"),
            got: format!("{}", q.len()),
        });
    }
    if keys.rows() == 0 {
        return Err(SalsError::EmptySelection);
    }
    if keys.cols() != nd || values.cols() != nd || values.rows() != keys.rows() {
        return Err(SalsError::ShapeMismatch {
            context: "attend_one",
            expected: format!("{} x {nd} keys and values", keys.rows()),
            got: format!(
                "keys {}x{}, values {}x{}",
                keys.rows(),
                keys.cols(),
                values.rows(),
                values.cols()
            ),
        });
    }
    if key_positions.len() != keys.rows() {
        return Err(SalsError::ShapeMismatch {
            context: "attend_one",
            expected: format!("{} positions", keys.rows()),
            got: format!("{}", key_positions.len()),
        });
    }
    let keys_rot = rotate_rows(keys, key_positions, table)?;
    let q_rot = match table {
        Some(tab) => apply_rope(q, q_position, tab)?,
        None => q.to_vec(),
    };
    let mut out = vec![0.0f32; nd];
    attend_row(&q_rot, &keys_rot, values, keys.rows(), cfg, &mut out);
    Ok(out)
}

/// Exact multi-head attention over the whole context, one output row per
/// query. Query row t sits at `positions[t]`; with `causal` it sees key
/// rows `0..=t`, otherwise all of them.
pub fn full_attention(
    queries: &DenseMatrix,
    keys: &DenseMatrix,
    values: &DenseMatrix,
    positions: &[usize],
    table: Option<&RotaryTable>,
    cfg: &AttentionConfig,
    causal: bool,
) -> Result<DenseMatrix> {
    check_shapes("full_attention", queries, keys, values, positions, cfg)?;
    let keys_rot = rotate_rows(keys, positions, table)?;
    let mut out = DenseMatrix::zeros(queries.rows(), cfg.nd());
    for (t, &pos) in positions.iter().enumerate().take(queries.rows()) {
        let q_rot = match table {
            Some(tab) => apply_rope(queries.row(t), pos, tab)?,
            None => queries.row(t).to_vec(),
        };
        let limit = if causal { t + 1 } else { keys.rows() };
        attend_row(&q_rot, &keys_rot, values, limit, cfg, out.row_mut(t));
    }
    Ok(out)
}

/// Low-rank baseline that compresses AFTER rotation: key rows are rotated
/// first, then projected through U Uᵀ before scoring. Values stay exact.
/// Rotation mixes position into every key, so a basis calibrated on
/// unrotated keys fits poorly here; that misfit is the point.
#[allow(clippy::too_many_arguments)]
pub fn post_rope_lowrank_attention(
    queries: &DenseMatrix,
    keys: &DenseMatrix,
    values: &DenseMatrix,
    positions: &[usize],
    table: Option<&RotaryTable>,
    u: &ProjectionMatrix,
    cfg: &AttentionConfig,
    causal: bool,
) -> Result<DenseMatrix> {
    check_shapes(
        "post_rope_lowrank_attention",
        queries,
        keys,
        values,
        positions,
        cfg,
    )?;
    if u.dim() != cfg.nd() {
        return Err(SalsError::ShapeMismatch {
            context: "post_rope_lowrank_attention",
            expected: format!("projection dim {}", cfg.nd()),
            got: format!("{}", u.dim()),
        });
    }
    let keys_rot = rotate_rows(keys, positions, table)?;
    let keys_proj = project_through(&keys_rot, u);
    let mut out = DenseMatrix::zeros(queries.rows(), cfg.nd());
    for (t, &pos) in positions.iter().enumerate().take(queries.rows()) {
        let q_rot = match table {
            Some(tab) => apply_rope(queries.row(t), pos, tab)?,
            None => queries.row(t).to_vec(),
        };
        let limit = if causal { t + 1 } else { keys.rows() };
        attend_row(&q_rot, &keys_proj, values, limit, cfg, out.row_mut(t));
    }
    Ok(out)
}

/// Rows mapped through U Uᵀ (project to rank r, reconstruct to width nd).
fn project_through(rows: &DenseMatrix, u: &ProjectionMatrix) -> DenseMatrix {
    let nd = rows.cols();
    let r = u.rank();
    let basis = u.basis();
    let mut out = DenseMatrix::zeros(rows.rows(), nd);
    let mut latent = vec![0.0f64; r];
    for t in 0..rows.rows() {
        let row = rows.row(t);
        for (c, slot) in latent.iter_mut().enumerate() {
            let mut acc = 0.0f64;
            for i in 0..nd {
                acc += row[i] as f64 * basis[i * r + c];
            }
            *slot = acc;
        }
        let dst = out.row_mut(t);
        for (i, slot) in dst.iter_mut().enumerate() {
            let mut acc = 0.0f64;
            for (l, b) in latent.iter().zip(u.basis_row(i)) {
                acc += l * b;
            }
            *slot = acc as f32;
        }
    }
    out
}

/// Low-rank baseline that compresses BEFORE rotation but reconstructs and
/// attends over every token: k̂ = U Uᵀ k, rotated at the original
/// positions, exact values, no selection. Returns the outputs together
/// with the per-step traffic at full context length: every latent row is
/// read and reconstructed (s·r reads plus s·nd writes counted into the
/// reconstruct phase), and scoring and value gathering each touch all
/// s·nd stored elements.
#[allow(clippy::too_many_arguments)]
pub fn pre_rope_lowrank_full(
    queries: &DenseMatrix,
    keys: &DenseMatrix,
    values: &DenseMatrix,
    positions: &[usize],
    table: Option<&RotaryTable>,
    u: &ProjectionMatrix,
    cfg: &AttentionConfig,
    causal: bool,
) -> Result<(DenseMatrix, TrafficReport)> {
    check_shapes(
        "pre_rope_lowrank_full",
        queries,
        keys,
        values,
        positions,
        cfg,
    )?;
    if u.dim() != cfg.nd() {
        return Err(SalsError::ShapeMismatch {
            context: "pre_rope_lowrank_full",
            expected: format!("projection dim {}", cfg.nd()),
            got: format!("{}", u.dim()),
        });
    }
    let keys_hat = project_through(keys, u);
    let keys_rot = rotate_rows(&keys_hat, positions, table)?;
    let mut out = DenseMatrix::zeros(queries.rows(), cfg.nd());
    for (t, &pos) in positions.iter().enumerate().take(queries.rows()) {
        let q_rot = match table {
            Some(tab) => apply_rope(queries.row(t), pos, tab)?,
            None => queries.row(t).to_vec(),
        };
        let limit = if causal { t + 1 } else { keys.rows() };
        attend_row(&q_rot, &keys_rot, values, limit, cfg, out.row_mut(t));
    }

    let s = keys.rows() as f64;
    let nd = cfg.nd() as f64;
    let r = u.rank() as f64;
    let baseline = 2.0 * s * nd;
    let total = s * r + 3.0 * s * nd;
    let report = TrafficReport {
        elements_score_phase: s * nd,
        elements_reconstruct_phase: s * r + s * nd,
        elements_value_phase: s * nd,
        baseline_elements: baseline,
        predicted_ratio: total / baseline,
        measured_ratio: total / baseline,
    };
    Ok((out, report))
}
