//! Decode-step orchestration: score, select, reconstruct, rotate, attend.
//!
//! The pipeline order is fixed. Keys are cached pre-rotation in latent
//! form; at decode time the selected rows are reconstructed to full width
//! and only then rotated at their original positions. Rotating after
//! reconstruction is what keeps position information exact for the tokens
//! that matter, no matter how aggressive the compression was.

use crate::cache::{append_token, gather_values, reconstruct_keys, LatentKvCache};
use crate::calibration::ProjectionMatrix;
use crate::config::{AttentionConfig, SelectionPolicy};
use crate::error::{Result, SalsError};
use crate::rope::{apply_rope, RotaryTable};
use crate::selection::{latent_scores, select_topk, TokenSelection};
use crate::tensor::{dot64, DenseMatrix};
use crate::traffic::{TrafficCounter, TrafficReport};

/// Result of one decode step.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    /// Concatenated per-head outputs, length num_heads * head_dim.
    pub y: Vec<f32>,
    pub selection: TokenSelection,
    /// Head-averaged attention weights, aligned with `selection.indices`.
    pub probs: Vec<f32>,
    pub traffic: TrafficReport,
}

/// Exact multi-head attention of one rotated query over an explicit
/// key/value subset. Returns the output vector and the head-averaged
/// weights over the subset rows.
pub fn sparse_attention_over(
    q_rot: &[f32],
    keys_rot: &DenseMatrix,
    values: &DenseMatrix,
    num_heads: usize,
    head_dim: usize,
) -> Result<(Vec<f32>, Vec<f32>)> {
    let nd = num_heads * head_dim;
    let n_sel = keys_rot.rows();
    if n_sel == 0 {
        return Err(SalsError::EmptySelection);
    }
    if q_rot.len() != nd || keys_rot.cols() != nd || values.cols() != nd {
        return Err(SalsError::ShapeMismatch {
            context: "sparse_attention_over",
            expected: format!("width {nd}"),
            got: format!(
                "q {}, keys {}, values {}",
                q_rot.len(),
                keys_rot.cols(),
                values.cols()
            ),
        });
    }
    if values.rows() != n_sel {
        return Err(SalsError::ShapeMismatch {
            context: "sparse_attention_over",
            expected: format!("{n_sel} value rows"),
            got: format!("{}", values.rows()),
        });
    }
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut y = vec![0.0f32; nd];
    let mut probs_avg = vec![0.0f64; n_sel];
    for h in 0..num_heads {
        let lo = h * head_dim;
        let hi = lo + head_dim;
        let logits: Vec<f64> = (0..n_sel)
            .map(|j| dot64(&q_rot[lo..hi], &keys_rot.row(j)[lo..hi]) * scale)
            .collect();
        let max = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let norm: f64 = exps.iter().sum();
        let mut head_out = vec![0.0f64; head_dim];
        for (j, e) in exps.iter().enumerate() {
            let p = e / norm;
            probs_avg[j] += p / num_heads as f64;
            let v = &values.row(j)[lo..hi];
            for (o, x) in head_out.iter_mut().zip(v) {
                *o += p * *x as f64;
            }
        }
        for (slot, o) in y[lo..hi].iter_mut().zip(&head_out) {
            *slot = *o as f32;
        }
    }
    Ok((y, probs_avg.into_iter().map(|p| p as f32).collect()))
}

#[allow(clippy::too_many_arguments)]
fn attend_selected(
    q: &[f32],
    indices: Vec<usize>,
    scores: &[f32],
    score_traffic: f64,
    cache: &LatentKvCache,
    u: &ProjectionMatrix,
    table: &RotaryTable,
    position: usize,
    cfg: &AttentionConfig,
    mut traffic: TrafficCounter,
) -> Result<AttentionOutput> {
    let keys = reconstruct_keys(cache, &indices, u, &mut traffic)?;
    let values = gather_values(cache, &indices, &mut traffic)?;

    let q_rot = apply_rope(q, position, table)?;
    let mut keys_rot = DenseMatrix::zeros(keys.rows(), keys.cols());
    for (row, &idx) in indices.iter().enumerate() {
        let rotated = apply_rope(keys.row(row), cache.positions()[idx], table)?;
        keys_rot.row_mut(row).copy_from_slice(&rotated);
    }

    let (y, probs) =
        sparse_attention_over(&q_rot, &keys_rot, &values, cfg.num_heads, cfg.head_dim)?;
    let traffic_report = TrafficReport::from_counter(
        &traffic,
        cache.len(),
        cfg.nd(),
        cfg.latent_rank,
        cfg.score_rank,
        indices.len(),
    );
    let picked_scores = indices.iter().map(|&i| scores[i]).collect();
    Ok(AttentionOutput {
        y,
        selection: TokenSelection {
            indices,
            scores: picked_scores,
            phase_traffic: score_traffic,
        },
        probs,
        traffic: traffic_report,
    })
}

/// One sparse decode step.
///
/// Appends the incoming token to the cache, scores every cached token in
/// truncated latent space, selects sink/recent/critical tokens (always
/// forcing the token just appended), reconstructs and rotates the selected
/// keys, and attends exactly over that subset.
#[allow(clippy::too_many_arguments)]
pub fn sals_decode_step(
    q: &[f32],
    k_new: &[f32],
    v_new: &[f32],
    position: usize,
    cache: &mut LatentKvCache,
    u: &ProjectionMatrix,
    table: &RotaryTable,
    policy: &SelectionPolicy,
    cfg: &AttentionConfig,
) -> Result<AttentionOutput> {
    policy.validate()?;
    append_token(cache, k_new, v_new, position, u, cfg)?;
    let mut traffic = TrafficCounter::new(cfg.traffic_mode);
    let scores = latent_scores(q, cache, u, cfg.score_rank, &mut traffic)?;
    let score_traffic = traffic.score_elements();
    let mut selection = select_topk(&scores, policy)?;
    let current = cache.len() - 1;
    if let Err(slot) = selection.indices.binary_search(&current) {
        selection.indices.insert(slot, current);
    }
    attend_selected(
        q,
        selection.indices,
        &scores,
        score_traffic,
        cache,
        u,
        table,
        position,
        cfg,
        traffic,
    )
}

/// One dense decode step for layers that skip selection: every cached
/// token is reconstructed and attended. No scoring traffic is charged.
#[allow(clippy::too_many_arguments)]
pub fn dense_decode_step(
    q: &[f32],
    k_new: &[f32],
    v_new: &[f32],
    position: usize,
    cache: &mut LatentKvCache,
    u: &ProjectionMatrix,
    table: &RotaryTable,
    cfg: &AttentionConfig,
) -> Result<AttentionOutput> {
    append_token(cache, k_new, v_new, position, u, cfg)?;
    let traffic = TrafficCounter::new(cfg.traffic_mode);
    let indices: Vec<usize> = (0..cache.len()).collect();
    let scores = vec![0.0f32; cache.len()];
    attend_selected(
        q, indices, &scores, 0.0, cache, u, table, position, cfg, traffic,
    )
}

/// Loads a whole prompt into the cache without producing outputs. Token t
/// is stored at position t; the cache must start empty so positions and
/// row indices coincide.
pub fn prefill(
    keys: &DenseMatrix,
    values: &DenseMatrix,
    cache: &mut LatentKvCache,
    u: &ProjectionMatrix,
    cfg: &AttentionConfig,
) -> Result<()> {
    if !cache.is_empty() {
        return Err(SalsError::InvalidInput {
            context: "prefill",
            reason: format!("cache already holds {} tokens", cache.len()),
        });
    }
    if keys.rows() != values.rows() {
        return Err(SalsError::ShapeMismatch {
            context: "prefill",
            expected: format!("{} value rows", keys.rows()),
            got: format!("{}", values.rows()),
        });
    }
    for t in 0..keys.rows() {
        append_token(cache, keys.row(t), values.row(t), t, u, cfg)?;
    }
    Ok(())
}
