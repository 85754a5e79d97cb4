//! Critical-token selection in latent space.
//!
//! Scores are truncated inner products: only the first r* latent
//! coordinates participate, which is what makes scoring cheap — the latent
//! basis is ordered by eigenvalue, so the leading coordinates carry most of
//! the signal. Selection keeps three groups: the first x sink tokens, the
//! last z recent tokens, and the top y remaining tokens by score. Overlaps
//! between sink and recent are deduplicated without refunding the critical
//! budget. Ties always resolve toward the lower token index.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cache::LatentKvCache;
use crate::calibration::{compute_joint_projection, Covariance, ProjectionMatrix};
use crate::config::{AttentionConfig, SelectionPolicy, SyntheticSpec};
use crate::error::{Result, SalsError};
use crate::rope::{apply_rope, RotaryTable};
use crate::synth::{generate_keys, planted_direction};
use crate::tensor::{dot64, DenseMatrix};
use crate::traffic::{TrafficCounter, TrafficMode};

/// Outcome of one selection pass. `scores` aligns with `indices`;
/// `phase_traffic` carries the scoring-phase element count when the
/// selection came from an instrumented decode step (0 otherwise).
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSelection {
    pub indices: Vec<usize>,
    pub scores: Vec<f32>,
    pub phase_traffic: f64,
}

/// Truncated latent scores of `q` against every cached token.
///
/// The query is projected through the full rank-r basis and cut to the
/// first r* coordinates; each cached latent key is read only on those
/// coordinates, which is what the traffic counter records.
pub fn latent_scores(
    q: &[f32],
    cache: &LatentKvCache,
    u: &ProjectionMatrix,
    score_rank: usize,
    traffic: &mut TrafficCounter,
) -> Result<Vec<f32>> {
    if score_rank == 0 || score_rank > cache.rank() {
        return Err(SalsError::InvalidConfig {
            field: "score_rank",
            reason: format!("must be in 1..={}, got {score_rank}", cache.rank()),
        });
    }
    let q_latent = crate::cache::project_key(q, u)?;
    let q_trunc = &q_latent[..score_rank];
    let mut scores = Vec::with_capacity(cache.len());
    for t in 0..cache.len() {
        let row = &cache.latent_row(t)[..score_rank];
        scores.push(dot64(q_trunc, row) as f32);
        traffic.score_row(score_rank);
    }
    Ok(scores)
}

/// Sink ∪ recent ∪ top-y scored remainder, sorted ascending.
pub fn select_topk(scores: &[f32], policy: &SelectionPolicy) -> Result<TokenSelection> {
    let s = scores.len();
    if s == 0 {
        return Err(SalsError::EmptySelection);
    }
    if let Some(index) = scores.iter().position(|v| !v.is_finite()) {
        return Err(SalsError::NonFinite { index });
    }
    let mut keep = vec![false; s];
    for slot in keep.iter_mut().take(policy.sink.min(s)) {
        *slot = true;
    }
    for slot in keep.iter_mut().skip(s - policy.recent.min(s)) {
        *slot = true;
    }
    let mut remaining: Vec<usize> = (0..s).filter(|&i| !keep[i]).collect();
    remaining.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    for &i in remaining.iter().take(policy.critical_budget) {
        keep[i] = true;
    }
    let indices: Vec<usize> = (0..s).filter(|&i| keep[i]).collect();
    let picked_scores = indices.iter().map(|&i| scores[i]).collect();
    Ok(TokenSelection {
        indices,
        scores: picked_scores,
        phase_traffic: 0.0,
    })
}

/// Fraction of the exact attention mass covered by the top `n_c`
/// approximate-score tokens.
pub fn overlap_score(approx_scores: &[f32], exact_probs: &[f32], n_c: usize) -> Result<f64> {
    let s = approx_scores.len();
    if exact_probs.len() != s {
        return Err(SalsError::ShapeMismatch {
            context: "overlap_score",
            expected: format!("{s} probabilities"),
            got: format!("{}", exact_probs.len()),
        });
    }
    if n_c == 0 || n_c > s {
        return Err(SalsError::InvalidInput {
            context: "overlap_score",
            reason: format!("n_c must be in 1..={s}, got {n_c}"),
        });
    }
    if exact_probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(SalsError::InvalidInput {
            context: "overlap_score",
            reason: "probabilities must be finite and >= 0".into(),
        });
    }
    let total: f64 = exact_probs.iter().map(|p| *p as f64).sum();
    if total <= 0.0 {
        return Err(SalsError::InvalidInput {
            context: "overlap_score",
            reason: "probability mass is zero".into(),
        });
    }
    let mut order: Vec<usize> = (0..s).collect();
    order.sort_by(|&a, &b| {
        approx_scores[b]
            .partial_cmp(&approx_scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    // Summing the kept probabilities in index order makes full coverage
    // (n_c == s) reproduce `total` term for term, so the ratio is exactly 1.
    let mut kept: Vec<usize> = order.into_iter().take(n_c).collect();
    kept.sort_unstable();
    let covered: f64 = kept.iter().map(|&i| exact_probs[i] as f64).sum();
    Ok(covered / total)
}

/// Mean-pools query-head groups down to the key/value head count, for
/// grouped-query layouts where queries outnumber cached heads.
pub fn pool_query_heads(
    q: &[f32],
    num_query_heads: usize,
    num_kv_heads: usize,
    head_dim: usize,
) -> Result<Vec<f32>> {
    if num_kv_heads == 0 || !num_query_heads.is_multiple_of(num_kv_heads) {
        return Err(SalsError::InvalidConfig {
            field: "num_heads",
            reason: format!("{num_query_heads} query heads not divisible by {num_kv_heads}"),
        });
    }
    if q.len() != num_query_heads * head_dim {
        return Err(SalsError::ShapeMismatch {
            context: "pool_query_heads",
            expected: format!("{}", num_query_heads * head_dim),
            got: format!("{}", q.len()),
        });
    }
    let group = num_query_heads / num_kv_heads;
    let mut out = vec![0.0f32; num_kv_heads * head_dim];
    for kv in 0..num_kv_heads {
        for i in 0..head_dim {
            let mut acc = 0.0f64;
            for g in 0..group {
                acc += q[(kv * group + g) * head_dim + i] as f64;
            }
            out[kv * head_dim + i] = (acc / group as f64) as f32;
        }
    }
    Ok(out)
}

/// Head-averaged exact attention distribution of one query over all keys.
fn exact_attention_probs(
    q: &[f32],
    keys: &DenseMatrix,
    q_position: usize,
    table: Option<&RotaryTable>,
    num_heads: usize,
    head_dim: usize,
) -> Result<Vec<f32>> {
    let s = keys.rows();
    let q_rot = match table {
        Some(t) => apply_rope(q, q_position, t)?,
        None => q.to_vec(),
    };
    let mut rotated_keys = Vec::with_capacity(s);
    for j in 0..s {
        rotated_keys.push(match table {
            Some(t) => apply_rope(keys.row(j), j, t)?,
            None => keys.row(j).to_vec(),
        });
    }
    let scale = 1.0 / (head_dim as f64).sqrt();
    let mut probs = vec![0.0f64; s];
    for h in 0..num_heads {
        let lo = h * head_dim;
        let hi = lo + head_dim;
        let logits: Vec<f64> = rotated_keys
            .iter()
            .map(|k| dot64(&q_rot[lo..hi], &k[lo..hi]) * scale)
            .collect();
        let max = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let norm: f64 = exps.iter().sum();
        for (p, e) in probs.iter_mut().zip(&exps) {
            *p += e / norm / num_heads as f64;
        }
    }
    Ok(probs.into_iter().map(|p| p as f32).collect())
}

/// Aggregate selection quality over seeded trials.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecallReport {
    pub trials: usize,
    /// Mean exact-attention mass covered by the selected set.
    pub mean_overlap: f64,
    /// Fraction of trials whose planted token was selected; present only
    /// when `spec.planted_token` is set.
    pub planted_recall: Option<f64>,
}

/// Runs seeded trials of the full selection path against exact attention.
///
/// Each trial generates keys from `spec` (the seed is advanced per trial),
/// calibrates a joint projection on them, scores the generator's unit query
/// direction through the truncated latent path, and selects with `policy`.
/// Overlap is the exact post-rotation attention mass the selection covers;
/// recall is whether the planted token made it in. With `use_rope` false,
/// all positions are zero on both sides of the comparison.
pub fn selection_recall(
    trial_count: usize,
    spec: &SyntheticSpec,
    cfg: &AttentionConfig,
    policy: &SelectionPolicy,
    use_rope: bool,
) -> Result<RecallReport> {
    if trial_count == 0 {
        return Err(SalsError::InvalidInput {
            context: "selection_recall",
            reason: "trial_count must be positive".into(),
        });
    }
    spec.validate()?;
    cfg.validate()?;
    policy.validate()?;
    let table = if use_rope {
        Some(RotaryTable::with_pairing(
            spec.seq_len + 1,
            cfg.head_dim,
            cfg.rope_base,
            cfg.rope_pairing,
        )?)
    } else {
        None
    };

    let outcomes: Result<Vec<(f64, Option<bool>)>> = (0..trial_count)
        .into_par_iter()
        .map(|trial| {
            let mut trial_spec = spec.clone();
            trial_spec.seed = spec
                .seed
                .wrapping_add((trial as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let keys = generate_keys(&trial_spec, cfg)?;
            let q = planted_direction(&trial_spec, cfg)?;

            let mut acc = Covariance::new(cfg.nd());
            acc.accumulate(&keys)?;
            let u = compute_joint_projection(&acc, cfg.latent_rank)?;

            let mut traffic = TrafficCounter::new(TrafficMode::Itemized);
            let mut cache = LatentKvCache::new(cfg)?;
            for t in 0..keys.rows() {
                // Values are irrelevant to selection; reuse the key row.
                crate::cache::append_token(&mut cache, keys.row(t), keys.row(t), t, &u, cfg)?;
            }
            let scores = latent_scores(&q, &cache, &u, cfg.score_rank, &mut traffic)?;
            let selection = select_topk(&scores, policy)?;

            let probs = exact_attention_probs(
                &q,
                &keys,
                keys.rows(),
                table.as_ref(),
                cfg.num_heads,
                cfg.head_dim,
            )?;
            let total: f64 = probs.iter().map(|p| *p as f64).sum();
            let covered: f64 = selection
                .indices
                .iter()
                .map(|&i| probs[i] as f64)
                .sum();
            let overlap = covered / total;
            let hit = trial_spec
                .planted_token
                .map(|p| selection.indices.binary_search(&p.position).is_ok());
            Ok((overlap, hit))
        })
        .collect();
    let outcomes = outcomes?;

    let mean_overlap = outcomes.iter().map(|(o, _)| o).sum::<f64>() / trial_count as f64;
    let hits: Vec<bool> = outcomes.iter().filter_map(|(_, h)| *h).collect();
    let planted_recall = if hits.is_empty() {
        None
    } else {
        Some(hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64)
    };
    Ok(RecallReport {
        trials: trial_count,
        mean_overlap,
        planted_recall,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn policy(x: usize, y: usize, z: usize) -> SelectionPolicy {
        SelectionPolicy {
            sink: x,
            critical_budget: y,
            recent: z,
            score_rank: 1,
            dense_layers: BTreeSet::new(),
        }
    }

    #[test]
    fn keeps_sink_recent_and_best_scored() {
        let scores = [0.0f32, 9.0, 1.0, 5.0, 0.0];
        let sel = select_topk(&scores, &policy(1, 1, 1)).unwrap();
        assert_eq!(sel.indices, vec![0, 1, 4]);
        assert_eq!(sel.scores, vec![0.0, 9.0, 0.0]);
    }

    #[test]
    fn equal_scores_prefer_lower_index() {
        let scores = [2.0f32, 2.0, 2.0, 2.0];
        let sel = select_topk(&scores, &policy(0, 1, 0)).unwrap();
        assert_eq!(sel.indices, vec![0]);
        let sel = select_topk(&scores, &policy(0, 2, 0)).unwrap();
        assert_eq!(sel.indices, vec![0, 1]);
    }

    #[test]
    fn overlap_is_deduplicated_without_budget_refund() {
        // s=4 with x=3, z=3: sink and recent overlap on index 1..=2.
        let scores = [1.0f32, 2.0, 3.0, 4.0];
        let sel = select_topk(&scores, &policy(3, 0, 3)).unwrap();
        assert_eq!(sel.indices, vec![0, 1, 2, 3]);
        // y=1 has nothing left to pick; the budget is not refunded.
        let sel = select_topk(&scores, &policy(3, 1, 3)).unwrap();
        assert_eq!(sel.indices, vec![0, 1, 2, 3]);
    }

    #[test]
    fn selection_size_is_min_of_budget_and_length() {
        for s in 1usize..=8 {
            for x in 0..=3 {
                for y in 0..=3 {
                    for z in 0..=3 {
                        let scores: Vec<f32> = (0..s).map(|i| i as f32 * 0.7).collect();
                        let sel = select_topk(&scores, &policy(x, y, z)).unwrap();
                        assert_eq!(sel.indices.len(), (x + y + z).min(s));
                        assert!(sel.indices.windows(2).all(|w| w[0] < w[1]));
                    }
                }
            }
        }
    }

    #[test]
    fn empty_scores_are_rejected() {
        assert!(matches!(
            select_topk(&[], &policy(1, 1, 1)),
            Err(SalsError::EmptySelection)
        ));
    }

    #[test]
    fn overlap_score_full_coverage_is_one() {
        let approx = [0.3f32, 0.1, 0.9, 0.5];
        let exact = [0.25f32, 0.25, 0.25, 0.25];
        assert_eq!(overlap_score(&approx, &exact, 4).unwrap(), 1.0);
    }

    #[test]
    fn overlap_score_takes_top_approximate_tokens() {
        let approx = [10.0f32, 0.0, 5.0, 0.0];
        let exact = [0.5f32, 0.2, 0.2, 0.1];
        // Top-2 approx picks indices 0 and 2, covering 0.7 of the mass.
        let os = overlap_score(&approx, &exact, 2).unwrap();
        assert!((os - 0.7).abs() < 1e-6);
    }

    #[test]
    fn overlap_score_rejects_oversized_n_c() {
        let approx = [1.0f32, 2.0];
        let exact = [0.5f32, 0.5];
        assert!(overlap_score(&approx, &exact, 3).is_err());
        assert!(overlap_score(&approx, &exact, 0).is_err());
    }

    #[test]
    fn pooling_averages_query_head_groups() {
        // 4 query heads onto 2 kv heads, head_dim 2.
        let q = [1.0f32, 10.0, 3.0, 30.0, -2.0, 0.0, 4.0, 8.0];
        let pooled = pool_query_heads(&q, 4, 2, 2).unwrap();
        assert_eq!(pooled, vec![2.0, 20.0, 1.0, 4.0]);
        assert!(pool_query_heads(&q, 4, 3, 2).is_err());
    }
}
