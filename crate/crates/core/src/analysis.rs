//! Spectrum diagnostics, the bandwidth model, and traffic reconciliation.

use serde::{Deserialize, Serialize};

use crate::calibration::Covariance;
use crate::config::{AttentionConfig, SelectionPolicy};
use crate::eigen::jacobi_eigh;
use crate::error::{Result, SalsError};
use crate::rope::{apply_rope, RotaryTable};
use crate::tensor::DenseMatrix;
use crate::traffic::{TrafficMode, TrafficReport};

/// Smallest prefix of a descending spectrum whose cumulative share reaches
/// `variance_percent` of the total.
///
/// The total is the running sum over the whole spectrum, so asking for
/// 100 percent always succeeds: the final prefix sum is bit-identical to
/// the threshold it is compared against.
pub fn rank_at_variance(spectrum: &[f64], variance_percent: f64) -> Result<usize> {
    if spectrum.is_empty() {
        return Err(SalsError::InvalidInput {
            context: "rank_at_variance",
            reason: "empty spectrum".into(),
        });
    }
    if !(variance_percent > 0.0 && variance_percent <= 100.0) {
        return Err(SalsError::InvalidInput {
            context: "rank_at_variance",
            reason: format!("variance_percent must be in (0, 100], got {variance_percent}"),
        });
    }
    for w in spectrum.windows(2) {
        if w[1] > w[0] {
            return Err(SalsError::InvalidInput {
                context: "rank_at_variance",
                reason: "spectrum must be sorted descending".into(),
            });
        }
    }
    if spectrum.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(SalsError::InvalidInput {
            context: "rank_at_variance",
            reason: "spectrum entries must be finite and >= 0".into(),
        });
    }
    let mut prefix = Vec::with_capacity(spectrum.len());
    let mut acc = 0.0f64;
    for v in spectrum {
        acc += v;
        prefix.push(acc);
    }
    let total = *prefix.last().expect("non-empty");
    if total <= 0.0 {
        return Err(SalsError::DegenerateSpectrum);
    }
    let threshold = total * (variance_percent / 100.0);
    for (i, p) in prefix.iter().enumerate() {
        if *p >= threshold {
            return Ok(i + 1);
        }
    }
    Ok(spectrum.len())
}

/// Centered-covariance spectra of the same keys before and after rotation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumReport {
    pub eigenvalues_pre: Vec<f64>,
    pub eigenvalues_post: Vec<f64>,
    pub rank_pre: usize,
    pub rank_post: usize,
    pub variance_percent: f64,
}

fn centered_spectrum(rows: &DenseMatrix) -> Result<Vec<f64>> {
    let mut acc = Covariance::new(rows.cols());
    acc.accumulate(rows)?;
    let centered = acc.centered();
    let (mut evals, _) = jacobi_eigh(centered.matrix(), rows.cols())?;
    evals.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    for v in evals.iter_mut() {
        // Centered covariances are PSD; tiny negatives are rounding noise.
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    Ok(evals)
}

/// Measures how much rotation inflates the effective rank of a key set.
///
/// The same rows are eigendecomposed twice, once as stored and once after
/// rotating row t at `positions[t]`. Position-dependent rotation spreads
/// variance across directions that were empty before, so the post-rotation
/// rank at a fixed variance share is the interesting number.
pub fn rope_rank_demo(
    keys: &DenseMatrix,
    positions: &[usize],
    table: &RotaryTable,
    variance_percent: f64,
) -> Result<SpectrumReport> {
    if positions.len() != keys.rows() {
        return Err(SalsError::ShapeMismatch {
            context: "rope_rank_demo",
            expected: format!("{} positions", keys.rows()),
            got: format!("{}", positions.len()),
        });
    }
    let mut rotated = DenseMatrix::zeros(keys.rows(), keys.cols());
    for (t, &pos) in positions.iter().enumerate() {
        let row = apply_rope(keys.row(t), pos, table)?;
        rotated.row_mut(t).copy_from_slice(&row);
    }
    let eigenvalues_pre = centered_spectrum(keys)?;
    let eigenvalues_post = centered_spectrum(&rotated)?;
    let rank_pre = rank_at_variance(&eigenvalues_pre, variance_percent)?;
    let rank_post = rank_at_variance(&eigenvalues_post, variance_percent)?;
    Ok(SpectrumReport {
        eigenvalues_pre,
        eigenvalues_post,
        rank_pre,
        rank_post,
        variance_percent,
    })
}

/// Predicted bandwidth of a decode step relative to reading the full
/// cache. `ratio` is the fraction of baseline elements moved; `speedup`
/// is its reciprocal under the bandwidth-bound decode assumption.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemoryModel {
    pub ratio: f64,
    pub speedup: f64,
}

/// Bandwidth model for one decode step.
///
/// `d_rstar` is the scoring width fraction r*/nd, `d_r` the latent width
/// fraction r/nd, and `k_s` the selected fraction k/s. Scoring reads the
/// truncated latent of every token (half the key/value baseline times
/// d_rstar), and reconstruction plus value gathering each read k latent
/// rows, hence ratio = d_rstar/2 + d_r * k_s.
pub fn memory_speedup(d_rstar: f64, d_r: f64, k_s: f64) -> Result<MemoryModel> {
    for (field, v) in [("d_rstar", d_rstar), ("d_r", d_r), ("k_s", k_s)] {
        if !(v > 0.0 && v <= 1.0) {
            return Err(SalsError::InvalidConfig {
                field,
                reason: format!("must be in (0, 1], got {v}"),
            });
        }
    }
    let ratio = d_rstar / 2.0 + d_r * k_s;
    Ok(MemoryModel {
        ratio,
        speedup: 1.0 / ratio,
    })
}

/// Side-by-side closed-form prediction and measured counter totals for one
/// decode step's three phases.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrafficReconciliation {
    pub expected_score: f64,
    pub expected_reconstruct: f64,
    pub expected_value: f64,
    pub measured_score: f64,
    pub measured_reconstruct: f64,
    pub measured_value: f64,
}

impl TrafficReconciliation {
    pub fn max_deviation(&self) -> f64 {
        let d1 = (self.expected_score - self.measured_score).abs();
        let d2 = (self.expected_reconstruct - self.measured_reconstruct).abs();
        let d3 = (self.expected_value - self.measured_value).abs();
        d1.max(d2).max(d3)
    }

    pub fn verify(&self, tolerance: f64) -> Result<()> {
        if self.max_deviation() > tolerance {
            return Err(SalsError::InvalidInput {
                context: "reconcile_traffic",
                reason: format!(
                    "measured phases deviate from prediction by {} (tolerance {tolerance}): {self:?}",
                    self.max_deviation()
                ),
            });
        }
        Ok(())
    }
}

/// Predicts the phase totals of a decode step at context length `s` from
/// the configuration alone and pairs them with the measured report.
///
/// The closed form only holds when the selection size is data-independent:
/// the recent window must be non-empty (z >= 1, so the forced current
/// token is already covered), the full-precision buffer must fit inside it
/// (w <= z, so no buffered token escapes the recent set), and the context
/// must not clamp the budget (s >= x+y+z). Anything else makes the phase
/// split depend on which tokens scored high, and the prediction is refused.
pub fn reconcile_traffic(
    report: &TrafficReport,
    cfg: &AttentionConfig,
    policy: &SelectionPolicy,
    s: usize,
) -> Result<TrafficReconciliation> {
    cfg.validate()?;
    policy.validate()?;
    if policy.recent == 0 {
        return Err(SalsError::InvalidInput {
            context: "reconcile_traffic",
            reason: "closed form needs recent >= 1 so the current token is always covered".into(),
        });
    }
    if cfg.recent_window > policy.recent {
        return Err(SalsError::InvalidInput {
            context: "reconcile_traffic",
            reason: format!(
                "buffer ({}) larger than recent selection ({}) makes the phase split data-dependent",
                cfg.recent_window, policy.recent
            ),
        });
    }
    let k = policy.sink + policy.critical_budget + policy.recent;
    if s < k {
        return Err(SalsError::InvalidInput {
            context: "reconcile_traffic",
            reason: format!("context {s} shorter than selection budget {k}"),
        });
    }
    let nd = cfg.nd() as f64;
    let r = cfg.latent_rank as f64;
    let w = cfg.recent_window as f64;
    let kf = k as f64;
    let sf = s as f64;
    let (expected_reconstruct, expected_value) = match cfg.traffic_mode {
        TrafficMode::Itemized => {
            let value_width = nd * cfg.value_bits as f64 / 32.0;
            (
                (kf - w) * r + w * nd,
                (kf - w) * value_width + w * nd,
            )
        }
        TrafficMode::Idealized => (kf * r, kf * r),
    };
    Ok(TrafficReconciliation {
        expected_score: sf * cfg.score_rank as f64,
        expected_reconstruct,
        expected_value,
        measured_score: report.elements_score_phase,
        measured_reconstruct: report.elements_reconstruct_phase,
        measured_value: report.elements_value_phase,
    })
}
