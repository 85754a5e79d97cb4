//! Configuration types and the JSON run-config document.
//!
//! A run config is a flat UTF-8 JSON object whose keys are the snake_case
//! field names of [`AttentionConfig`] and [`SelectionPolicy`]. Optional keys
//! fall back to defaults modeled on the reference operating point: latent
//! rank at 25% of the stacked key dimension, score rank at half the latent
//! rank, 4-bit values in groups of 32, recent window 64 aligned with the
//! recent-selection window, dense layers {0, 1, 31}.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SalsError};
use crate::rope::PairingConvention;
use crate::traffic::TrafficMode;

pub const DEFAULT_ROPE_BASE: f64 = 10_000.0;
pub const DEFAULT_VALUE_BITS: u32 = 4;
pub const DEFAULT_QUANT_GROUP: usize = 32;
pub const DEFAULT_RECENT_WINDOW: usize = 64;
pub const DEFAULT_SINK: usize = 16;
pub const DEFAULT_CRITICAL_BUDGET: usize = 432;

/// Per-layer attention geometry plus cache precision knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    /// Number of key/value heads n.
    pub num_heads: usize,
    /// Per-head dimension d; even, because rotary embedding pairs dimensions.
    pub head_dim: usize,
    /// Rotary frequency base.
    pub rope_base: f64,
    /// Latent rank r of the joint key projection, 1 ..= n*d.
    pub latent_rank: usize,
    /// Truncated scoring rank r*, 1 ..= r.
    pub score_rank: usize,
    /// Value cache width in bits: 2 and 4 quantize, 16 and 32 store f32
    /// content and only change traffic accounting.
    pub value_bits: u32,
    /// Quantization group size along the feature axis; must divide n*d.
    pub quant_group: usize,
    /// Recent-window buffer length w (tokens kept fully uncompressed).
    pub recent_window: usize,
    /// Which dimensions each rotary rotation pairs.
    pub rope_pairing: PairingConvention,
    /// Element-traffic counting convention.
    pub traffic_mode: TrafficMode,
}

impl AttentionConfig {
    /// Stacked key dimension n*d.
    pub fn nd(&self) -> usize {
        self.num_heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 {
            return Err(invalid("num_heads", "must be at least 1"));
        }
        if self.head_dim == 0 || !self.head_dim.is_multiple_of(2) {
            return Err(invalid("head_dim", "must be a positive even number"));
        }
        if !(self.rope_base.is_finite() && self.rope_base > 1.0) {
            return Err(invalid("rope_base", "must be finite and > 1"));
        }
        let nd = self.nd();
        if self.latent_rank == 0 || self.latent_rank > nd {
            return Err(invalid(
                "latent_rank",
                format!("must be in 1..={nd} (n*d), got {}", self.latent_rank),
            ));
        }
        if self.score_rank == 0 || self.score_rank > self.latent_rank {
            return Err(invalid(
                "score_rank",
                format!(
                    "must be in 1..={} (latent_rank), got {}",
                    self.latent_rank, self.score_rank
                ),
            ));
        }
        if ![2, 4, 16, 32].contains(&self.value_bits) {
            return Err(invalid("value_bits", "must be one of 2, 4, 16, 32"));
        }
        if self.quant_group == 0 || !nd.is_multiple_of(self.quant_group) {
            return Err(invalid(
                "quant_group",
                format!("must divide n*d = {nd}, got {}", self.quant_group),
            ));
        }
        Ok(())
    }
}

/// Which tokens a decode step keeps: attention sinks, a recent window and a
/// scored critical budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionPolicy {
    /// Leading sink positions x, always kept.
    pub sink: usize,
    /// Scored critical budget y.
    pub critical_budget: usize,
    /// Trailing recent positions z, always kept.
    pub recent: usize,
    /// Truncated scoring rank; kept equal to `AttentionConfig::score_rank`.
    pub score_rank: usize,
    /// Layers that bypass selection and run dense attention.
    pub dense_layers: BTreeSet<usize>,
}

impl SelectionPolicy {
    /// Upper bound on selection size for a cache of `s` tokens.
    pub fn budget(&self, s: usize) -> usize {
        (self.sink + self.critical_budget + self.recent).min(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.score_rank == 0 {
            return Err(invalid("score_rank", "must be at least 1"));
        }
        Ok(())
    }
}

/// Zero-mean Gaussian key generator description.
///
/// Rows are sampled with covariance eigenvalues equal to `spectrum` in a
/// seeded random orthonormal basis; see `synth` for the sampling convention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub seq_len: usize,
    /// Covariance eigenvalues, descending, all >= 0, length n*d.
    pub spectrum: Vec<f64>,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub planted_token: Option<PlantedToken>,
}

/// One row replaced by `gain` times the generator's unit query direction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantedToken {
    pub position: usize,
    pub gain: f64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.spectrum.is_empty() {
            return Err(invalid("spectrum", "must not be empty"));
        }
        if self.spectrum.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(invalid("spectrum", "entries must be finite and >= 0"));
        }
        if self.spectrum.windows(2).any(|w| w[0] < w[1]) {
            return Err(invalid("spectrum", "entries must be descending"));
        }
        if let Some(p) = &self.planted_token {
            if p.position >= self.seq_len {
                return Err(invalid(
                    "planted_token.position",
                    format!("must be < seq_len = {}", self.seq_len),
                ));
            }
            if !(p.gain.is_finite() && p.gain > 0.0) {
                return Err(invalid("planted_token.gain", "must be finite and > 0"));
            }
        }
        Ok(())
    }
}

fn invalid(field: &'static str, reason: impl Into<String>) -> SalsError {
    SalsError::InvalidConfig {
        field,
        reason: reason.into(),
    }
}

/// Raw run-config document: every field optional except the head geometry.
/// [`RunConfig::resolve`] applies defaults and produces the validated pair.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub num_heads: Option<usize>,
    pub head_dim: Option<usize>,
    pub rope_base: Option<f64>,
    pub latent_rank: Option<usize>,
    pub score_rank: Option<usize>,
    pub value_bits: Option<u32>,
    pub quant_group: Option<usize>,
    pub recent_window: Option<usize>,
    pub rope_pairing: Option<PairingConvention>,
    pub traffic_mode: Option<TrafficMode>,
    pub sink: Option<usize>,
    pub critical_budget: Option<usize>,
    pub recent: Option<usize>,
    pub dense_layers: Option<BTreeSet<usize>>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Applies defaults and validates. The recent-selection window and the
    /// full-precision buffer default to the same length; score_rank is shared
    /// between the attention config and the policy.
    pub fn resolve(&self) -> Result<(AttentionConfig, SelectionPolicy)> {
        let num_heads = self.num_heads.ok_or_else(|| invalid("num_heads", "required"))?;
        let head_dim = self.head_dim.ok_or_else(|| invalid("head_dim", "required"))?;
        let nd = num_heads
            .checked_mul(head_dim)
            .ok_or_else(|| invalid("head_dim", "n*d overflows"))?;
        let latent_rank = self.latent_rank.unwrap_or_else(|| (nd / 4).max(1));
        let score_rank = self.score_rank.unwrap_or_else(|| (latent_rank / 2).max(1));
        let recent = match (self.recent, self.recent_window) {
            (Some(z), _) => z,
            (None, Some(w)) => w,
            (None, None) => DEFAULT_RECENT_WINDOW,
        };
        let recent_window = self.recent_window.unwrap_or(recent);
        // Group size must divide n*d; shrink the default for tiny test heads.
        let quant_group = self.quant_group.unwrap_or({
            if nd % DEFAULT_QUANT_GROUP == 0 {
                DEFAULT_QUANT_GROUP
            } else {
                head_dim
            }
        });
        let cfg = AttentionConfig {
            num_heads,
            head_dim,
            rope_base: self.rope_base.unwrap_or(DEFAULT_ROPE_BASE),
            latent_rank,
            score_rank,
            value_bits: self.value_bits.unwrap_or(DEFAULT_VALUE_BITS),
            quant_group,
            recent_window,
            rope_pairing: self.rope_pairing.unwrap_or_default(),
            traffic_mode: self.traffic_mode.unwrap_or_default(),
        };
        cfg.validate()?;
        let policy = SelectionPolicy {
            sink: self.sink.unwrap_or(DEFAULT_SINK),
            critical_budget: self.critical_budget.unwrap_or(DEFAULT_CRITICAL_BUDGET),
            recent,
            score_rank: cfg.score_rank,
            dense_layers: self
                .dense_layers
                .clone()
                .unwrap_or_else(|| BTreeSet::from([0, 1, 31])),
        };
        policy.validate()?;
        Ok((cfg, policy))
    }
}
