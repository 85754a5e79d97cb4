//! Element-traffic instrumentation for decode steps.
//!
//! Counts are in f32-element equivalents: a full-precision element is 1, a
//! b-bit quantized element is b/32. The baseline convention is a dense step
//! over s cached tokens moving 2*s*n*d elements (keys plus values).
//!
//! Two counting modes exist. `Itemized` charges what the implementation
//! actually reads: r* latent coordinates per scored token, r latent
//! coordinates per reconstructed key, quantized widths for values, full
//! width for recent-buffer hits. `Idealized` reproduces the closed-form
//! access model in which both the key and the value cache are rank-r, so a
//! selected token charges r elements on each side regardless of storage;
//! group metadata and the recent buffer are ignored by that model.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrafficMode {
    #[default]
    Itemized,
    Idealized,
}

/// Mutable tally threaded through the ops that touch cache memory.
#[derive(Debug, Clone, Copy)]
pub struct TrafficCounter {
    mode: TrafficMode,
    score: f64,
    reconstruct: f64,
    value: f64,
}

impl TrafficCounter {
    pub fn new(mode: TrafficMode) -> Self {
        Self {
            mode,
            score: 0.0,
            reconstruct: 0.0,
            value: 0.0,
        }
    }

    pub fn mode(&self) -> TrafficMode {
        self.mode
    }

    /// One cached token scored against the truncated query.
    pub fn score_row(&mut self, score_rank: usize) {
        self.score += score_rank as f64;
    }

    /// One key rebuilt from its latent row.
    pub fn latent_key(&mut self, rank: usize) {
        self.reconstruct += rank as f64;
    }

    /// One key served verbatim from the recent buffer.
    pub fn buffered_key(&mut self, nd: usize, rank: usize) {
        self.reconstruct += match self.mode {
            TrafficMode::Itemized => nd as f64,
            TrafficMode::Idealized => rank as f64,
        };
    }

    /// One value row read from the compressed store at `bits` width.
    pub fn stored_value(&mut self, nd: usize, bits: u32, rank: usize) {
        self.value += match self.mode {
            TrafficMode::Itemized => nd as f64 * bits as f64 / 32.0,
            TrafficMode::Idealized => rank as f64,
        };
    }

    /// One value row served verbatim from the recent buffer.
    pub fn buffered_value(&mut self, nd: usize, rank: usize) {
        self.value += match self.mode {
            TrafficMode::Itemized => nd as f64,
            TrafficMode::Idealized => rank as f64,
        };
    }

    pub fn score_elements(&self) -> f64 {
        self.score
    }

    pub fn reconstruct_elements(&self) -> f64 {
        self.reconstruct
    }

    pub fn value_elements(&self) -> f64 {
        self.value
    }

    pub fn total(&self) -> f64 {
        self.score + self.reconstruct + self.value
    }
}

/// Per-step traffic summary.
///
/// `predicted_ratio` is the closed-form model (s*r* + 2*k*r) / (2*s*n*d)
/// evaluated with the step's selection size; `measured_ratio` is the counted
/// total over the same baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrafficReport {
    pub elements_score_phase: f64,
    pub elements_reconstruct_phase: f64,
    pub elements_value_phase: f64,
    pub baseline_elements: f64,
    pub predicted_ratio: f64,
    pub measured_ratio: f64,
}

impl TrafficReport {
    /// Assembles a report for one decode step over `s` cached tokens with
    /// `selected` tokens kept.
    pub fn from_counter(
        counter: &TrafficCounter,
        s: usize,
        nd: usize,
        latent_rank: usize,
        score_rank: usize,
        selected: usize,
    ) -> Self {
        let baseline = 2.0 * s as f64 * nd as f64;
        let predicted =
            (s as f64 * score_rank as f64 + 2.0 * selected as f64 * latent_rank as f64) / baseline;
        Self {
            elements_score_phase: counter.score_elements(),
            elements_reconstruct_phase: counter.reconstruct_elements(),
            elements_value_phase: counter.value_elements(),
            baseline_elements: baseline,
            predicted_ratio: predicted,
            measured_ratio: counter.total() / baseline,
        }
    }

    pub fn total_elements(&self) -> f64 {
        self.elements_score_phase + self.elements_reconstruct_phase + self.elements_value_phase
    }

    /// Element-wise sum; ratios are recomputed over the summed baseline.
    pub fn accumulate(&mut self, other: &TrafficReport) {
        self.elements_score_phase += other.elements_score_phase;
        self.elements_reconstruct_phase += other.elements_reconstruct_phase;
        self.elements_value_phase += other.elements_value_phase;
        let old_predicted = self.predicted_ratio * self.baseline_elements
            + other.predicted_ratio * other.baseline_elements;
        self.baseline_elements += other.baseline_elements;
        if self.baseline_elements > 0.0 {
            self.predicted_ratio = old_predicted / self.baseline_elements;
            self.measured_ratio = self.total_elements() / self.baseline_elements;
        }
    }

    pub fn zero() -> Self {
        Self {
            elements_score_phase: 0.0,
            elements_reconstruct_phase: 0.0,
            elements_value_phase: 0.0,
            baseline_elements: 0.0,
            predicted_ratio: 0.0,
            measured_ratio: 0.0,
        }
    }
}
