//! Sparse attention over a compressed key/value cache.
//!
//! Keys are stored once, pre-rotation, in a shared low-rank latent space
//! learned from the keys themselves. Decode steps score every cached token
//! with a truncated latent dot product, keep a small set of sink, recent,
//! and high-scoring tokens, reconstruct only those keys to full width,
//! rotate them at their original positions, and run exact softmax
//! attention over the survivors. Values travel quantized and are restored
//! on the same selected subset.
//!
//! The crate is organized bottom-up:
//!
//! - [`tensor`]: dense row-major f32 matrices and their binary file format
//! - [`config`]: run configuration, defaults, validation
//! - [`rope`]: rotary position tables and their application
//! - [`eigen`]: a dependency-free symmetric eigensolver
//! - [`synth`]: seeded synthetic key generators with known spectra
//! - [`calibration`]: covariance accumulation and projection fitting
//! - [`quant`]: grouped linear quantization for cached values
//! - [`cache`]: the latent key/value cache and its access paths
//! - [`selection`]: truncated-score token selection and its quality metrics
//! - [`attention`]: the decode step that ties the pipeline together
//! - [`reference`]: exact and low-rank baselines to measure against
//! - [`analysis`]: spectrum ranks, the bandwidth model, reconciliation
//! - [`traffic`]: element-movement accounting shared by all of the above

pub mod analysis;
pub mod attention;
pub mod cache;
pub mod calibration;
pub mod config;
pub mod eigen;
pub mod error;
pub mod quant;
pub mod reference;
pub mod rope;
pub mod selection;
pub mod synth;
pub mod tensor;
pub mod traffic;

pub use analysis::{
    memory_speedup, rank_at_variance, reconcile_traffic, rope_rank_demo, MemoryModel,
    SpectrumReport, TrafficReconciliation,
};
pub use attention::{
    dense_decode_step, prefill, sals_decode_step, sparse_attention_over, AttentionOutput,
};
pub use cache::{
    append_token, gather_values, project_key, reconstruct_keys, CacheSnapshot, LatentKvCache,
};
pub use calibration::{
    captured_energy, compute_joint_projection, compute_per_head_projection,
    reconstruction_residual, Covariance, ProjectionKind, ProjectionMatrix,
};
pub use config::{
    AttentionConfig, PlantedToken, RunConfig, SelectionPolicy, SyntheticSpec,
    DEFAULT_CRITICAL_BUDGET, DEFAULT_QUANT_GROUP, DEFAULT_RECENT_WINDOW, DEFAULT_ROPE_BASE,
    DEFAULT_SINK, DEFAULT_VALUE_BITS,
};
pub use eigen::jacobi_eigh;
pub use error::{Result, SalsError};
pub use quant::{quantize_value, QuantizedVector};
pub use reference::{attend_one, full_attention, post_rope_lowrank_attention, pre_rope_lowrank_full};
pub use rope::{apply_rope, apply_rope_batch, apply_rope_inplace, PairingConvention, RotaryTable};
pub use selection::{
    latent_scores, overlap_score, pool_query_heads, select_topk, selection_recall, RecallReport,
    TokenSelection,
};
pub use synth::{generate_gaussian, generate_keys, planted_direction, random_projection};
pub use tensor::{read_tensor, read_tensor_bytes, write_tensor, DenseMatrix};
pub use traffic::{TrafficCounter, TrafficMode, TrafficReport};
