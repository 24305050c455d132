//! KV-cache eviction with output-aware saliency scores.
//!
//! The crate is organised bottom-up:
//!
//! - [`attention`]: dense single-head attention and incremental decode steps
//! - [`saliency`]: closed-form per-token eviction scores and their decode-time accumulator
//! - [`oracle`]: brute-force eviction errors used as ground truth
//! - [`policy`]: budgeted top-k selection with sinks, recency and pooling, plus host presets
//! - [`cache`]: the KV store with original-position tracking
//! - [`workload`]: seeded generators and the binary trace container
//! - [`harness`]: experiment drivers shared by the CLI and the Python bindings
//!
//! ```
//! use kvevict::{gen_random, score, ScorerKind};
//!
//! let inst = gen_random(16, 8, 16, 0);
//! let s = score(&inst, ScorerKind::Joint, 9).unwrap();
//! assert_eq!(s.len(), 16);
//! assert!(s.scores.iter().all(|&x| x >= -1e-12));
//! ```

pub mod attention;
pub mod cache;
pub mod error;
pub mod harness;
pub mod matrix;
pub mod oracle;
pub mod policy;
pub mod saliency;
pub mod workload;

pub use attention::{decode_step, window_start_for_size, AttentionInstance, DecodeStep, TokenStep};
pub use cache::KvCache;
pub use error::{Error, ErrorClass, Result};
pub use matrix::Matrix;
pub use oracle::{
    exact_eviction_error, exact_eviction_errors, taylor_residual, topk_recall, topk_recall_reserved,
    true_eviction_error, true_eviction_errors, OracleReport, PruneKind, PruneMode, Semantics,
};
pub use policy::{
    decode_evict_loop, pool_scores, preset, select_retained, DecodeSimulator, EvictionDecision, Phase, PolicyConfig,
    Preset, StepRecord,
};
pub use saliency::{score, JointParts, SaliencyVector, ScoreAccumulator, ScorerKind};
pub use workload::{gen_decode_trace, gen_needle, gen_random, NeedleSpec};
