//! collapselab: a numerical lab for studying what replay does to feature
//! geometry in continual learning.
//!
//! The library is organized around one question: when a network forgets, did
//! the *features* degrade (deep forgetting) or only the *classifier on top*
//! (shallow forgetting)? The modules build the machinery to ask that question
//! quantitatively:
//!
//! - [`geometry`]: simplex equiangular tight frames, Gram closed forms,
//!   active subspaces and projections.
//! - [`stats`]: per-class moments, the collapse metric suite (within-class
//!   variance, equiangularity, self-duality, nearest-mean agreement,
//!   off-subspace projection), SNR and Mahalanobis separability.
//! - [`dynamics`]: closed-form terminal-phase decay of out-of-distribution
//!   features, replay mixture model, Monte-Carlo samplers, predicted SNR
//!   curves, buffer concentration bounds.
//! - [`separability`]: linear probes (multinomial logistic regression),
//!   discriminant-analysis counterfactuals, a brute-force linear oracle.
//! - [`learner`]: a from-scratch MLP with hand-coded backprop, single- and
//!   multi-head modes, decoupled weight decay, flat binary checkpoints.
//! - [`continual`]: task streams, class-incremental / domain-incremental /
//!   task-incremental protocols, task-balanced replay buffers, forgetting
//!   matrices for heads and probes.
//! - [`acceptance`]: the end-to-end criteria suite shared by the
//!   `acceptance` integration test target and `collapselab validate`.
//!
//! Everything that consumes randomness takes an explicit seed and is
//! deterministic per seed; the `parallel` feature (on by default) runs the
//! data-parallel inner loops on rayon without changing any output bit
//! (see [`exec`]).

pub mod exec;
pub mod geometry;
pub mod stats;
pub mod dynamics;
pub mod separability;
pub mod learner;
pub mod continual;
pub mod acceptance;

pub use geometry::{build_simplex_etf, SimplexEtf, Subspace};
pub use stats::{ClassStats, LabeledFeatures, Split};
pub use dynamics::{MixtureParams, Schedule, TptParams};
pub use separability::LinearClassifier;
pub use learner::{Model, ModelConfig, Scenario};
pub use continual::{ReplayBuffer, RunResult, TaskStream};
