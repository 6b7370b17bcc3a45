//! Parameter-level checkpoint merging.
//!
//! Task vectors are extracted against a shared base, optionally sparsified
//! (magnitude trimming, random drop-and-rescale, or activation-aware
//! saliency trimming), reconciled by sign consensus and added back to the
//! base. Frozen modules can be transplanted verbatim from a donor through
//! name-based routing rules.

pub mod commands;
pub mod error;
pub mod matrix;
pub mod mergers;
pub mod recipe;
pub mod rng;
pub mod saliency;
pub mod task_vectors;
pub mod tensor_store;
pub mod toynet;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use mergers::{Aggregation, MergeMethod, MergePolicy, Scope, SignWeights};
pub use saliency::{ActivationStats, HessianNorm, LayerBinding, LayerMap, SaliencyMap, SaliencyMode};
pub use task_vectors::{apply, compute_delta, Fingerprint, RouteAction, Routing, RoutingRule, TaskVector};
pub use tensor_store::{read_checkpoint, write_checkpoint, Checkpoint, DType, Tensor};

/// Donor identifier as used in recipes and merge maps.
pub type DonorId = String;
