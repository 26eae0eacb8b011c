//! Unsupervised domain adaptation for regression on feature vectors.
//!
//! The toolkit trains dense regression networks on a labeled source
//! domain and adapts them to an unlabeled target domain, with:
//!
//! - pairwise difference + ranking heads over concatenated input pairs
//! - adversarial (gradient-reversal) and MMD feature alignment on named
//!   layers
//! - identity/antisymmetry constraints and graph-Laplacian smoothing
//! - SMACOF metric MDS to recover absolute values from predicted pairwise
//!   differences, anchored by two labeled items
//!
//! Data comes from a seeded synthetic domain-shift generator or from
//! delimiter-separated embedding files; every run is a deterministic
//! function of its configuration.

pub mod data;
pub mod error;
pub mod loss;
pub mod mds;
pub mod model;
pub mod net;
pub mod optim;
pub mod trainer;

pub use error::{Error, Result};
