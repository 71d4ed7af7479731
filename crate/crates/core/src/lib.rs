//! Deterministic simulator of privacy-preserving federated learning for
//! multi-site functional-connectivity classification.
//!
//! The crate is organised bottom-up:
//!
//! - [`nn`]: dense/ReLU/BatchNorm/dropout networks with exact backprop and Adam.
//! - [`data`]: sliding windows, Pearson/Fisher-z connectivity features, site-wise
//!   z-scoring, stratified subject folds, CSV ingestion and a synthetic
//!   multi-site generator with planted markers.
//! - [`privacy`]: Gaussian/Laplace weight perturbation and nominal budgets.
//! - [`federation`]: local steps, noised averaging, broadcast, and the
//!   non-federated baseline strategies.
//! - [`adaptation`]: mixture-of-experts gating and adversarial feature alignment.
//! - [`interpret`]: guided-gradient saliency, ROI scores and cross-site consistency.
//! - [`harness`]: configuration, evaluation, statistics and experiment drivers.

pub mod adaptation;
pub mod data;
pub mod error;
pub mod federation;
pub mod harness;
pub mod interpret;
pub mod nn;
pub mod privacy;
pub mod rng;

pub use error::{Error, Result};
