//! Diversity-aware embedding retrieval.
//!
//! The pipeline has three learned or rule-based stages layered on top of a
//! fixed embedding encoder:
//!
//! 1. [`reencoder`] applies a small residual MLP to every image feature. It is
//!    trained by the prototype-aware contrastive objective in [`scl`].
//! 2. [`token_classifier`] treats the query and its nearest candidates as a
//!    token set and labels each token with a semantic category (or as
//!    irrelevant) using a transformer encoder from [`nn`].
//! 3. [`retrieval::post_process`] draws a fixed number of images from each
//!    predicted category to build the final ranked list.
//!
//! [`metrics`] scores ranked lists for relevance (P@k), diversity (CR@k) and
//! their harmonic balance (F1@k). Baselines (top-k, MMR, filter + DBSCAN) live
//! alongside the main retrieval path for comparison.
//!
//! The crate is `no_std` (with `alloc`); file formats and the CLI live in the
//! `divrank` companion crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod augmentation;
pub mod corpus;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod reencoder;
pub mod retrieval;
pub mod scl;
pub mod token_classifier;

pub use error::{Error, Result};
