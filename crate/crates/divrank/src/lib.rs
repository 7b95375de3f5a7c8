//! File formats, experiment orchestration and the command-line front end for
//! [`divrank_core`].
//!
//! - [`corpus_io`]: the two-file `DRC1` corpus format.
//! - [`checkpoint`]: trained models and bank in one checksummed file.
//! - [`config`]: flat `key=value` experiment configuration.
//! - [`pipeline`]: training stages, query-parallel retrieval, ablation sweeps.
//! - [`report`]: run files (JSON lines) and metric tables (CSV).
//! - [`export`]: 2-D PCA of raw and re-encoded features.

pub mod checkpoint;
pub mod config;
pub mod corpus_io;
pub mod error;
pub mod export;
pub mod pipeline;
pub mod report;

pub use error::{Error, FormatError, Result};
