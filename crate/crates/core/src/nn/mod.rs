//! Dense numerical building blocks: matrices, seeded random streams, a named
//! parameter store, hand-derived forward/backward rules for the layers used by
//! the re-encoder and the token classifier, Adam, and a finite-difference
//! gradient checker.

mod adam;
mod gradcheck;
mod layers;
mod matrix;
mod param;
mod rng;
pub mod transformer;

pub use adam::{Adam, AdamConfig};
pub use gradcheck::{grad_check, GradCheckReport, Objective};
pub use layers::{
    gelu, gelu_backward, layer_norm_backward, layer_norm_forward, linear_backward,
    linear_forward, softmax_cross_entropy, softmax_in_place, LayerNormCache, LinearGrads,
};
pub use matrix::{dot, norm, Matrix};
pub use param::ParamStore;
pub use rng::RngStream;
pub use transformer::{
    encoder_backward, encoder_forward, init_encoder, transformer_encoder_forward,
    EncoderCache, TransformerConfig,
};
