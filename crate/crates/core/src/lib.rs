//! Open-vocabulary detection pre-training at desk scale.
//!
//! The crate covers the unified triplet data formulation ([`corpus`]), toy
//! dual-stream encoders with a deformable gradient bridge ([`encoder`]),
//! ATSS target assignment and detection losses ([`assign`]), word-region
//! alignment contrastive learning ([`wra`]), the alternating joint trainer
//! ([`trainer`]) and zero-shot evaluation ([`evalx`]).

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod assign;
pub mod autograd;
pub mod corpus;
pub mod encoder;
pub mod error;
pub mod evalx;
pub mod rng;
pub mod trainer;
pub mod wra;

pub use error::{Error, Result};

#[cfg(test)]
pub(crate) mod testutil;
