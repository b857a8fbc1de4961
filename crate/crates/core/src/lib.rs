//! Personalized query auto-completion with hierarchical interests and
//! reject-token detoxification.
//!
//! The crate covers the full pipeline: synthetic corpus generation
//! ([`corpus`]), a character vocabulary ([`vocab`]), interest capture
//! ([`interests`]), the encoder-decoder generator ([`glm`]), a rule-based
//! quality scorer ([`expert`]), reject preference training ([`rpo`],
//! [`train`]), offline evaluation ([`eval`]) and an HTTP completion service
//! ([`serving`]).

pub mod autograd;
pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod expert;
pub mod glm;
pub mod interests;
pub mod optim;
pub mod rng;
pub mod rpo;
pub mod serving;
pub mod tensor;
pub mod train;
pub mod vocab;

pub use error::{LadError, Result};
