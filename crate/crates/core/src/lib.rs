//! Graph structure learning over longitudinal encounter sequences with
//! differentiable pooling into clinical modules.

pub mod cmd;
pub mod corpus;
pub mod error;
pub mod gsl;
pub mod head;
pub mod interpret;
pub mod numerics;
pub mod train;

pub use error::{Error, Result};
