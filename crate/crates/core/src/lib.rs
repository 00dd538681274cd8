//! Elastic architecture search for compact transformer language models.

pub mod analysis;
pub mod archspace;
pub mod corpus;
pub mod distill;
pub mod elastic;
pub mod error;
pub mod evosearch;
pub mod metrics;
pub mod numkernel;
pub mod optim;
pub mod pipeline;
pub mod supernet;

pub use error::{ElmError, Result};
