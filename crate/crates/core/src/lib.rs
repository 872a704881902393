//! Training-free model merging with centered, rank-reduced task vectors.

pub mod adaptation;
pub mod error;
pub mod exec;
pub mod interference;
pub mod linalg;
pub mod merge;
pub mod origin;
pub mod rng;
pub mod suites;
pub mod tensor_store;
pub mod theorem;

pub use error::{Error, Result};
pub use exec::Execution;
