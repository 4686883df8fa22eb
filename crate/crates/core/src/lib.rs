//! Desk-scale laboratory for training small reasoning policies.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod io;
pub mod objectives;
pub mod optim;
pub mod pipeline;
pub mod policy;
pub mod recipe;
pub mod rollout;
pub mod seed;
pub mod stages;
pub mod task;
pub mod verifier;
pub mod vocab;

pub use error::{Error, Result};
