//! Self-tuning of the discount factor with MG and BMG meta-gradients, the
//! outer-loss advantage bias of reusing the inner critic, and its removal
//! with an outer value head.

pub mod autodiff;
pub mod error;

pub use error::{Error, Result};
pub mod envs;
pub mod agent;
pub mod diagnostics;
pub mod meta;
pub mod experiment;
