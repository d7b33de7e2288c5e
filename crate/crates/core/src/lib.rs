//! Profile-driven post-link code layout on an explicit program model.
//!
//! The pipeline mirrors a post-link optimizer: parse the program model,
//! attribute branch-stack or IP samples to it, reconcile the edge profile,
//! run the layout passes and assign final addresses, then measure the
//! result with dynamic branch statistics, a cache/TLB model and heat maps.

pub mod error;
pub mod eval;
pub mod model;
pub mod passes;
pub mod profile;
pub mod trace;
pub mod workload;

pub use error::{EvalError, ModelError, PassError, ProfileError};
