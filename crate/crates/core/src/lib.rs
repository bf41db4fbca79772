//! Sequential subgoal optimization on small, fully enumerable
//! goal-conditioned environments.

pub mod annealer;
pub mod env;
pub mod error;
pub mod math;
pub mod models;
pub mod policy;
pub mod posterior;
pub mod rng;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Result, SegoError};
