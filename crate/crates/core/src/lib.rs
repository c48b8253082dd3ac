//! Alignment dynamics of interacting agents with sparse and distributed
//! feedback controls.

pub mod analysis;
pub mod cloud;
pub mod controllability;
pub mod controls;
pub mod dynamics;
pub mod error;
pub mod kernel;
pub mod optimal;
pub mod quadrature;

pub use cloud::{AgentCloud, Diagnostics};
pub use controls::{ControlVector, Feedback};
pub use error::{Error, Result};
pub use kernel::CommKernel;
