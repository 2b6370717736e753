//! Controllable layout generation with a bidirectional layout transformer:
//! masked training over attribute groups and iterative-refinement decoding
//! that never touches user-locked attributes.

pub mod ablation;
pub mod bench;
pub mod dataset;
pub mod decoder;
pub mod error;
pub mod layout;
pub mod masking;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
