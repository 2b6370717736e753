//! Command line and HTTP front ends for the layout generator.

pub mod commands;
pub mod engine;
pub mod error;
pub mod server;
pub mod svg;

pub use error::{exit, AppError, AppResult};
