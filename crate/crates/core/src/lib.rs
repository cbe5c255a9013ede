//! Context-aware memory for long-context, paragraph-level sequence generation.

pub mod attention;
pub mod cam;
pub mod config;
pub mod corpus;
pub mod error;
pub mod lclm;
pub mod pipeline;
pub mod tensorcore;
pub mod train;

pub use error::{Error, Result};
