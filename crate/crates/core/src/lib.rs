//! Knowledge tracing over a concept/question graph with text-derived
//! vertex features and a recurrent student state.

pub mod cli;
pub mod corpus;
pub mod embed;
pub mod encoder;
pub mod eval;
pub mod error;
pub mod graph;
pub mod model;
pub mod student;
pub mod synthetic;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
