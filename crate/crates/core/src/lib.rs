//! Domain specialization of small transformer encoders for task-oriented
//! dialog: salient-term mining, corpus construction, specialization
//! objectives, adapters, and downstream evaluation.

pub mod adapters;
pub mod checks;
pub mod corpus;
pub mod data;
pub mod desk;
pub mod error;
pub mod eval;
pub mod neural;
pub mod objectives;
pub mod synth;
pub mod terms;

pub use error::{Error, Result};
