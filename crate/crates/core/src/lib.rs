pub mod autodiff;
pub mod action_decoder;
pub mod datamodel;
pub mod decision_block;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod inference;
pub mod ingest;
pub mod model;
pub mod reward_prompt;
pub mod training;

pub use error::{Error, ErrorKind, Result};
