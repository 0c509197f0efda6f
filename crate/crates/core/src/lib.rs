pub mod corpus;
pub mod error;
pub mod evalsuite;
pub mod numcore;
pub mod priors;
pub mod seqmodel;
pub mod training;

pub use error::{Error, Result};
