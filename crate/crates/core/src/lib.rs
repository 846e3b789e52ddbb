pub mod cache;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod model;
pub mod numerics;
pub mod tfidf;
pub mod training;

pub use error::{Error, Result};
