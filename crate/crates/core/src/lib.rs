//! Long-input encoder-decoder inference by retrieving encoder states from a
//! single shared k-nearest-neighbour index.

pub mod chunker;
pub mod cli;
pub mod error;
pub mod evalbench;
pub mod knn_index;
pub mod model;
pub mod numerics;
pub mod retrieval;
pub mod training;

pub use error::{Error, Result};
