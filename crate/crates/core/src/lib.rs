pub mod corpus;
pub mod error;
pub mod io;
pub mod model;
pub mod surgery;
pub mod tokenizer;
pub mod train;
pub mod tensor;

pub use error::{GraftError, Result};
