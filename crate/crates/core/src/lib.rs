pub mod elements;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod graphemb;
pub mod jsonl;
pub mod structures;
pub mod synthetic;
pub mod textgen;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
pub use numerics::{self, write_atomic};
