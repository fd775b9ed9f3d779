pub mod decoder;
pub mod error;
pub mod evalkit;
pub mod nn;
pub mod prompt;
pub mod scene;
pub mod svg;
pub mod tokenizer;
pub mod trainpipe;
pub mod vpg;
pub mod vpgc;

pub use error::{Error, Result};
