//! Files, configs, the synthetic corpus and the command line around the
//! `clipladder-core` crate.

mod binary;
pub mod cli;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod dataset;
pub mod error;
pub mod evaluate;
pub mod observer;
pub mod report;
pub mod tensor_file;
pub mod tokenizer;

pub use error::{Error, Result};
