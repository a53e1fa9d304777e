#![no_std]

extern crate alloc;

pub mod error;
pub mod tensor;

pub use error::{Error, Result};
pub mod model;
pub mod objectives;
pub mod optim;
pub mod eval;
pub mod train;
