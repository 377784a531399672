pub mod basis;
#[cfg(doctest)]
mod book;
pub mod cli;
pub mod crossbasis;
pub mod effects;
pub mod error;
pub mod fit;
pub mod linalg;
pub mod model;
pub mod modtest;
mod optim;
mod reml;
pub mod simlab;

pub use error::{DlimError, Result};
