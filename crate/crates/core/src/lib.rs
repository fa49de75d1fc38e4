#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod cli;
pub mod data;
pub mod error;
pub mod flows;
pub mod grad;
pub mod kernel;
pub mod model;
pub mod prior;
pub mod special;
pub mod vi;

pub use error::{Error, Result};
