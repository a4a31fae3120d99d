#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod grid;
pub mod loss;
pub mod model;
pub mod ot;
pub mod scene;
pub mod tensor_io;
pub mod track_file;
pub mod train;
pub mod viz;

pub use error::{Error, Result};
