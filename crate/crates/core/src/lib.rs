// NaN-rejecting `!(x > 0.0)` guards and index loops over parallel buffers are deliberate.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod checkpoint;
pub mod checks;
pub mod config;
pub mod datagen;
pub mod error;
pub mod evalkit;
pub mod losses;
pub mod maskplan;
pub mod model;
pub mod numerics;
pub mod params;
pub mod seed;
pub mod tokenize;
pub mod train;

pub use error::{Error, Result};
