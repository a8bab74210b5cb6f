#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::too_many_arguments,
    clippy::type_complexity
)]

pub mod cli;
pub mod controllability;
pub mod coupling;
pub mod diagnostics;
pub mod dynamics;
pub mod error;
pub mod galerkin;
pub mod gallery;
mod jet;
pub mod linalg;
pub mod network;
pub mod noise;
pub mod pdmp;
pub mod rng;

pub use error::{Error, Result};
