//! Continual learning over frozen embeddings with prototype-guided text
//! prompt selection.
//!
//! A prototype bank acts as a cosine "vision" classifier. Each prototype is
//! paired with a learnable prompt block; for an input feature the prompt of
//! the most similar prototype is scaled by that similarity, combined with
//! every class-name token, and encoded into a "text" classifier. Both
//! classifiers are trained per task, older rows are frozen on expansion, and
//! inference averages the two score vectors.

// `!(x > 0.0)` is how NaN gets rejected; index loops mirror the matrix algebra.
#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::needless_range_loop,
    clippy::too_many_arguments
)]

pub mod artifacts;
pub mod checkpoint;
pub mod config;
pub mod embedding_io;
pub mod encoders;
pub mod error;
pub mod evaluator;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod scenarios;
pub mod trainer;

pub use error::{Error, Result};
