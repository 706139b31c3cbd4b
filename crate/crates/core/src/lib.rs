//! Query-bag matching: decide whether a user query asks the same question
//! as a bag of paraphrased questions.

pub mod autodiff;
pub mod checkpoint;
pub mod dataset;
pub mod diagnostics;
pub mod error;
pub mod eval;
pub mod index;
pub mod model;
pub mod pipeline;
pub mod synth;
pub mod text;
pub mod train;
pub mod union_find;

pub use error::{QbmError, Result};
