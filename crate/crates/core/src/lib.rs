//! Image and mask types, instruction parsing, target selection,
//! pre-processing, recombination, metrics and the synthetic shapes dataset.

pub mod backend;
pub mod classifier;
pub mod combiner;
pub mod embedding;
pub mod error;
pub mod image;
pub mod instruction;
pub mod io;
pub mod metrics;
pub mod par;
pub mod preproc;
pub mod synth;

pub use error::{Error, Result, Stage, StageExt};
