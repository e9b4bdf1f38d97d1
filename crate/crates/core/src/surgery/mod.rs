//! Checkpoint surgery: layer removal and width slicing driven by
//! declarative prune specs, plus candidate-grid parameter accounting.

mod grid;
mod ops;
mod plan;
mod spec;

pub use grid::*;
pub use ops::*;
pub use plan::*;
pub use spec::*;
