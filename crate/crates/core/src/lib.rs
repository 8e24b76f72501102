//! Second-order graph-based dependency parsing with mean-field inference
//! unrolled into a differentiable network.
//!
//! The pipeline for one sentence is: [`scorer`] produces first-order edge
//! and label scores plus sibling and grandparent scores, [`decoder`] runs
//! a fixed number of mean-field updates in either the head-selection
//! (`Local`) or independent-edge (`Single`) formulation, and [`tree`] turns
//! the posteriors into a well-formed tree. [`trainer`] fits the scorer
//! end to end through the unrolled updates.

pub mod bench;
pub mod conllu;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod oracle;
pub mod pipeline;
pub mod scorer;
pub mod scores;
pub mod tape;
pub mod trainer;
pub mod tree;

pub use decoder::{Formulation, Variant};
pub use error::{Error, Result};
