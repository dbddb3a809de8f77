//! Desk-scale lab for visually grounded speech and the mutual-exclusivity bias.

pub mod analyze;
pub mod cli;
pub mod container;
pub mod evaltest;
pub mod featurize;
pub mod losses;
pub mod model;
pub mod parallel;
pub mod stats;
pub mod synthgen;
pub mod tensor;
pub mod train;
