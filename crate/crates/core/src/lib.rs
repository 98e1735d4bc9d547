//! Sensor placement driven by epistemic uncertainty.
//!
//! A convolutional conditional neural process with a Gaussian-mixture output
//! head predicts, for any set of observed sensors, a mixture at every query
//! location. The mixture variance splits in closed form into an epistemic part
//! (disagreement between components) and an aleatoric part (spread within
//! components); greedy placement picks the candidate whose hypothetical
//! observation most reduces the mean remaining variance of either kind.

pub mod cli;
pub mod eval;
pub mod model;
pub mod placement;
pub mod selftest;
pub mod tasks;
pub mod tensor;
pub mod train;
pub mod uncertainty;
