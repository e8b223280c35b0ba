//! Multitask painting categorization: crop proposal, a three-branch residual network,
//! hand-crafted descriptors, dataset rules, training and per-task similarity search.

pub mod dataset;
pub mod descriptors;
pub mod imaging;
pub mod net;
pub mod nn;
pub mod probe;
pub mod retrieval;
pub mod roi;
pub mod synth;
pub mod train;
