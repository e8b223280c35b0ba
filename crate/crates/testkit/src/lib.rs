//! Independent reference implementations used to cross-check pictor.
//!
//! Everything here is written for clarity over speed: plain loops, no shared
//! helpers with the library code under test.

pub mod descriptors;
pub mod fixtures;
pub mod gradcheck;
pub mod metrics;
pub mod suites;
pub mod topk;
