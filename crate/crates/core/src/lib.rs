//! Instance recognition for individually patterned animals.

pub mod ann;
pub mod catalog;
pub mod features;
pub mod geometry;
pub mod harness;
pub mod matching;
pub mod pq;
pub mod scoring;
