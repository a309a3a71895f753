//! Hybrid pre-training for person search: joint pedestrian detection and
//! re-identification trained from detection and re-ID sub-task corpora.

pub mod cli;
pub mod corpus;
pub mod evaluator;
pub mod geometry;
pub mod iam;
pub mod model;
pub mod objectives;
pub mod raster;
pub mod seed;
pub mod trainer;
pub mod unification;
