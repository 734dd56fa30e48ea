//! Evaluation harness for multi-turn intrinsic self-correction experiments.

pub mod analysis;
pub mod backend;
pub mod config;
pub mod datasets;
pub mod pipeline;
pub mod extract;
pub mod prompts;
pub mod theory;
