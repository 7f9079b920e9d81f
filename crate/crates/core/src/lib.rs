//! Knowledge tracing over concept hierarchies, next-concept selection,
//! question/concept alignment scoring and practice simulation.

pub mod bank;
pub mod engine;
pub mod generator;
pub mod policy;
pub mod simulator;
pub mod synth;
pub mod tree;
pub mod verifier;

#[cfg(test)]
mod testutil;

pub use engine::{
    Difficulty, EngineError, InteractionRecord, Kt2Params, PosteriorState, StudentHistory,
};
pub use tree::{load_tree, KcId, KcNode, KcTree, TreeError};
