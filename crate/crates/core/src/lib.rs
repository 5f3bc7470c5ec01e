//! Subgoal-tree planning for household manipulation tasks.
//!
//! A natural-language instruction becomes the root of a [`tree::SubgoalTree`].
//! A decomposition policy expands nodes one child at a time; a termination
//! check decides whether each new child is executed as a primitive action,
//! refined further, or thrown away for replanning.

pub mod decompose;
pub mod eval;
pub mod grammar;
pub mod llm;
pub mod planner;
pub mod terminate;
pub mod tree;
pub mod world;
