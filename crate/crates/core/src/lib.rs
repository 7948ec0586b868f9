//! Conversational recommendation planned with Monte Carlo tree search.
//!
//! The crate covers the whole pipeline: a catalog of users, items and
//! attribute values; a rule-based conversational environment; a graph-based
//! state encoder; a hierarchical policy/Q agent; an MCTS planner; the
//! self-training loop; evaluation with baselines; and checkpoint I/O.

pub mod agent;
pub mod catalog;
pub mod checkpoint;
pub mod config;
pub mod encoder;
pub mod env;
pub mod eval;
pub mod par;
pub mod params;
pub mod planner;
pub mod replay;
pub mod tape;
pub mod tensor;
pub mod training;

pub use catalog::{Catalog, CatalogError, SyntheticSpec};
pub use env::{Action, ActionKind, ConversationState, EpisodeConfig, RewardConstants, Status};
