//! Self-audited belief generation, diverse selection, typed auditing and
//! minimal repair of LLM reasoning trajectories.

pub mod audit;
pub mod backend;
pub mod config;
pub mod eval;
pub mod features;
pub mod generation;
pub mod repair;
pub mod selection;
pub mod templates;
pub mod text;
pub mod trajectory;
