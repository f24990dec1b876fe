//! tracelab: execution-grounded synthesis and evaluation of multi-step
//! tool-use trajectories over a typed scientific tool space.
//!
//! The crate is organized around the data flow of a synthesis run:
//! a [`toolkit`] corpus is loaded from a manifest, [`depgraph`] derives the
//! per-domain tool dependency graph, [`sampler`] draws executable program
//! graphs backward from goal tools, [`executor`] runs them forward into
//! verified traces, [`questiongen`] turns traces into concealed natural
//! language problems, and [`agent`]/[`evaluator`]/[`analyzer`] close the
//! loop by running and scoring episodes. [`pipeline`] orchestrates the
//! whole run from a single config.

pub mod value;
pub mod typesys;
pub mod toolkit;
pub mod depgraph;
pub mod sampler;
pub mod executor;
pub mod questiongen;
pub mod task;
pub mod agent;
pub mod evaluator;
pub mod analyzer;
pub mod pipeline;
