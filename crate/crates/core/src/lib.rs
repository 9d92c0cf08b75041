//! Simulation and KL control of growing networks.

pub mod error;
pub mod exact_solver;
pub mod ce_trainer;
pub mod closed_loop;
pub mod growth_models;
pub mod path_sampler;
pub mod rng;
pub mod tree_state;

pub use error::{Error, Result};
pub use tree_state::{GrowingTree, Label, ParentVector, NO_NODE, ROOT};
