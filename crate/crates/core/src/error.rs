use thiserror::Error;

use crate::tree_state::Label;

#[derive(Debug, Error)]
pub enum Error {
    #[error("label {label} is out of range for a tree with {node_count} nodes")]
    InvalidLabel { label: Label, node_count: usize },

    #[error("the normalized Wiener index is undefined for a single-node tree")]
    UndefinedNormalization,

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("degenerate model: every attachment weight is zero at t = {t}")]
    DegenerateModel { t: usize },

    #[error("invalid corpus: {0}")]
    Ingestion(String),

    #[error("fit did not converge after {iterations} iterations (nll = {nll}, |grad| = {grad_norm}): {reason}")]
    FitFailure {
        iterations: u64,
        nll: f64,
        grad_norm: f64,
        reason: String,
    },

    #[error("state space exceeds the cap at layer t = {layer}: more than {cap} states")]
    Capacity { layer: usize, cap: usize },

    #[error("state {state} is not present in layer t = {t}")]
    MissingState { state: String, t: usize },

    #[error("degenerate batch: every importance weight is zero or non-finite")]
    DegenerateBatch,

    #[error("successor {label} is in the marginal support but has zero model probability")]
    Inconsistent { label: Label },

    #[error("training diverged at iteration {iteration}: {reason}")]
    TrainingFailure { iteration: usize, reason: String },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

pub type Result<T> = std::result::Result<T, Error>;
