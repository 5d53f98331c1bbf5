use crate::model::RewardTable;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid space: {0}")]
    Space(String),

    #[error("invalid policy: {0}")]
    Policy(String),

    #[error("invalid reward table: {0}")]
    Reward(String),

    #[error("value out of domain: {0}")]
    Domain(String),

    /// A probability that must be positive is zero.
    #[error("support violation at prompt {prompt}, response {response}")]
    Support { prompt: usize, response: usize },

    #[error("annotator kind mismatch: {0}")]
    Kind(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    /// The optimizer hit its iteration cap; `last` is the final iterate.
    #[error("no convergence after {iterations} iterations (gradient sup-norm {grad_norm:.3e})")]
    Convergence {
        iterations: usize,
        grad_norm: f64,
        last: Box<RewardTable>,
    },

    #[error("cannot normalize labeler `{labeler}`: {reason}")]
    Normalization { labeler: String, reason: String },

    #[error("invalid counterexample: {0}")]
    Construction(String),

    #[error("instance invariant violated: {0}")]
    InstanceInvariant(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("need at least {needed} records, found {found}")]
    TooFewRecords { needed: usize, found: usize },

    #[error("line {line}: field `{field}`: {reason}")]
    Parse {
        line: usize,
        field: String,
        reason: String,
    },

    #[error("line {line}: duplicate id `{id}`")]
    Duplicate { line: usize, id: String },

    #[error("refusing to overwrite existing file {0}")]
    Exists(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
