use thiserror::Error;

/// Errors produced anywhere in the pruning pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("backward already ran on this tape; double-backward is not supported")]
    BackwardTwice,

    #[error("invalid gene: {0}")]
    InvalidGene(String),

    #[error("invalid template: {0}")]
    InvalidTemplate(String),

    #[error("unknown template `{0}`")]
    UnknownTemplate(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("latency table has no entry for layer {layer} (c_in={c_in}, c_out={c_out})")]
    MissingLatency {
        layer: usize,
        c_in: usize,
        c_out: usize,
    },

    #[error(
        "constraint infeasible: minimum-width gene costs {min_cost} but the budget is {budget} \
         (no feasible gene found in {attempts} attempts)"
    )]
    Infeasible {
        min_cost: f64,
        budget: f64,
        attempts: usize,
    },

    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },

    #[error("evaluator failed on gene {gene}: {message}")]
    Evaluator { gene: String, message: String },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
