use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("power iteration did not converge within {max_iter} iterations (last estimate {last})")]
    NoConvergence { max_iter: usize, last: f64 },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("requested CP rank {requested} exceeds the admissible cap {cap}")]
    RankCap { requested: usize, cap: usize },

    #[error("layer {layer}: {msg}")]
    Layer { layer: usize, msg: String },

    #[error("compression plan infeasible at layer {layer}: {msg}")]
    Infeasible { layer: usize, msg: String },

    #[error("verification failed: sample {sample} has relative residual {residual} > epsilon {epsilon}")]
    VerificationFailed {
        sample: usize,
        residual: f64,
        epsilon: f64,
    },

    #[error("training diverged (non-finite loss) at epoch {epoch}")]
    Diverged { epoch: usize },
}

pub type Result<T> = std::result::Result<T, CoreError>;
