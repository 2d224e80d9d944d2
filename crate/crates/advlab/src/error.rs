use thiserror::Error;

/// Unified error type for the whole crate.
///
/// Contract violations (bad arguments, dimension mismatches) are distinguished
/// from numerical failures and I/O/format problems because the CLI maps them to
/// different exit codes: 1 for contract violations and numerical failures, 2
/// for I/O and format errors.
#[derive(Debug, Error)]
pub enum Error {
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("singular system: {0}")]
    SingularSystem(String),

    #[error("eigensolver exceeded the iteration cap of {cap} sweeps on a {n}x{n} matrix")]
    ConvergenceFailure { n: usize, cap: usize },

    #[error("format error: {0}")]
    Format(String),

    #[error("empty evaluation set: the target model classifies no sample of the attack subset correctly")]
    EmptyEvaluationSet,

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Tag an error with the pipeline stage it occurred in (harness runs).
    pub fn in_stage(self, stage: &str) -> Error {
        Error::Stage { stage: stage.to_string(), source: Box::new(self) }
    }

    /// CLI exit code: 1 for contract/numerical errors, 2 for I/O and format errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Format(_) | Error::Io(_) => 2,
            Error::Stage { source, .. } => source.exit_code(),
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

/// Bail out with a `Contract` error when a precondition fails.
///
/// Matching on the condition (rather than `if !cond`) keeps float
/// preconditions NaN-rejecting without tripping clippy's negated-comparison
/// lint: `ensure!(x >= 0.0, ..)` must fail for NaN, and `x >= 0.0` is simply
/// `false` there.
macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        match $cond {
            true => {}
            false => return Err($crate::error::Error::Contract(format!($($arg)+))),
        }
    };
}
pub(crate) use ensure;
