use std::io;
use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    /// `line` and `column` are one-based.
    #[error("{source_name}:{line}:{column}: {message}")]
    Parse {
        source_name: String,
        line: usize,
        column: usize,
        message: String,
    },

    #[error(transparent)]
    Core(#[from] sigrot::Error),

    #[error(
        "gradient check failed: max relative error {max_error:.3e} is not below {tolerance:.0e}"
    )]
    GradcheckFailed { max_error: f64, tolerance: f64 },
}

pub type CliResult<T> = std::result::Result<T, CliError>;

impl CliError {
    pub fn parse(
        source_name: &str,
        line: usize,
        column: usize,
        message: impl Into<String>,
    ) -> Self {
        CliError::Parse {
            source_name: source_name.to_string(),
            line,
            column,
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    /// 1 for usage errors, 2 for bad input data, 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        use sigrot::Error as E;
        match self {
            CliError::Usage(_) => 1,
            CliError::Io { .. } | CliError::Parse { .. } => 2,
            CliError::GradcheckFailed { .. } => 3,
            CliError::Core(e) => match e {
                E::NonFinite(_) | E::NearZeroNorm { .. } | E::NonFiniteGradient(_) => 3,
                E::InvalidConfig(_) => 1,
                _ => 2,
            },
        }
    }
}
