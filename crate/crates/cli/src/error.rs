use std::fmt;

/// Either a usage problem (exit 2) or a pipeline failure (exit 1).
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Domain(w2w_core::Error),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Domain(_) => 1,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "UsageError",
            CliError::Domain(e) => e.kind(),
        }
    }

    /// Single-line JSON record for standard error.
    pub fn record(&self) -> String {
        serde_json::json!({ "error": self.kind(), "message": self.to_string() }).to_string()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Domain(e) => write!(f, "{e}"),
        }
    }
}

impl From<w2w_core::Error> for CliError {
    fn from(e: w2w_core::Error) -> Self {
        CliError::Domain(e)
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Domain(e.into())
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;
