use std::fmt;

/// Crate-wide error type. The variants map one-to-one onto the process exit
/// codes used by the command-line front end.
#[derive(Debug)]
pub enum Error {
    /// A caller passed values that violate an operation's preconditions.
    InvalidInput(String),
    /// A run configuration failed validation (unknown key, bad value, ...).
    Config(String),
    /// A file did not parse as the format it claims to be.
    Format(String),
    /// Training produced non-finite values.
    Divergence(String),
    /// Two models that must agree on outputs do not.
    Equivalence(String),
    Io(std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidInput(msg) => write!(f, "invalid input: {}", msg),
            Error::Config(msg) => write!(f, "config error: {}", msg),
            Error::Format(msg) => write!(f, "format error: {}", msg),
            Error::Divergence(msg) => write!(f, "training diverged: {}", msg),
            Error::Equivalence(msg) => write!(f, "equivalence check failed: {}", msg),
            Error::Io(err) => write!(f, "io error: {}", err),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(err) => Some(err),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err)
    }
}

impl Error {
    /// Process exit code for the CLI. 0 is success; each failure class gets
    /// a distinct nonzero code so scripts can tell them apart.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Divergence(_) => 3,
            Error::Format(_) => 4,
            Error::Equivalence(_) => 5,
            Error::InvalidInput(_) | Error::Io(_) => 1,
        }
    }
}
