use std::fmt;
use std::path::PathBuf;

#[derive(Debug)]
pub enum CliError {
    Core(saeda::Error),
    /// Config file that failed to parse or validate.
    Config { path: PathBuf, message: String },
    /// Input file whose layout is not one the command understands.
    Schema { path: PathBuf, message: String },
    Io { path: PathBuf, source: std::io::Error },
    Usage(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Config { path, message } => write!(f, "invalid config {}: {message}", path.display()),
            CliError::Schema { path, message } => write!(f, "{}: {message}", path.display()),
            CliError::Io { path, source } => write!(f, "{}: {source}", path.display()),
            CliError::Usage(m) => f.write_str(m),
        }
    }
}

impl std::error::Error for CliError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            CliError::Core(e) => Some(e),
            CliError::Io { source, .. } => Some(source),
            _ => None,
        }
    }
}

impl From<saeda::Error> for CliError {
    fn from(e: saeda::Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }
}
