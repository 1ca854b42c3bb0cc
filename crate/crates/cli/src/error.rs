use std::fmt;
use std::path::Path;

/// Failure classes with their process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Usage,
    Data,
}

impl Kind {
    pub fn exit_code(self) -> i32 {
        match self {
            Kind::Usage => 1,
            Kind::Data => 2,
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: Kind,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            kind: Kind::Usage,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self {
            kind: Kind::Data,
            message: message.into(),
        }
    }

    /// Wraps a library error raised while handling `flag`.
    pub fn flag(flag: &str, err: swg_core::Error) -> Self {
        let kind = classify(&err);
        Self {
            kind,
            message: format!("{flag}: {err}"),
        }
    }

    /// Wraps a library error raised while reading or writing `path`.
    pub fn file(path: &Path, err: impl Into<swg_core::Error>) -> Self {
        Self::data(format!("{}: {}", path.display(), err.into()))
    }
}

fn classify(err: &swg_core::Error) -> Kind {
    match err {
        swg_core::Error::InvalidArgument(_) => Kind::Usage,
        _ => Kind::Data,
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;
