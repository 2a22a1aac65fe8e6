use std::path::PathBuf;

use multitune_core::Error as CoreError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{}:{line}: {message}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    /// Configuration rejected; `message` carries the offending key path.
    #[error("{}: {message}", path.display())]
    Config { path: PathBuf, message: String },
    #[error("{}: {message}", path.display())]
    Format { path: PathBuf, message: String },
    #[error("{0}")]
    Usage(String),
    /// A prerequisite artifact is missing.
    #[error("{0}")]
    Dependency(String),
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Core(#[from] CoreError),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn stage(stage: &str, source: Error) -> Self {
        Error::Stage {
            stage: stage.to_string(),
            source: Box::new(source),
        }
    }

    /// 2 for configuration and validation problems, 3 for runtime
    /// dependency and data problems.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config { .. } | Error::Parse { .. } | Error::Usage(_) => 2,
            Error::Io { .. } | Error::Format { .. } | Error::Dependency(_) => 3,
            Error::Stage { source, .. } => source.exit_code(),
            Error::Core(e) => match e {
                CoreError::InvalidConfig(_)
                | CoreError::InvalidAdapter(_)
                | CoreError::InvalidSchedule(_)
                | CoreError::InvalidFraction(_)
                | CoreError::InvalidPercent(_)
                | CoreError::InvalidDataSpec(_)
                | CoreError::InvalidSample { .. }
                | CoreError::MarkerCollision(_)
                | CoreError::VocabOverflow { .. }
                | CoreError::UnknownDiscipline(_)
                | CoreError::TargetTooSmall { .. }
                | CoreError::EmptyCorpus
                | CoreError::ZeroSteps => 2,
                _ => 3,
            },
        }
    }
}
