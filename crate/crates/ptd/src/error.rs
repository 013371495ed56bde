use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{0}")]
    Usage(String),
    #[error("{}:{line}: {message}", path.display())]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("cannot read {}: {source}", path.display())]
    Read { path: PathBuf, source: std::io::Error },
    #[error("cannot write {}: {source}", path.display())]
    Write { path: PathBuf, source: std::io::Error },
    #[error("checkpoint {}: {message}", path.display())]
    Checkpoint { path: PathBuf, message: String },
    #[error("{0}")]
    Core(#[from] ptd_core::Error),
    #[error("stage {stage}: {source}")]
    Stage { stage: &'static str, source: Box<Error> },
}

impl Error {
    pub fn parse(path: impl Into<PathBuf>, line: usize, message: impl ToString) -> Self {
        Error::Parse {
            path: path.into(),
            line,
            message: message.to_string(),
        }
    }

    pub fn checkpoint(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Checkpoint {
            path: path.into(),
            message: message.into(),
        }
    }

    /// Exit status: 1 usage, 2 bad input data, 3 runtime failure.
    pub fn exit_code(&self) -> i32 {
        use ptd_core::Error as E;
        match self {
            Error::Usage(_) => 1,
            Error::Parse { .. } | Error::Read { .. } => 2,
            Error::Write { .. } | Error::Checkpoint { .. } => 3,
            Error::Core(e) => match e {
                E::Corpus { .. }
                | E::EmptyHistory
                | E::HistoryEndsWithAgent
                | E::Label(_)
                | E::EmptyTrainSet
                | E::LengthMismatch { .. }
                | E::InvalidArgument(_) => 2,
                _ => 3,
            },
            Error::Stage { source, .. } => source.exit_code(),
        }
    }
}

/// Tags errors from a pipeline stage with the stage name.
pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T, E: Into<Error>> StageExt<T> for std::result::Result<T, E> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| Error::Stage {
            stage,
            source: Box::new(e.into()),
        })
    }
}
