use std::fmt;
use std::path::Path;

use anomize::dataio::DataError;
use anomize::metrics::MetricError;
use anomize::model::ModelError;
use anomize::textbank::TextError;
use anomize::training::TrainError;

/// Exit-code class of a failure.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    /// Bad configuration, failed validation or unmet precondition.
    Config,
    /// A run started and had to stop.
    Runtime,
    /// Reading or writing a file failed.
    Io,
}

impl Kind {
    pub fn code(self) -> u8 {
        match self {
            Self::Config => 2,
            Self::Runtime => 3,
            Self::Io => 4,
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub kind: Kind,
    pub message: String,
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

impl CliError {
    pub fn config(message: impl Into<String>) -> Self {
        Self {
            kind: Kind::Config,
            message: message.into(),
        }
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        Self {
            kind: Kind::Runtime,
            message: message.into(),
        }
    }

    pub fn io(path: &Path, e: std::io::Error) -> Self {
        Self {
            kind: Kind::Io,
            message: format!("{}: {e}", path.display()),
        }
    }

    /// Prefixes the message with what was being attempted.
    pub fn context(mut self, what: impl fmt::Display) -> Self {
        self.message = format!("{what}: {}", self.message);
        self
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        let kind = match e {
            DataError::Io { .. } | DataError::Format { .. } | DataError::Truncated { .. } => Kind::Io,
            _ => Kind::Config,
        };
        Self {
            kind,
            message: e.to_string(),
        }
    }
}

impl From<TextError> for CliError {
    fn from(e: TextError) -> Self {
        let kind = match e {
            TextError::Io { .. } | TextError::Data(_) => Kind::Io,
            TextError::Transport { .. } | TextError::Response(_) => Kind::Runtime,
            _ => Kind::Config,
        };
        Self {
            kind,
            message: e.to_string(),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        let kind = match e {
            ModelError::Tensor(_) => Kind::Runtime,
            _ => Kind::Config,
        };
        Self {
            kind,
            message: e.to_string(),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(m) => Self::config(m),
            TrainError::Data(d) => d.into(),
            TrainError::Model(m) => m.into(),
            other => Self::runtime(other.to_string()),
        }
    }
}

impl From<MetricError> for CliError {
    fn from(e: MetricError) -> Self {
        match e {
            MetricError::Model(m) => m.into(),
            MetricError::Input(m) => Self::config(m),
            other => Self::runtime(other.to_string()),
        }
    }
}
