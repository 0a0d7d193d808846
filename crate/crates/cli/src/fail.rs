//! Error categories mapped to exit codes.

use gtr_core::analysis::AnalysisError;
use gtr_core::data::DataError;
use gtr_core::synth::SynthError;
use gtr_core::train::{CheckpointError, ConfigError, TrainError};

#[derive(Debug)]
pub enum Fail {
    Usage(anyhow::Error),
    Data(anyhow::Error),
    Numeric(anyhow::Error),
}

impl Fail {
    pub fn usage(e: impl Into<anyhow::Error>) -> Self {
        Fail::Usage(e.into())
    }

    pub fn data(e: impl Into<anyhow::Error>) -> Self {
        Fail::Data(e.into())
    }

    pub fn code(&self) -> u8 {
        match self {
            Fail::Usage(_) => 1,
            Fail::Data(_) => 2,
            Fail::Numeric(_) => 3,
        }
    }

    pub fn error(&self) -> &anyhow::Error {
        match self {
            Fail::Usage(e) | Fail::Data(e) | Fail::Numeric(e) => e,
        }
    }

    pub fn context(self, msg: String) -> Self {
        match self {
            Fail::Usage(e) => Fail::Usage(e.context(msg)),
            Fail::Data(e) => Fail::Data(e.context(msg)),
            Fail::Numeric(e) => Fail::Numeric(e.context(msg)),
        }
    }
}

impl From<ConfigError> for Fail {
    fn from(e: ConfigError) -> Self {
        Fail::Usage(e.into())
    }
}

impl From<DataError> for Fail {
    fn from(e: DataError) -> Self {
        Fail::Data(e.into())
    }
}

impl From<CheckpointError> for Fail {
    fn from(e: CheckpointError) -> Self {
        Fail::Data(e.into())
    }
}

impl From<SynthError> for Fail {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Invalid(_) => Fail::Usage(e.into()),
            SynthError::Io { .. } => Fail::Data(e.into()),
        }
    }
}

impl From<AnalysisError> for Fail {
    fn from(e: AnalysisError) -> Self {
        match e {
            AnalysisError::Invalid(_) => Fail::Usage(e.into()),
            _ => Fail::Data(e.into()),
        }
    }
}

impl From<TrainError> for Fail {
    fn from(e: TrainError) -> Self {
        if e.is_numeric() {
            return Fail::Numeric(e.into());
        }
        match e {
            TrainError::Config(_) | TrainError::Model(_) => Fail::Usage(e.into()),
            _ => Fail::Data(e.into()),
        }
    }
}

impl From<std::io::Error> for Fail {
    fn from(e: std::io::Error) -> Self {
        Fail::Data(e.into())
    }
}
