use std::fmt;

use effport::bglmm::BglmmError;
use effport::corpus::CorpusError;
use effport::glm::GlmError;
use effport::io::IoError;
use effport::meta::MetaError;
use effport::rankcorr::RankCorrError;
use effport::repro::Table2Error;
use effport::tabular::TabularError;
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Usage,
    Data,
    Numerical,
    Io,
}

impl Kind {
    pub fn exit_code(self) -> u8 {
        match self {
            Kind::Usage => 2,
            Kind::Data => 3,
            Kind::Numerical => 4,
            Kind::Io => 1,
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
        Self { kind: Kind::Usage, message: message.into() }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self { kind: Kind::Data, message: message.into() }
    }

    pub fn numerical(message: impl Into<String>) -> Self {
        Self { kind: Kind::Numerical, message: message.into() }
    }

    pub fn to_json(&self) -> String {
        serde_json::json!({
            "error": { "kind": self.kind, "exit_code": self.kind.exit_code(), "message": self.message }
        })
        .to_string()
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Self { kind: Kind::Io, message: e.to_string() }
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Self { kind: Kind::Io, message: e.to_string() }
    }
}

impl From<IoError> for CliError {
    fn from(e: IoError) -> Self {
        match e {
            IoError::Io(io) => io.into(),
            IoError::Glm(g) => g.into(),
            other => Self::data(other.to_string()),
        }
    }
}

impl From<TabularError> for CliError {
    fn from(e: TabularError) -> Self {
        Self::data(e.to_string())
    }
}

impl From<MetaError> for CliError {
    fn from(e: MetaError) -> Self {
        match e {
            MetaError::InvalidVariance => Self::numerical(e.to_string()),
            _ => Self::data(e.to_string()),
        }
    }
}

impl From<GlmError> for CliError {
    fn from(e: GlmError) -> Self {
        match e {
            GlmError::InvalidSpec(_) | GlmError::MissingTerm(_) | GlmError::Nesting(_) => Self::usage(e.to_string()),
            GlmError::InvalidData(_) => Self::data(e.to_string()),
            _ => Self::numerical(e.to_string()),
        }
    }
}

impl From<BglmmError> for CliError {
    fn from(e: BglmmError) -> Self {
        match e {
            BglmmError::InvalidParams(_) | BglmmError::InvalidOrder(_) | BglmmError::InvalidGrid => {
                Self::usage(e.to_string())
            }
            BglmmError::TooFewStudies { .. } | BglmmError::DegenerateData(_) => Self::data(e.to_string()),
            BglmmError::Meta(m) => m.into(),
            _ => Self::numerical(e.to_string()),
        }
    }
}

impl From<RankCorrError> for CliError {
    fn from(e: RankCorrError) -> Self {
        match e {
            RankCorrError::Meta(m) => m.into(),
            _ => Self::data(e.to_string()),
        }
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::InfeasibleMechanism(_) | CorpusError::InvalidOptions(_) => Self::usage(e.to_string()),
            CorpusError::Meta(m) => m.into(),
            _ => Self::data(e.to_string()),
        }
    }
}

impl From<Table2Error> for CliError {
    fn from(e: Table2Error) -> Self {
        Self::numerical(e.to_string())
    }
}
