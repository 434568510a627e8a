use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("invalid execution design: {0}")]
    Design(String),
    #[error("infeasible: {0}")]
    Infeasible(Infeasibility),
    #[error("supply error: {0}")]
    Supply(String),
    #[error("unrecoverable NVM state: {0}")]
    Unrecoverable(String),
    #[error("{}:{line}: {message}", file.display())]
    Parse {
        file: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{message}")]
    Csv { message: String },
    #[error("json error at `{path}`: {message}")]
    Json { path: String, message: String },
    #[error("invalid network: {0:?}")]
    Network(Vec<crate::model::Violation>),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Short machine-readable tag, used by the CLI error document.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Param(_) => "param",
            Error::Shape(_) => "shape",
            Error::Input(_) => "input",
            Error::Design(_) => "design",
            Error::Infeasible(_) => "infeasible",
            Error::Supply(_) => "supply",
            Error::Unrecoverable(_) => "unrecoverable",
            Error::Parse { .. } | Error::Csv { .. } => "parse",
            Error::Json { .. } => "schema",
            Error::Network(_) => "network",
            Error::Io(_) => "io",
        }
    }
}

/// Which constraint rejected a design, and where.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "constraint", rename_all = "snake_case", deny_unknown_fields)]
pub enum Infeasibility {
    /// Recovery plus one worst-case unit plus its preservation exceeds the budget.
    Energy {
        layer: usize,
        needed: u64,
        budget: u64,
    },
    /// Tile footprint does not fit in volatile memory.
    Vm {
        layer: usize,
        needed: u64,
        capacity: u64,
    },
    /// The design itself is malformed for this network.
    Design {
        layer: Option<usize>,
        reason: String,
    },
    /// No candidate met the latency requirement.
    Latency { best: Option<u64>, required: u64 },
}

impl fmt::Display for Infeasibility {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Infeasibility::Energy {
                layer,
                needed,
                budget,
            } => write!(
                f,
                "energy-infeasible at layer {layer}: one unit cycle needs {needed} eu, budget is {budget}"
            ),
            Infeasibility::Vm {
                layer,
                needed,
                capacity,
            } => write!(
                f,
                "VM-infeasible at layer {layer}: tile footprint {needed} B exceeds capacity {capacity} B"
            ),
            Infeasibility::Design { layer, reason } => match layer {
                Some(l) => write!(f, "design invalid at layer {l}: {reason}"),
                None => write!(f, "design invalid: {reason}"),
            },
            Infeasibility::Latency { best, required } => match best {
                Some(b) => write!(f, "best latency {b} exceeds requirement {required}"),
                None => write!(f, "no feasible design (latency requirement {required})"),
            },
        }
    }
}
