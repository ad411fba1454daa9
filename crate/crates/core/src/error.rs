use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, MovaError>;

#[derive(Debug, Error)]
pub enum MovaError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("softmax mask selects no entries")]
    EmptySupport,

    #[error("non-finite value at probe index {index} in {context}")]
    Numeric { context: String, index: usize },

    #[error("answer vector of length {len} exceeds capacity {channels} of expert `{expert}`")]
    Capacity {
        expert: String,
        len: usize,
        channels: usize,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("unknown expert letter `{0}`")]
    UnknownExpert(String),

    #[error("unknown expert name `{0}`")]
    UnknownExpertName(String),

    #[error("unrecognized token `{0}` in routing response")]
    UnrecognizedToken(String),

    #[error("routing response contains no expert letters")]
    EmptyResponse,

    #[error("gate weights requested for an empty selection")]
    RoutedEmpty,

    #[error("missing routing context: {0}")]
    MissingContext(String),

    #[error("no feature supplied for selected expert `{0}`")]
    MissingFeature(String),

    #[error("training diverged at step {step}: loss is not finite")]
    Diverged { step: usize },

    #[error("gradient check failed for {param}: max relative error {max_rel_error:e} > {tol:e}")]
    GradCheck {
        param: String,
        max_rel_error: f64,
        tol: f64,
    },

    #[error("malformed MOVT data: {0}")]
    Format(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("[{stage}] {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<MovaError>,
    },
}

impl MovaError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        MovaError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn json(context: impl Into<String>, source: serde_json::Error) -> Self {
        MovaError::Json {
            context: context.into(),
            source,
        }
    }

    pub fn at_stage(self, stage: &'static str) -> Self {
        MovaError::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// The pipeline stage that produced this error, if tagged.
    pub fn stage(&self) -> Option<&'static str> {
        match self {
            MovaError::Stage { stage, .. } => Some(stage),
            _ => None,
        }
    }

    /// Innermost error with stage tags removed.
    pub fn root(&self) -> &MovaError {
        match self {
            MovaError::Stage { source, .. } => source.root(),
            other => other,
        }
    }
}
