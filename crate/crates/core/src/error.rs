use std::fmt;

use crate::domain::NodePath;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised anywhere in the estimation pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid domain: {0}")]
    InvalidDomain(String),

    #[error("infeasible partition: {0}")]
    InfeasiblePartition(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("covariance matrix is not positive definite (jitter tried: {jitters:?})")]
    NonPositiveDefinite { jitters: Vec<f64> },

    #[error("variability matrix is singular after ridge escalation up to {max_ridge:e}")]
    SingularVariability { max_ridge: f64 },

    #[error("ill-conditioned matrix: {0}")]
    Conditioning(String),

    #[error("no convergence after {iterations} iterations (gradient norm {grad_norm:e})")]
    NonConvergence {
        iterations: usize,
        grad_norm: f64,
        best: Vec<f64>,
    },

    #[error("estimate hit the parameter boundary: {0}")]
    Boundary(String),

    #[error("capacity exceeded: {0}")]
    Capacity(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dataset format: {0}")]
    Format(String),

    #[error("at node {path} ({stage}): {source}")]
    AtNode {
        path: NodePath,
        stage: Stage,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Pipeline stage used to tag errors with their origin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    LeafFit,
    ScoreEval,
    Project,
    Reduce,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::LeafFit => "leaf-fit",
            Stage::ScoreEval => "score-eval",
            Stage::Project => "project",
            Stage::Reduce => "reduce",
        };
        f.write_str(s)
    }
}

impl Error {
    pub fn at(self, path: &NodePath, stage: Stage) -> Error {
        match self {
            // keep the innermost location
            e @ Error::AtNode { .. } => e,
            e => Error::AtNode {
                path: path.clone(),
                stage,
                source: Box::new(e),
            },
        }
    }

    /// Node path attached to this error, if any.
    pub fn node_path(&self) -> Option<&NodePath> {
        match self {
            Error::AtNode { path, .. } => Some(path),
            _ => None,
        }
    }

    /// Short machine-readable kind, used by the CLI's structured errors.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidDomain(_) => "invalid-domain",
            Error::InfeasiblePartition(_) => "infeasible-partition",
            Error::Dimension(_) => "dimension-mismatch",
            Error::NonPositiveDefinite { .. } => "non-pd",
            Error::SingularVariability { .. } => "singular-variability",
            Error::Conditioning(_) => "conditioning",
            Error::NonConvergence { .. } => "non-convergence",
            Error::Boundary(_) => "boundary",
            Error::Capacity(_) => "capacity",
            Error::InvalidArgument(_) => "invalid-argument",
            Error::Format(_) => "format",
            Error::AtNode { source, .. } => source.kind(),
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
