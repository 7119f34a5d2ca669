use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite input to {0}")]
    NonFiniteInput(&'static str),

    #[error("invalid population spec: {0}")]
    InvalidSpec(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("vector must be nonzero")]
    ZeroVector,

    #[error("pooled weighted Gram matrix is singular (condition ratio {ratio:.3e}); total data cannot identify a global model")]
    SingularGlobalGram { ratio: f64 },

    #[error("MAML meta-Gram matrix is singular (condition ratio {ratio:.3e})")]
    SingularMetaGram { ratio: f64 },

    #[error("pFedMe coupling matrix Q is singular (condition ratio {ratio:.3e})")]
    SingularCoupling { ratio: f64 },

    #[error("ridge parameter must be positive, got {0}")]
    NonPositiveLambda(f64),

    #[error("numerical inconsistency: {0}")]
    NumericalInconsistency(String),

    #[error("domain error: {0}")]
    DomainError(String),

    #[error("optimal ridge parameter undefined for zero heterogeneity radius")]
    DegenerateHomogeneity,

    #[error("internal inconsistency: {0}")]
    InternalInconsistency(String),

    #[error("no root of the c0 equation in the bracket")]
    NoRoot,

    #[error("fixed point did not converge after {iterations} iterations (residual {residual:.3e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("iterates diverged at round {round} (norm {norm:.3e}): step size too large")]
    Diverged { round: usize, norm: f64 },

    #[error("client index {0} out of range")]
    ClientIndex(usize),

    #[error("parse error: {0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error("linear algebra failure: {0}")]
    Linalg(String),
}

impl Error {
    /// Short stable tag used in result rows.
    pub fn tag(&self) -> &'static str {
        match self {
            Error::NonFiniteInput(_) => "NonFiniteInput",
            Error::InvalidSpec(_) => "InvalidSpec",
            Error::InvalidConfig(_) => "InvalidConfig",
            Error::ZeroVector => "ZeroVector",
            Error::SingularGlobalGram { .. } => "SingularGlobalGram",
            Error::SingularMetaGram { .. } => "SingularMetaGram",
            Error::SingularCoupling { .. } => "SingularCoupling",
            Error::NonPositiveLambda(_) => "NonPositiveLambda",
            Error::NumericalInconsistency(_) => "NumericalInconsistency",
            Error::DomainError(_) => "DomainError",
            Error::DegenerateHomogeneity => "DegenerateHomogeneity",
            Error::InternalInconsistency(_) => "InternalInconsistency",
            Error::NoRoot => "NoRoot",
            Error::NonConvergence { .. } => "NonConvergence",
            Error::Diverged { .. } => "Diverged",
            Error::ClientIndex(_) => "ClientIndex",
            Error::Parse(_) => "ParseError",
            Error::Io(_) => "IoError",
            Error::Json(_) => "JsonError",
            Error::Csv(_) => "CsvError",
            Error::Linalg(_) => "LinalgError",
        }
    }
}
