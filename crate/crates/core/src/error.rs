use thiserror::Error;

#[derive(Debug, Error)]
pub enum DrfError {
    #[error("degenerate potential: every bin is -inf")]
    DegeneratePotential,

    #[error("bin ({row}, {col}) is outside the {rows}x{cols} grid")]
    OutOfBounds {
        row: usize,
        col: usize,
        rows: usize,
        cols: usize,
    },

    #[error("invalid {what}: {detail}")]
    Invalid { what: &'static str, detail: String },

    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("cannot orient: PoI has {observed} observed frame(s), at least 2 are required")]
    CannotOrient { observed: usize },

    #[error("non-finite residual at timestep {t}")]
    NonFiniteResidual { t: usize },

    #[error("infeasible scenario config: {0}")]
    InfeasibleConfig(String),

    #[error("parse error at line {line}, column {column}: {msg}")]
    Parse {
        line: usize,
        column: usize,
        msg: String,
    },

    #[error("unsupported schema {found:?}, expected {expected:?}")]
    Version { found: String, expected: String },

    #[error("covariance of component {component} at timestep {t} is not positive definite")]
    NotPositiveDefinite { t: usize, component: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl DrfError {
    pub(crate) fn invalid(what: &'static str, detail: impl Into<String>) -> Self {
        DrfError::Invalid {
            what,
            detail: detail.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, DrfError>;
