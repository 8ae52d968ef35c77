use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("structural violation at row {row}: {detail}")]
    StructuralViolation { row: usize, detail: String },

    #[error("{what} index {index} out of range (limit {limit})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        limit: usize,
    },

    #[error("dimension mismatch for {what}: expected {expected}, got {actual}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("K_psi is singular (condition number {condition:e}) and ridge is disabled")]
    SingularKpsi { condition: f64 },

    #[error("incoherence budget {budget} unreachable after {attempts} draws (best measured {best:.4})")]
    IncoherenceBudgetUnreachable {
        budget: f64,
        attempts: usize,
        best: f64,
    },

    #[error("sparse perturbation infeasible: {0}")]
    InfeasiblePerturbation(String),

    #[error(
        "sufficient-sparsity bound violated: s = {sparsity} exceeds {bound:.4} (ratio {ratio:.3}); pass the override flag to proceed"
    )]
    AssumptionViolation {
        sparsity: usize,
        bound: f64,
        ratio: f64,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("schema mismatch: expected {expected}, found {found}")]
    Schema { expected: String, found: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}
