use thiserror::Error;

pub type Result<T> = std::result::Result<T, ForgeError>;

#[derive(Debug, Error)]
pub enum ForgeError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("resonant frequency {lambda}: distance {gap:.3e} to the discrete spectrum")]
    Resonance { lambda: f64, gap: f64 },
    #[error("spectral window inconclusive: {0}")]
    Inconclusive(String),
    #[error("construction gate: {0}")]
    Construction(String),
    #[error("ellipticity violated at ({:.4}, {:.4}, {:.4}): {detail}", .at[0], .at[1], .at[2])]
    Ellipticity { at: [f64; 3], detail: String },
    #[error("incompatible divergence data: integral {integral:.3e} exceeds tolerance {tolerance:.3e}")]
    Incompatible { integral: f64, tolerance: f64 },
    #[error("jacobian determinant mismatch {deviation:.3e} at ({:.4}, {:.4}, {:.4})", .at[0], .at[1], .at[2])]
    MoserDet { at: [f64; 3], deviation: f64 },
    #[error("singular jacobian at ({:.4}, {:.4}, {:.4})", .at[0], .at[1], .at[2])]
    SingularJacobian { at: [f64; 3] },
    #[error("{what} did not converge after {iterations} iterations (last residual {last:.3e})")]
    NonConvergence {
        what: String,
        iterations: usize,
        last: f64,
        history: Vec<f64>,
    },
    #[error("solver failure: {0}")]
    Solver(String),
    #[error("missing analytic derivative for {0}")]
    MissingDerivative(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl ForgeError {
    /// Process exit code of the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            ForgeError::InvalidInput(_)
            | ForgeError::Config(_)
            | ForgeError::MissingDerivative(_)
            | ForgeError::Json(_) => 2,
            ForgeError::Resonance { .. } | ForgeError::Inconclusive(_) => 3,
            ForgeError::Construction(_)
            | ForgeError::Ellipticity { .. }
            | ForgeError::Incompatible { .. } => 4,
            ForgeError::MoserDet { .. } | ForgeError::SingularJacobian { .. } => 5,
            ForgeError::NonConvergence { .. }
            | ForgeError::Solver(_)
            | ForgeError::Io(_)
            | ForgeError::Csv(_) => 6,
        }
    }
}
