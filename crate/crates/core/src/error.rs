use thiserror::Error;

/// Every failure the library can report. Variant names double as the stable
/// identifiers printed by the CLI.
#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not expansive: eigenvalue modulus {modulus} <= 1")]
    NotExpansive { modulus: f64 },
    #[error("non-finite value in {what}")]
    NonFinite { what: String },
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("no (center, scale) pair fits inside the grid")]
    EmptyWindow,
    #[error("weight sample {value} at node {index} is not positive")]
    NonPositive { index: usize, value: f64 },
    #[error("no exponent in the tested grid gives a stable estimate")]
    Unstable,

    #[error("grid too coarse: {0}")]
    ResolutionTooCoarse(String),
    #[error("identity residual {residual:e} exceeds tolerance {tol:e} at frequency {xi:?}")]
    ResidualExceedsTol {
        residual: f64,
        tol: f64,
        xi: Vec<f64>,
    },
    #[error("shell contains no grid nodes")]
    EmptyShell,

    #[error("grids do not match: {0}")]
    GridMismatch(String),
    #[error("scale window [{lo}, {hi}] outside certified range [{cert_lo}, {cert_hi}]")]
    WindowOutsideCertifiedRange {
        lo: i32,
        hi: i32,
        cert_lo: i32,
        cert_hi: i32,
    },

    #[error("function does not have mean zero: integral {integral:e}")]
    NotMeanZero { integral: f64 },
    #[error("mass {mass:e} outside the truncation ball exceeds tolerance")]
    TailTooHeavy { mass: f64 },

    #[error("profile is not mean zero on the fundamental shell: {mean:e}")]
    ProfileNotMeanZero { mean: f64 },
    #[error("profile is not dilation periodic: defect {defect:e}")]
    ProfileNotPeriodic { defect: f64 },
    #[error("finite-difference derivative unstable at shell {shell:?}, point {point:?}: {coarse:e} vs {fine:e}")]
    DerivativeUnstable {
        shell: Vec<i32>,
        point: Vec<f64>,
        coarse: f64,
        fine: f64,
    },
    #[error("principal value does not converge: Cauchy ratio {ratio:.3}, last gap {gap:e}")]
    PVNotConvergent { ratio: f64, gap: f64 },

    #[error("dilation is not conjugate to an integer diagonal matrix: {0}")]
    NotAdmissible(String),
    #[error("support rectangle has {nodes} grid nodes on an axis; at least {needed} needed")]
    DegenerateRectangle { nodes: usize, needed: usize },
    #[error("enlarged rectangle at gamma = {gamma} leaves the grid")]
    WindowTooSmall { gamma: usize },

    #[error("config: {0}")]
    Config(String),
    #[error("format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Variant name, used by the CLI on stderr.
    pub fn name(&self) -> &'static str {
        match self {
            Error::NotExpansive { .. } => "NotExpansive",
            Error::NonFinite { .. } => "NonFinite",
            Error::InvalidInput(_) => "InvalidInput",
            Error::EmptyWindow => "EmptyWindow",
            Error::NonPositive { .. } => "NonPositive",
            Error::Unstable => "Unstable",
            Error::ResolutionTooCoarse(_) => "ResolutionTooCoarse",
            Error::ResidualExceedsTol { .. } => "ResidualExceedsTol",
            Error::EmptyShell => "EmptyShell",
            Error::GridMismatch(_) => "GridMismatch",
            Error::WindowOutsideCertifiedRange { .. } => "WindowOutsideCertifiedRange",
            Error::NotMeanZero { .. } => "NotMeanZero",
            Error::TailTooHeavy { .. } => "TailTooHeavy",
            Error::ProfileNotMeanZero { .. } => "ProfileNotMeanZero",
            Error::ProfileNotPeriodic { .. } => "ProfileNotPeriodic",
            Error::DerivativeUnstable { .. } => "DerivativeUnstable",
            Error::PVNotConvergent { .. } => "PVNotConvergent",
            Error::NotAdmissible(_) => "NotAdmissible",
            Error::DegenerateRectangle { .. } => "DegenerateRectangle",
            Error::WindowTooSmall { .. } => "WindowTooSmall",
            Error::Config(_) => "Config",
            Error::Format(_) => "Format",
            Error::Io(_) => "Io",
            Error::Json(_) => "Json",
            Error::Csv(_) => "Csv",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
