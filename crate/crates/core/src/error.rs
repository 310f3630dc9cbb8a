use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("unsupported spin quantum number {0} (expected 1/2 or 1)")]
    UnsupportedSpin(f64),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("eigensolver did not converge")]
    Diagonalization,

    #[error("ambiguous state labels (max block overlap {min_overlap:.3} below threshold)")]
    AmbiguousLabels { min_overlap: f64 },

    #[error("line ordering ambiguous at phi = {phi_deg} deg: two lines within {gap_mhz:.2e} MHz")]
    LineOrdering { phi_deg: f64, gap_mhz: f64 },

    #[error("equivalent solution {index} failed spectral verification (deviation {deviation_mhz:.3e} MHz)")]
    EquivalenceViolation { index: usize, deviation_mhz: f64 },

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("rank-deficient problem: {0}")]
    RankDeficient(String),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("fit did not converge: {0}")]
    NotConverged(String),

    #[error("{path}: line {line}: {message}")]
    Parse {
        path: String,
        line: u64,
        message: String,
    },

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
