//! Error type shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("psf width must be positive and finite, got {0}")]
    KernelWidth(f64),
    #[error("kernel support {support} must be odd and at most the grid side {side}")]
    KernelSupport { support: usize, side: usize },
    #[error("kernel weights must form an odd square grid, got {rows}x{cols}")]
    KernelShape { rows: usize, cols: usize },
    #[error("kernel weights must be symmetric with unit sum, got sum {0}")]
    KernelWeights(f64),
    #[error("image must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("factor {factor} must be positive and divide the grid side {side}")]
    FactorMismatch { factor: usize, side: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("step schedule must be non-empty with positive finite entries")]
    BadSchedule,
    #[error("{0} must be positive, got {1}")]
    NonPositive(&'static str, f64),
    #[error("poisson fidelity needs a positive background when data may vanish")]
    MissingBackground,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("outer loss became non-finite at iteration {0}")]
    Divergence(usize),
    #[error("sample {index}: {source}")]
    Sample {
        index: usize,
        #[source]
        source: Box<CoreError>,
    },
    #[error("invalid configuration: {0}")]
    BadConfig(String),
    #[error("malformed {what}: {detail}")]
    Malformed { what: &'static str, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
