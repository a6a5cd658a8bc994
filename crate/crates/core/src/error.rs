use thiserror::Error;

use crate::paths::SamplePath;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid system: {0}")]
    InvalidSystem(String),
    #[error("fast linear part is not dissipative: mu(B) = {mu}")]
    FastNotDissipative { mu: f64 },
    #[error("empty lambda interval: alpha = {alpha}, beta/eps = {lower}")]
    DegenerateInterval { alpha: f64, lower: f64 },
    #[error("domain box has zero volume")]
    EmptyDomain,
    #[error("shift {shift} is not a multiple of the stream step {dt}")]
    NonGridShift { shift: f64, dt: f64 },
    #[error("transition covariance is not PSD (min eigenvalue {min_eig:e})")]
    CovarianceNotPsd { min_eig: f64 },
    #[error("Lyapunov solve residual {residual:e} exceeds tolerance")]
    LyapunovSolveFailed { residual: f64 },
    #[error("state norm exceeded 1e12 at t = {time}")]
    BlowUp { time: f64, partial: Box<SamplePath> },
    #[error("time {t} outside path range [{start}, {end}]")]
    OutOfRange { t: f64, start: f64, end: f64 },
    #[error("noise stream step {stream_dt} does not match integrator substep {substep}")]
    StreamStepMismatch { stream_dt: f64, substep: f64 },
    #[error("Lyapunov-Perron iteration is not contracting (ratio {ratio:.3} at iteration {iteration})")]
    NoContraction { ratio: f64, iteration: usize },
    #[error("truncation horizon too short: oldest cell contributes {contribution:e} > tol")]
    TruncationTooShort { contribution: f64 },
    #[error("fixed point not reached after {iterations} iterations (change {change:e})")]
    NotConverged { iterations: usize, change: f64 },
    #[error("decay fit window shortened by underflow")]
    DistanceUnderflow,
    #[error("stationarity check failed: half means differ by {z:.2} pooled SE")]
    MixingTooSlow { z: f64 },
    #[error("averaged path left the table hull at t = {time}")]
    TableRangeExceeded { time: f64 },
    #[error("autocovariance integral did not reach a plateau within the correlation window")]
    NoPlateau,
    #[error("diagonal entry {index} of Sigma is {value:e} (< -3 SE)")]
    NegativeDiagonal { index: usize, value: f64 },
    #[error("matrix is not nearly PSD (eigenvalue {min_eig:e} < -{clip_tol:e})")]
    NotNearlyPsd { min_eig: f64, clip_tol: f64 },
    #[error("finite-difference noise dominates the H-bar cache (relative SE {relative_se:.2})")]
    CacheResolutionTooCoarse { relative_se: f64 },
    #[error("degenerate fit: {0}")]
    DegenerateFit(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error: {0}")]
    Parse(String),
}

impl Error {
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
