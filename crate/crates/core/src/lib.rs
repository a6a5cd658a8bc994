//! Numerical model reduction for slow-fast stochastic systems
//!
//! ```text
//! dx = (A x + f(x, y)) dt
//! dy = (1/eps) (B y + g(x, y)) dt + (sigma / sqrt(eps)) dW
//! ```
//!
//! The crate builds the random slow manifold by a truncated Lyapunov-Perron
//! iteration, estimates the averaged drift and the fluctuation covariance,
//! integrates the averaged and the martingale-corrected reduced models, and
//! measures their convergence rates against the full system by Monte Carlo.

pub mod averaging;
pub mod benchmark;
pub mod error;
pub mod fluctuation;
pub mod linalg;
pub mod manifold;
pub mod parallel;
pub mod paths;
pub mod report;
pub mod stationary;
pub mod stats;
pub mod sweep;
pub mod systems;

pub use error::{Error, Result};
pub use nalgebra::DMatrix;
pub use paths::{NoiseStream, SamplePath};
pub use report::{ConvergenceReport, ConvergenceRow};
pub use systems::{AssumptionReport, SlowFastSystem, VectorField};
