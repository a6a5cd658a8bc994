//! Noise streams, exact Ornstein-Uhlenbeck updates and the coupled integrator.

mod integrate;
mod noise;
mod ou;
mod path;

pub use integrate::{
    fast_substep, integrate_slowfast, integrate_with, moment_sanity, BoundReport, FastScheme, FastStepper,
    IntegratorOptions, Observer, Substeps,
};
pub use noise::{derive_seed, mix64, Branch, NoiseStream};
pub use ou::{
    ou_exact_step, ou_transition_covariance, sample_stationary_ou, stationary_covariance,
    stationary_covariance_scaled, OuStepper,
};
pub use path::SamplePath;
