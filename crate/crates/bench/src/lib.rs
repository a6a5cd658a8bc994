//! Fixtures shared by the criterion benches.

use slowfast::benchmark::toy_system;
use slowfast::{NoiseStream, SlowFastSystem};

pub const SIGMA: f64 = 0.1;

/// Toy system at `eps` together with a stream on the default fast substep for replica `r`.
pub fn toy_fixture(eps: f64, r: u64) -> (SlowFastSystem, NoiseStream) {
    let sys = toy_system(SIGMA, eps).expect("toy parameters are valid");
    let s = NoiseStream::new(17, r, sys.m(), eps / 10.0);
    (sys, s)
}
