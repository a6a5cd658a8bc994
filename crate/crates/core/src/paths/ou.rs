use nalgebra::DMatrix;

use super::noise::{Branch, NoiseStream};
use crate::error::{Error, Result};
use crate::linalg::{lyapunov, min_eigenvalue, ou_covariance, psd_sqrt, Dense};

/// `Q(dt) = (sigma^2/eps) int_0^dt e^{Bs/eps} e^{B^T s/eps} ds`, evaluated on the
/// fast clock `tau = dt/eps`.
pub fn ou_transition_covariance(b: &DMatrix<f64>, sigma: f64, eps: f64, dt: f64) -> Result<DMatrix<f64>> {
    let q = ou_covariance(b, sigma * sigma, dt / eps)?;
    let min = min_eigenvalue(&q);
    if min < -1e-12 * q.norm() {
        return Err(Error::CovarianceNotPsd { min_eig: min });
    }
    Ok(q)
}

/// Stationary covariance of `d eta = B eta ds + sigma dW` on the fast clock.
pub fn stationary_covariance(b: &DMatrix<f64>, sigma: f64) -> Result<DMatrix<f64>> {
    lyapunov(b, sigma * sigma)
}

/// Solves `(1/eps) B Q + (1/eps) Q B^T + (sigma^2/eps) I = 0` as written.
pub fn stationary_covariance_scaled(b: &DMatrix<f64>, sigma: f64, eps: f64) -> Result<DMatrix<f64>> {
    let q = lyapunov(&(b / eps), sigma * sigma / eps)?;
    Ok(q)
}

/// Exact one-step transition of the fast OU process with a fixed step.
#[derive(Clone, Debug)]
pub struct OuStepper {
    pub dim: usize,
    e: Dense,
    l: Dense,
    cov: DMatrix<f64>,
    exp_matrix: DMatrix<f64>,
}

impl OuStepper {
    pub fn new(b: &DMatrix<f64>, sigma: f64, eps: f64, dt: f64) -> Result<Self> {
        let tau = dt / eps;
        let e = (b * tau).exp();
        let q = ou_transition_covariance(b, sigma, eps, dt)?;
        let l = psd_sqrt(&q, f64::INFINITY)?;
        Ok(OuStepper {
            dim: b.nrows(),
            e: Dense::from_matrix(&e),
            l: Dense::from_matrix(&l),
            cov: q,
            exp_matrix: e,
        })
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.cov
    }

    pub fn transition(&self) -> &DMatrix<f64> {
        &self.exp_matrix
    }

    /// `state <- e^{B dt/eps} state + Q^{1/2} z` for a standard normal `z`.
    #[inline]
    pub fn step(&self, state: &mut [f64], z: &[f64], scratch: &mut [f64]) {
        self.e.apply(state, scratch);
        self.l.apply_add(z, scratch);
        state.copy_from_slice(scratch);
    }
}

/// One exact OU step driven by the Wiener increment `dw` over `dt`.
pub fn ou_exact_step(b: &DMatrix<f64>, sigma: f64, eps: f64, state: &[f64], dw: &[f64], dt: f64) -> Result<Vec<f64>> {
    if !(dt > 0.0) {
        return Err(Error::InvalidArgument("dt must be positive".into()));
    }
    let st = OuStepper::new(b, sigma, eps, dt)?;
    let z: Vec<f64> = dw.iter().map(|w| w / dt.sqrt()).collect();
    let mut out = state.to_vec();
    let mut scratch = vec![0.0; out.len()];
    st.step(&mut out, &z, &mut scratch);
    Ok(out)
}

/// Draw from `N(0, Q_inf)`, taken from the stream's initial-state branch at the
/// stream's current absolute position.
pub fn sample_stationary_ou(b: &DMatrix<f64>, sigma: f64, eps: f64, stream: &NoiseStream) -> Result<Vec<f64>> {
    let q = stationary_covariance_scaled(b, sigma, eps)?;
    let l = Dense::from_matrix(&psd_sqrt(&q, f64::INFINITY)?);
    let m = b.nrows();
    let mut z = vec![0.0; m];
    stream.with_branch(Branch::Initial(0), m).standard_normal(0, &mut z);
    let mut out = vec![0.0; m];
    l.apply(&z, &mut out);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_limit() {
        let b = DMatrix::from_row_slice(2, 2, &[-1.0, 0.3, 0.0, -2.0]);
        let st = OuStepper::new(&b, 1e-300, 0.5, 0.1).unwrap();
        let mut s = vec![1.0, -2.0];
        let mut scratch = vec![0.0; 2];
        st.step(&mut s, &[3.0, 3.0], &mut scratch);
        let e = (&b * 0.2).exp();
        assert!((s[0] - (e[(0, 0)] - 2.0 * e[(0, 1)])).abs() < 1e-15);
        assert!((s[1] + 2.0 * e[(1, 1)]).abs() < 1e-15);
    }

    #[test]
    fn small_step_continuity() {
        let b = DMatrix::from_element(1, 1, -1.0);
        let out = ou_exact_step(&b, 1.0, 1.0, &[0.7], &[1e-6], 1e-12).unwrap();
        assert!((out[0] - 0.7).abs() < 1e-5);
    }

    #[test]
    fn stationary_closed_form() {
        let b = -DMatrix::<f64>::identity(2, 2);
        let q = stationary_covariance_scaled(&b, 1.0, 0.3).unwrap();
        assert!((q - DMatrix::<f64>::identity(2, 2) * 0.5).amax() < 1e-14);
    }
}
