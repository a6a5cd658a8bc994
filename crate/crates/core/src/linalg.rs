//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

pub fn sym_part(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Logarithmic 2-norm: largest eigenvalue of the symmetric part.
pub fn log_norm(m: &DMatrix<f64>) -> f64 {
    let eig = SymmetricEigen::new(sym_part(m));
    eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
}

pub fn expm(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.exp()
}

/// Returns `(e^Z, phi1(Z), phi2(Z))` from one exponential of the augmented
/// block matrix `[[Z, I, 0], [0, 0, I], [0, 0, 0]]`.
pub fn phi_functions(z: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
    let m = z.nrows();
    let mut aug = DMatrix::<f64>::zeros(3 * m, 3 * m);
    aug.view_mut((0, 0), (m, m)).copy_from(z);
    for i in 0..m {
        aug[(i, m + i)] = 1.0;
        aug[(m + i, 2 * m + i)] = 1.0;
    }
    let ex = aug.exp();
    (
        ex.view((0, 0), (m, m)).into_owned(),
        ex.view((0, m), (m, m)).into_owned(),
        ex.view((0, 2 * m), (m, m)).into_owned(),
    )
}

/// Solves `B Q + Q B^T + c I = 0` through the Kronecker form.
pub fn lyapunov(b: &DMatrix<f64>, c: f64) -> Result<DMatrix<f64>> {
    let m = b.nrows();
    let id = DMatrix::<f64>::identity(m, m);
    let k = id.kronecker(b) + b.kronecker(&id);
    let rhs = DVector::from_iterator(m * m, id.iter().map(|v| -c * v));
    let sol = k
        .lu()
        .solve(&rhs)
        .ok_or(Error::LyapunovSolveFailed { residual: f64::INFINITY })?;
    let q = sym_part(&DMatrix::from_column_slice(m, m, sol.as_slice()));
    let resid = b * &q + &q * b.transpose() + &id * c;
    let scale = c.abs().max(1e-300);
    let residual = resid.amax() / scale;
    if residual > 1e-8 || !residual.is_finite() {
        return Err(Error::LyapunovSolveFailed { residual });
    }
    Ok(q)
}

/// `c * int_0^tau e^{Bu} e^{B^T u} du`, by Van Loan's block exponential for
/// short horizons and by the stationary identity `Q_inf - E Q_inf E^T` otherwise.
pub fn ou_covariance(b: &DMatrix<f64>, c: f64, tau: f64) -> Result<DMatrix<f64>> {
    let m = b.nrows();
    if tau == 0.0 {
        return Ok(DMatrix::zeros(m, m));
    }
    let scale = b.amax() * tau;
    if scale <= 1.0 {
        let mut blk = DMatrix::<f64>::zeros(2 * m, 2 * m);
        blk.view_mut((0, 0), (m, m)).copy_from(&(-b * tau));
        blk.view_mut((m, m), (m, m)).copy_from(&(b.transpose() * tau));
        for i in 0..m {
            blk[(i, m + i)] = c * tau;
        }
        let ex = blk.exp();
        let f12 = ex.view((0, m), (m, m)).into_owned();
        let f22 = ex.view((m, m), (m, m)).into_owned();
        Ok(sym_part(&(f22.transpose() * f12)))
    } else {
        let qinf = lyapunov(b, c)?;
        let e = (b * tau).exp();
        Ok(sym_part(&(&qinf - &e * &qinf * e.transpose())))
    }
}

/// Symmetric eigen-decomposition square root of a PSD matrix. Eigenvalues in
/// `[-clip_tol, 0)` are clipped; anything lower is rejected.
pub fn psd_sqrt(s: &DMatrix<f64>, clip_tol: f64) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(sym_part(s));
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        if *v < 0.0 {
            if *v < -clip_tol {
                return Err(Error::NotNearlyPsd {
                    min_eig: *v,
                    clip_tol,
                });
            }
            *v = 0.0;
        }
        *v = v.sqrt();
    }
    let q = &eig.eigenvectors;
    Ok(sym_part(&(q * DMatrix::from_diagonal(&vals) * q.transpose())))
}

pub fn min_eigenvalue(s: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(sym_part(s))
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// Row-major copy for allocation-free mat-vec in the inner loops.
#[derive(Clone, Debug)]
pub struct Dense {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Dense {
    pub fn from_matrix(m: &DMatrix<f64>) -> Self {
        let mut data = Vec::with_capacity(m.len());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                data.push(m[(i, j)]);
            }
        }
        Dense {
            rows: m.nrows(),
            cols: m.ncols(),
            data,
        }
    }

    #[inline]
    pub fn apply(&self, v: &[f64], out: &mut [f64]) {
        for i in 0..self.rows {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            out[i] = row.iter().zip(v).map(|(a, b)| a * b).sum();
        }
    }

    /// `out += self * v`
    #[inline]
    pub fn apply_add(&self, v: &[f64], out: &mut [f64]) {
        for i in 0..self.rows {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            out[i] += row.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
        }
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|v| *v == 0.0)
    }
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn phi_functions_scalar() {
        let z = DMatrix::from_element(1, 1, -0.7);
        let (e, p1, p2) = phi_functions(&z);
        let x: f64 = -0.7;
        assert!((e[(0, 0)] - x.exp()).abs() < 1e-14);
        assert!((p1[(0, 0)] - (x.exp() - 1.0) / x).abs() < 1e-14);
        assert!((p2[(0, 0)] - (x.exp() - 1.0 - x) / (x * x)).abs() < 1e-14);
    }

    #[test]
    fn phi_functions_at_zero() {
        let (e, p1, p2) = phi_functions(&DMatrix::zeros(2, 2));
        assert_eq!(e, DMatrix::identity(2, 2));
        assert!((p1 - DMatrix::<f64>::identity(2, 2)).amax() < 1e-15);
        assert!((p2 - DMatrix::<f64>::identity(2, 2) * 0.5).amax() < 1e-15);
    }

    #[test]
    fn lyapunov_scalar() {
        let b = DMatrix::from_element(1, 1, -2.0);
        let q = lyapunov(&b, 3.0).unwrap();
        assert!((q[(0, 0)] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn ou_covariance_branches_agree() {
        let b = DMatrix::from_row_slice(2, 2, &[-1.0, 0.5, 0.0, -2.0]);
        // just below and above the branch switch
        for tau in [0.49, 0.51] {
            let q = ou_covariance(&b, 1.3, tau).unwrap();
            // reference by fine midpoint quadrature
            let n = 20000;
            let h = tau / n as f64;
            let mut r = DMatrix::<f64>::zeros(2, 2);
            for k in 0..n {
                let u = (k as f64 + 0.5) * h;
                let e = (&b * u).exp();
                r += &e * e.transpose() * (1.3 * h);
            }
            assert!((q - r).amax() < 1e-8);
        }
    }

    #[test]
    fn psd_sqrt_round_trip() {
        let a = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 0.0, -1.0, 0.5, 0.3, 0.2, 0.0, 1.1]);
        let s = &a * a.transpose();
        let r = psd_sqrt(&s, 1e-8 * s.trace()).unwrap();
        assert!((&r * r.transpose() - &s).amax() / s.amax() < 1e-12);
    }
}
