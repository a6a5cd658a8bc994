//! Deterministic quadrature of the frozen-slow stationary law for a scalar
//! fast variable.
//!
//! With `x` frozen, the fast process on its own clock is the diffusion
//! `dY = b(Y) ds + sigma dW` with `b(y) = B y + g(x, y)`. Its invariant density
//! is `p ~ exp((2/sigma^2) int b)`, and the Poisson equation `L Hbar = -H`
//! reduces to `p Hbar' = -(2/sigma^2) int_{-inf}^y H p`.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::systems::SlowFastSystem;

/// Density cut: the grid extends until `-log p` rises this far above its minimum.
const TAIL_DEPTH: f64 = 80.0;

#[derive(Clone, Debug)]
pub struct ScalarStationaryLaw {
    pub grid: Vec<f64>,
    /// Normalised density at the grid nodes.
    pub density: Vec<f64>,
    /// Trapezoid weights times density; sums to 1.
    weights: Vec<f64>,
    step: f64,
    sigma: f64,
}

#[derive(Clone, Debug)]
pub struct PoissonSolution {
    /// Stationary mean of `H` before centring.
    pub mean: Vec<f64>,
    /// `Hbar_i` at the grid nodes, normalised to stationary mean zero.
    pub hbar: Vec<Vec<f64>>,
    /// `d Hbar_i / dy` at the grid nodes.
    pub dhbar: Vec<Vec<f64>>,
    /// `Sigma = sigma^2 E[Hbar' Hbar'^T] = 2 E[Hbar H^T]`.
    pub sigma: DMatrix<f64>,
}

impl ScalarStationaryLaw {
    pub fn new(system: &SlowFastSystem, x: &[f64], n_nodes: usize) -> Result<Self> {
        if system.m() != 1 {
            return Err(Error::Unsupported("stationary quadrature needs a scalar fast variable".into()));
        }
        let bcoef = system.b[(0, 0)];
        let sigma = system.sigma;
        let drift = |y: f64| {
            let mut g = [0.0];
            system.g.eval(x, &[y], &mut g);
            bcoef * y + g[0]
        };
        let scale = sigma.abs() / (2.0 * bcoef.abs()).sqrt();
        let c = 2.0 / (sigma * sigma);
        let edge = |dir: f64| -> Result<f64> {
            let h = dir * scale / 8.0;
            let (mut y, mut u, mut umin) = (0.0f64, 0.0f64, 0.0f64);
            let mut prev = drift(0.0);
            for _ in 0..2_000_000 {
                let next = drift(y + h);
                u -= c * 0.5 * (prev + next) * h;
                y += h;
                prev = next;
                umin = umin.min(u);
                if u - umin > TAIL_DEPTH && y.abs() > 4.0 * scale {
                    return Ok(y);
                }
            }
            Err(Error::Unsupported("fast drift is not confining".into()))
        };
        let (lo, hi) = (edge(-1.0)?, edge(1.0)?);
        let n = n_nodes.max(101);
        let step = (hi - lo) / (n - 1) as f64;
        let grid: Vec<f64> = (0..n).map(|k| lo + k as f64 * step).collect();
        let b: Vec<f64> = grid.iter().map(|&y| drift(y)).collect();
        let mut u = vec![0.0; n];
        for k in 1..n {
            u[k] = u[k - 1] - c * 0.5 * (b[k - 1] + b[k]) * step;
        }
        let umin = u.iter().cloned().fold(f64::INFINITY, f64::min);
        let mut density: Vec<f64> = u.iter().map(|v| (-(v - umin)).exp()).collect();
        let mut weights: Vec<f64> = density.iter().map(|p| p * step).collect();
        weights[0] *= 0.5;
        weights[n - 1] *= 0.5;
        let z: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= z);
        density.iter_mut().for_each(|p| *p /= z);
        Ok(ScalarStationaryLaw {
            grid,
            density,
            weights,
            step,
            sigma,
        })
    }

    pub fn expectation(&self, phi: impl Fn(f64) -> f64) -> f64 {
        self.grid.iter().zip(&self.weights).map(|(&y, w)| w * phi(y)).sum()
    }

    pub fn expectation_vec(&self, dim: usize, phi: impl Fn(f64, &mut [f64])) -> Vec<f64> {
        let mut acc = vec![0.0; dim];
        let mut buf = vec![0.0; dim];
        for (&y, w) in self.grid.iter().zip(&self.weights) {
            phi(y, &mut buf);
            acc.iter_mut().zip(&buf).for_each(|(a, b)| *a += w * b);
        }
        acc
    }

    pub fn mean(&self) -> f64 {
        self.expectation(|y| y)
    }

    /// Poisson solution for a vector observable `H(y)` of dimension `dim`.
    pub fn poisson(&self, dim: usize, h: impl Fn(f64, &mut [f64])) -> PoissonSolution {
        let n = self.grid.len();
        let mut hv = vec![vec![0.0; n]; dim];
        let mut buf = vec![0.0; dim];
        for (k, &y) in self.grid.iter().enumerate() {
            h(y, &mut buf);
            for i in 0..dim {
                hv[i][k] = buf[i];
            }
        }
        let mean: Vec<f64> = hv
            .iter()
            .map(|col| col.iter().zip(&self.weights).map(|(a, w)| a * w).sum())
            .collect();
        // split at the median so each tail integral is taken where it is small
        let mut cum = 0.0;
        let mut kmed = n - 1;
        for (k, w) in self.weights.iter().enumerate() {
            cum += w;
            if cum >= 0.5 {
                kmed = k;
                break;
            }
        }
        let pmax = self.density.iter().cloned().fold(0.0, f64::max);
        let c = 2.0 / (self.sigma * self.sigma);
        let mut dhbar = vec![vec![0.0; n]; dim];
        for i in 0..dim {
            let fc: Vec<f64> = (0..n).map(|k| (hv[i][k] - mean[i]) * self.density[k]).collect();
            let mut left = vec![0.0; n];
            for k in 1..n {
                left[k] = left[k - 1] + 0.5 * (fc[k - 1] + fc[k]) * self.step;
            }
            let mut right = vec![0.0; n];
            for k in (0..n - 1).rev() {
                right[k] = right[k + 1] + 0.5 * (fc[k] + fc[k + 1]) * self.step;
            }
            for k in 0..n {
                let integral = if k <= kmed { left[k] } else { -right[k] };
                let p = self.density[k];
                dhbar[i][k] = if p > 1e-250 * pmax { -c * integral / p } else { 0.0 };
            }
        }
        let mut sigma = DMatrix::<f64>::zeros(dim, dim);
        for i in 0..dim {
            for j in 0..dim {
                let s: f64 = (0..n).map(|k| self.weights[k] * dhbar[i][k] * dhbar[j][k]).sum();
                sigma[(i, j)] = self.sigma * self.sigma * s;
            }
        }
        let mut hbar = vec![vec![0.0; n]; dim];
        for i in 0..dim {
            for k in 1..n {
                hbar[i][k] = hbar[i][k - 1] + 0.5 * (dhbar[i][k - 1] + dhbar[i][k]) * self.step;
            }
            let m: f64 = hbar[i].iter().zip(&self.weights).map(|(a, w)| a * w).sum();
            hbar[i].iter_mut().for_each(|v| *v -= m);
        }
        PoissonSolution {
            mean,
            hbar,
            dhbar,
            sigma,
        }
    }

    /// Linear interpolation of a nodal field.
    pub fn interpolate(&self, values: &[f64], y: f64) -> f64 {
        let n = self.grid.len();
        let u = ((y - self.grid[0]) / self.step).clamp(0.0, (n - 1) as f64);
        let k = (u.floor() as usize).min(n - 2);
        let w = u - k as f64;
        values[k] * (1.0 - w) + values[k + 1] * w
    }
}

/// `(fbar(x), Sigma(x))` by quadrature, with a grid-halving error estimate on `fbar`.
pub fn quadrature_fbar(system: &SlowFastSystem, x: &[f64], n_nodes: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = system.n();
    let eval = |law: &ScalarStationaryLaw| {
        law.expectation_vec(n, |y, out| system.f.eval(x, &[y], out))
    };
    let fine = eval(&ScalarStationaryLaw::new(system, x, n_nodes)?);
    let coarse = eval(&ScalarStationaryLaw::new(system, x, n_nodes / 2)?);
    let err = fine.iter().zip(&coarse).map(|(a, b)| (a - b).abs()).collect();
    Ok((fine, err))
}

/// Green-Kubo covariance `Sigma(x)` by quadrature of the Poisson equation.
pub fn quadrature_sigma(system: &SlowFastSystem, x: &[f64], n_nodes: usize) -> Result<DMatrix<f64>> {
    let law = ScalarStationaryLaw::new(system, x, n_nodes)?;
    let n = system.n();
    Ok(law.poisson(n, |y, out| system.f.eval(x, &[y], out)).sigma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchmark::toy_system;
    use crate::systems::{SlowFastSystem, ZeroField};
    use std::sync::Arc;

    fn ou_with_identity_slow(b: f64, sigma: f64) -> SlowFastSystem {
        let f = |_: &[f64], y: &[f64], o: &mut [f64]| o[0] = y[0];
        SlowFastSystem::new(
            "ou",
            DMatrix::zeros(1, 1),
            DMatrix::from_element(1, 1, b),
            Arc::new(f),
            Arc::new(ZeroField),
            sigma,
            0.1,
        )
        .unwrap()
    }

    #[test]
    fn gaussian_moments() {
        let s = ou_with_identity_slow(-2.0, 0.6);
        let law = ScalarStationaryLaw::new(&s, &[0.0], 4001).unwrap();
        assert!(law.mean().abs() < 1e-13);
        let var = law.expectation(|y| y * y);
        assert!((var - 0.09).abs() < 1e-9, "{var}");
    }

    #[test]
    fn ou_poisson_solution() {
        // H = y, B = -b: Hbar = y / b and Sigma = sigma^2 / b^2
        let s = ou_with_identity_slow(-2.0, 0.6);
        let law = ScalarStationaryLaw::new(&s, &[0.0], 8001).unwrap();
        let sol = law.poisson(1, |y, o| o[0] = y);
        assert!((sol.sigma[(0, 0)] - 0.09).abs() < 1e-8);
        let k = law.grid.len() / 2 + 37;
        assert!((sol.hbar[0][k] - law.grid[k] / 2.0).abs() < 1e-6);
        assert!((sol.dhbar[0][k] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn toy_odd_symmetry() {
        let s = toy_system(0.1, 0.01).unwrap();
        let (fp, _) = quadrature_fbar(&s, &[0.07], 20001).unwrap();
        let (fm, _) = quadrature_fbar(&s, &[-0.07], 20001).unwrap();
        assert!((fp[0] + fm[0]).abs() < 1e-15);
        let sp = quadrature_sigma(&s, &[0.07], 20001).unwrap();
        let sm = quadrature_sigma(&s, &[-0.07], 20001).unwrap();
        assert!((sp[(0, 0)] - sm[(0, 0)]).abs() < 1e-15);
    }
}
