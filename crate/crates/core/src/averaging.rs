//! The averaged drift `fbar(x) = E f(x, ybar)`: estimators, tables, the
//! averaged ODE and the averaging error sweep.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{log_norm, norm, Dense};
use crate::manifold::{h0_with_eta, manifold_stream};
use crate::parallel::par_map;
use crate::paths::{FastScheme, FastStepper, NoiseStream, SamplePath};
use crate::report::ConvergenceReport;
use crate::stationary::quadrature_fbar;
use crate::stats::{batch_means, mean_se};
use crate::sweep::{run_sweep, SweepConfig, Tables};
use crate::systems::SlowFastSystem;

/// A vector estimate with per-component standard errors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: Vec<f64>,
    pub stderr: Vec<f64>,
}

/// Node layout of an [`EmpiricalFunction`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Grid {
    /// One sorted axis per input dimension (at most two); nodes in row-major
    /// order, last axis fastest.
    Tensor(Vec<Vec<f64>>),
    Scattered(Vec<Vec<f64>>),
}

impl Grid {
    pub fn line(xs: Vec<f64>) -> Self {
        Grid::Tensor(vec![xs])
    }

    pub fn uniform(lo: f64, hi: f64, n: usize) -> Self {
        if n == 1 {
            return Grid::line(vec![lo]);
        }
        Grid::line((0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect())
    }

    pub fn dim(&self) -> usize {
        match self {
            Grid::Tensor(axes) => axes.len(),
            Grid::Scattered(nodes) => nodes.first().map_or(0, |p| p.len()),
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Grid::Tensor(axes) => axes.iter().map(|a| a.len()).product(),
            Grid::Scattered(nodes) => nodes.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn nodes(&self) -> Vec<Vec<f64>> {
        match self {
            Grid::Scattered(nodes) => nodes.clone(),
            Grid::Tensor(axes) if axes.len() == 1 => axes[0].iter().map(|&x| vec![x]).collect(),
            Grid::Tensor(axes) => {
                let mut out = Vec::with_capacity(self.len());
                for &a in &axes[0] {
                    for &b in &axes[1] {
                        out.push(vec![a, b]);
                    }
                }
                out
            }
        }
    }
}

/// Tabulated estimate with interpolation between nodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalFunction {
    pub grid: Grid,
    pub dim_out: usize,
    pub values: Vec<Vec<f64>>,
    pub stderr: Vec<Vec<f64>>,
    pub warnings: Vec<String>,
}

fn bracket(axis: &[f64], x: f64) -> Option<(usize, f64)> {
    let n = axis.len();
    if n == 1 {
        return (x == axis[0]).then_some((0, 0.0));
    }
    if !(x >= axis[0] && x <= axis[n - 1]) {
        return None;
    }
    let k = axis.partition_point(|&a| a <= x).clamp(1, n - 1) - 1;
    let w = (x - axis[k]) / (axis[k + 1] - axis[k]);
    Some((k, w))
}

impl EmpiricalFunction {
    pub fn new(grid: Grid, dim_out: usize, values: Vec<Vec<f64>>, stderr: Vec<Vec<f64>>) -> Result<Self> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.into()));
        if grid.is_empty() {
            return bad("grid is empty");
        }
        if values.len() != grid.len() || stderr.len() != grid.len() {
            return bad("one value and one standard error per node");
        }
        if values.iter().chain(&stderr).any(|v| v.len() != dim_out) {
            return bad("value dimension mismatch");
        }
        let mut warnings = Vec::new();
        match &grid {
            Grid::Tensor(axes) => {
                if axes.is_empty() || axes.len() > 2 {
                    return bad("tensor grids support one or two input dimensions");
                }
                if axes.iter().any(|a| a.is_empty() || a.windows(2).any(|w| !(w[0] < w[1]))) {
                    return bad("tensor axes must be nonempty and strictly increasing");
                }
            }
            Grid::Scattered(nodes) => {
                let d = grid.dim();
                if nodes.iter().any(|p| p.len() != d) {
                    return bad("scattered nodes of mixed dimension");
                }
                warnings.push("scattered grid: nearest-node interpolation".into());
            }
        }
        Ok(EmpiricalFunction {
            grid,
            dim_out,
            values,
            stderr,
            warnings,
        })
    }

    pub fn dim_in(&self) -> usize {
        self.grid.dim()
    }

    pub fn n_nodes(&self) -> usize {
        self.grid.len()
    }

    pub fn max_stderr(&self) -> f64 {
        self.stderr.iter().flatten().cloned().fold(0.0, f64::max)
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        match &self.grid {
            Grid::Tensor(axes) => x.len() == axes.len() && axes.iter().zip(x).all(|(a, &v)| bracket(a, v).is_some()),
            Grid::Scattered(_) => x.len() == self.dim_in(),
        }
    }

    /// Interpolated value and the largest standard error among the nodes used.
    pub fn eval(&self, x: &[f64]) -> Option<(Vec<f64>, Vec<f64>)> {
        let mut v = vec![0.0; self.dim_out];
        let mut e = vec![0.0; self.dim_out];
        self.eval_into(x, &mut v, Some(&mut e)).then_some((v, e))
    }

    /// Value only; `false` outside the hull.
    pub fn value_into(&self, x: &[f64], out: &mut [f64]) -> bool {
        self.eval_into(x, out, None)
    }

    fn eval_into(&self, x: &[f64], out: &mut [f64], mut se: Option<&mut [f64]>) -> bool {
        let mut corners: [(usize, f64); 4] = [(0, 0.0); 4];
        let used = match &self.grid {
            Grid::Tensor(axes) if axes.len() == 1 => {
                let Some((k, w)) = (x.len() == 1).then(|| bracket(&axes[0], x[0])).flatten() else {
                    return false;
                };
                corners[0] = (k, 1.0 - w);
                if axes[0].len() > 1 {
                    corners[1] = (k + 1, w);
                    2
                } else {
                    1
                }
            }
            Grid::Tensor(axes) => {
                if x.len() != 2 {
                    return false;
                }
                let (Some((i, u)), Some((j, v))) = (bracket(&axes[0], x[0]), bracket(&axes[1], x[1])) else {
                    return false;
                };
                let ny = axes[1].len();
                let i1 = (i + 1).min(axes[0].len() - 1);
                let j1 = (j + 1).min(ny - 1);
                corners[0] = (i * ny + j, (1.0 - u) * (1.0 - v));
                corners[1] = (i1 * ny + j, u * (1.0 - v));
                corners[2] = (i * ny + j1, (1.0 - u) * v);
                corners[3] = (i1 * ny + j1, u * v);
                4
            }
            Grid::Scattered(nodes) => {
                if x.len() != self.dim_in() {
                    return false;
                }
                let mut best = (0, f64::INFINITY);
                for (k, p) in nodes.iter().enumerate() {
                    let d: f64 = p.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
                    if d < best.1 {
                        best = (k, d);
                    }
                }
                corners[0] = (best.0, 1.0);
                1
            }
        };
        out.iter_mut().for_each(|o| *o = 0.0);
        if let Some(se) = se.as_deref_mut() {
            se.iter_mut().for_each(|o| *o = 0.0);
        }
        for &(k, w) in &corners[..used] {
            for i in 0..self.dim_out {
                out[i] += w * self.values[k][i];
            }
            if let Some(se) = se.as_deref_mut() {
                if w > 0.0 || used == 1 {
                    for i in 0..self.dim_out {
                        se[i] = se[i].max(self.stderr[k][i]);
                    }
                }
            }
        }
        true
    }

    /// Discrete Lipschitz constant: largest slope between neighbouring nodes
    /// (all pairs for scattered grids).
    pub fn lipschitz_estimate(&self) -> f64 {
        let slope = |a: usize, b: usize, dx: f64| norm(&diff(&self.values[a], &self.values[b])) / dx;
        let mut best: f64 = 0.0;
        match &self.grid {
            Grid::Tensor(axes) if axes.len() == 1 => {
                for k in 1..axes[0].len() {
                    best = best.max(slope(k - 1, k, axes[0][k] - axes[0][k - 1]));
                }
            }
            Grid::Tensor(axes) => {
                let (nx, ny) = (axes[0].len(), axes[1].len());
                for i in 0..nx {
                    for j in 0..ny {
                        if i + 1 < nx {
                            best = best.max(slope(i * ny + j, (i + 1) * ny + j, axes[0][i + 1] - axes[0][i]));
                        }
                        if j + 1 < ny {
                            best = best.max(slope(i * ny + j, i * ny + j + 1, axes[1][j + 1] - axes[1][j]));
                        }
                    }
                }
            }
            Grid::Scattered(nodes) => {
                for a in 0..nodes.len() {
                    for b in a + 1..nodes.len() {
                        let dx = norm(&diff(&nodes[a], &nodes[b]));
                        if dx > 0.0 {
                            best = best.max(slope(a, b, dx));
                        }
                    }
                }
            }
        }
        best
    }

    /// CSV with columns `x_1.., value_1.., stderr_1..`.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        let cols: Vec<String> = (1..=self.dim_in())
            .map(|i| format!("x_{i}"))
            .chain((1..=self.dim_out).map(|i| format!("value_{i}")))
            .chain((1..=self.dim_out).map(|i| format!("stderr_{i}")))
            .collect();
        s.push_str(&cols.join(","));
        s.push('\n');
        for (k, p) in self.grid.nodes().iter().enumerate() {
            let row: Vec<String> = p
                .iter()
                .chain(&self.values[k])
                .chain(&self.stderr[k])
                .map(|v| format!("{v:.16e}"))
                .collect();
            let _ = writeln!(s, "{}", row.join(","));
        }
        s
    }
}

fn diff(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(p, q)| p - q).collect()
}

/// Right-hand side `fbar` of the averaged equation.
pub trait Drift: Sync {
    fn dim(&self) -> usize;
    /// Writes `fbar(x)`; `false` when `x` is outside the domain.
    fn drift(&self, x: &[f64], out: &mut [f64]) -> bool;
}

impl Drift for EmpiricalFunction {
    fn dim(&self) -> usize {
        self.dim_out
    }

    fn drift(&self, x: &[f64], out: &mut [f64]) -> bool {
        self.value_into(x, out)
    }
}

/// A drift given by a closure, defined everywhere.
pub struct FnDrift<F> {
    pub dim: usize,
    pub f: F,
}

impl<F: Fn(&[f64], &mut [f64]) + Sync> Drift for FnDrift<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn drift(&self, x: &[f64], out: &mut [f64]) -> bool {
        (self.f)(x, out);
        true
    }
}

/// Relaxation time of the frozen-slow fast process in slow time:
/// `eps/|beta + L_g|` when that rate is negative, else `eps/|beta|`.
pub fn fast_mixing_time(system: &SlowFastSystem) -> f64 {
    let beta = log_norm(&system.b);
    match system.lipschitz {
        Some((_, lg)) if beta + lg < 0.0 => system.eps / (beta + lg).abs(),
        _ => system.eps / beta.abs(),
    }
}

/// Pullback horizon used for stationary fast samples.
pub fn stationary_horizon(system: &SlowFastSystem) -> f64 {
    let beta = log_norm(&system.b);
    match system.lipschitz {
        Some((_, lg)) if beta + lg < 0.0 => system.eps / (beta + lg).abs() * 1e10f64.ln(),
        _ => 50.0 * system.eps / beta.abs(),
    }
}

/// Time average of `f(x, y(t))` along the frozen-`x` fast dynamics. The stream
/// step is the integration step; burn-in is twenty mixing times.
pub fn fbar_time_average(system: &SlowFastSystem, x: &[f64], t_avg: f64, stream: &NoiseStream) -> Result<Estimate> {
    let series = frozen_series(system, x, t_avg, stream, |x, y, out| system.f.eval(x, y, out), system.n())?;
    let mix = fast_mixing_time(system);
    let nb = ((t_avg / (50.0 * mix)).floor() as usize).clamp(20, 100);
    let nb = nb - nb % 2;
    let mut value = Vec::with_capacity(series.len());
    let mut stderr = Vec::with_capacity(series.len());
    for s in &series {
        let half = s.len() / 2;
        let (m1, e1) = batch_means(&s[..half], nb / 2);
        let (m2, e2) = batch_means(&s[half..2 * half], nb / 2);
        let pooled = (e1 * e1 + e2 * e2).sqrt();
        if pooled > 0.0 {
            let z = (m1 - m2).abs() / pooled;
            if z > 5.0 {
                return Err(Error::MixingTooSlow { z });
            }
        }
        let (m, e) = batch_means(s, nb);
        value.push(m);
        stderr.push(e);
    }
    Ok(Estimate { value, stderr })
}

/// Samples `obs(x, y)` after each step of the frozen-`x` fast dynamics,
/// discarding a burn-in of twenty mixing times. One series per output.
pub(crate) fn frozen_series(
    system: &SlowFastSystem,
    x: &[f64],
    t_avg: f64,
    stream: &NoiseStream,
    obs: impl Fn(&[f64], &[f64], &mut [f64]),
    dim: usize,
) -> Result<Vec<Vec<f64>>> {
    if x.len() != system.n() || stream.dim() != system.m() {
        return Err(Error::InvalidArgument("dimension mismatch".into()));
    }
    let mix = fast_mixing_time(system);
    if !(t_avg >= 100.0 * mix * (1.0 - 1e-12)) {
        return Err(Error::InvalidArgument(format!(
            "averaging window {t_avg} shorter than 100 mixing times ({})",
            100.0 * mix
        )));
    }
    let h = stream.dt();
    let stepper = FastStepper::new(system, h, FastScheme::ExponentialHeun)?;
    let mut ws = stepper.workspace();
    let n_burn = (20.0 * mix / h).ceil() as usize;
    let n_avg = (t_avg / h).round().max(1.0) as usize;
    let mut y = vec![0.0; system.m()];
    let mut z = vec![0.0; system.m()];
    let mut buf = vec![0.0; dim];
    let mut series = vec![Vec::with_capacity(n_avg); dim];
    for k in 0..n_burn + n_avg {
        stream.standard_normal(k as i64, &mut z);
        stepper.frozen_step(x, &mut y, &z, &mut ws);
        if !(norm(&y) <= 1e12) {
            let mut partial = SamplePath::new(0.0, h, x.len(), y.len());
            partial.push(x, &y);
            return Err(Error::BlowUp {
                time: (k + 1) as f64 * h,
                partial: Box::new(partial),
            });
        }
        if k >= n_burn {
            obs(x, &y, &mut buf);
            for (s, v) in series.iter_mut().zip(&buf) {
                s.push(*v);
            }
        }
    }
    Ok(series)
}

/// Stationary fast samples `h0(x, omega_r) + eta(omega_r)`, one per replica.
pub fn stationary_samples(system: &SlowFastSystem, x: &[f64], n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let burn_in = stationary_horizon(system);
    par_map(n, |r| {
        let stream = manifold_stream(seed, r as u64, system.m(), system.eps);
        let (h, eta) = h0_with_eta(system, x, &stream, burn_in)?;
        Ok(h.iter().zip(&eta).map(|(a, b)| a + b).collect())
    })
    .into_iter()
    .collect()
}

/// Mean of `f(x, y)` over independent stationary fast samples.
pub fn fbar_ensemble(system: &SlowFastSystem, x: &[f64], n_replicas: usize, seed: u64) -> Result<Estimate> {
    if n_replicas < 100 {
        return Err(Error::InvalidArgument("fbar_ensemble needs at least 100 replicas".into()));
    }
    let ys = stationary_samples(system, x, n_replicas, seed)?;
    let n = system.n();
    let mut cols = vec![Vec::with_capacity(n_replicas); n];
    let mut buf = vec![0.0; n];
    for y in &ys {
        system.f.eval(x, y, &mut buf);
        cols.iter_mut().zip(&buf).for_each(|(c, v)| c.push(*v));
    }
    let (value, stderr) = cols.iter().map(|c| mean_se(c)).unzip();
    Ok(Estimate { value, stderr })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FbarEstimator {
    /// Long frozen-slow run of length `t_avg` (slow time) with step `eps/steps_per_eps`.
    TimeAverage { t_avg: f64, steps_per_eps: f64 },
    Ensemble { n_replicas: usize },
    /// Deterministic quadrature of the stationary density (scalar fast variable).
    /// The error column is the grid-halving difference.
    Quadrature { n_nodes: usize },
}

/// Estimates `fbar` at every node. Nodes share the noise seed.
pub fn tabulate_fbar(system: &SlowFastSystem, grid: Grid, estimator: FbarEstimator, seed: u64) -> Result<EmpiricalFunction> {
    let nodes = grid.nodes();
    let est: Vec<Result<Estimate>> = par_map(nodes.len(), |k| {
        let x = &nodes[k];
        match estimator {
            FbarEstimator::TimeAverage { t_avg, steps_per_eps } => {
                let stream = NoiseStream::new(seed, 0, system.m(), system.eps / steps_per_eps);
                fbar_time_average(system, x, t_avg, &stream)
            }
            FbarEstimator::Ensemble { n_replicas } => fbar_ensemble(system, x, n_replicas, seed),
            FbarEstimator::Quadrature { n_nodes } => {
                let (value, stderr) = quadrature_fbar(system, x, n_nodes)?;
                Ok(Estimate { value, stderr })
            }
        }
    });
    let est: Vec<Estimate> = est.into_iter().collect::<Result<_>>()?;
    let (values, stderr) = est.into_iter().map(|e| (e.value, e.stderr)).unzip();
    EmpiricalFunction::new(grid, system.n(), values, stderr)
}

/// Classical RK4 for `x' = A x + fbar(x)` on `[0, T]`. The returned path has
/// no fast component.
pub fn integrate_averaged(a: &DMatrix<f64>, fbar: &dyn Drift, x0: &[f64], t_end: f64, dt: f64) -> Result<SamplePath> {
    let n = x0.len();
    if a.nrows() != n || a.ncols() != n || fbar.dim() != n {
        return Err(Error::InvalidArgument("dimension mismatch".into()));
    }
    if !(dt > 0.0) || !(t_end >= 0.0) {
        return Err(Error::InvalidArgument("need dt > 0 and T >= 0".into()));
    }
    let steps = (t_end / dt).round() as usize;
    if ((t_end / dt) - steps as f64).abs() > 1e-6 {
        return Err(Error::InvalidArgument(format!("T = {t_end} is not a multiple of dt = {dt}")));
    }
    let lin = Dense::from_matrix(a);
    let rhs = |x: &[f64], out: &mut [f64]| -> bool {
        if !fbar.drift(x, out) {
            return false;
        }
        lin.apply_add(x, out);
        true
    };
    let mut path = SamplePath::new(0.0, dt, n, 0);
    let mut x = x0.to_vec();
    path.push(&x, &[]);
    let (mut k1, mut k2, mut k3, mut k4, mut tmp) = (vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for i in 0..steps {
        let time = i as f64 * dt;
        let stage = |x: &[f64], k: &[f64], c: f64, tmp: &mut [f64]| {
            for j in 0..n {
                tmp[j] = x[j] + c * k[j];
            }
        };
        let mut ok = rhs(&x, &mut k1);
        stage(&x, &k1, 0.5 * dt, &mut tmp);
        ok = ok && rhs(&tmp, &mut k2);
        stage(&x, &k2, 0.5 * dt, &mut tmp);
        ok = ok && rhs(&tmp, &mut k3);
        stage(&x, &k3, dt, &mut tmp);
        ok = ok && rhs(&tmp, &mut k4);
        if !ok {
            return Err(Error::TableRangeExceeded { time });
        }
        for j in 0..n {
            x[j] += dt / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
        }
        if !fbar.drift(&x, &mut tmp) {
            return Err(Error::TableRangeExceeded { time: time + dt });
        }
        path.push(&x, &[]);
    }
    Ok(path)
}

/// `sup_t E|x^eps(t) - xbar(t)|` per eps with a log-log fit. Runs the shared
/// sweep engine with default numerical settings; see [`crate::sweep`].
pub fn averaging_error_sweep(
    system: &SlowFastSystem,
    x0: &[f64],
    t_end: f64,
    eps_list: &[f64],
    n_replicas: usize,
    seed: u64,
    tables: &Tables,
) -> Result<ConvergenceReport> {
    let cfg = SweepConfig::new(x0.to_vec(), t_end, eps_list.to_vec(), n_replicas, seed);
    Ok(run_sweep(system, &cfg, tables)?.averaging_strong)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::benchmark::toy_system;
    use crate::systems::{linear_test_system, SlowFastSystem, ZeroField};
    use std::sync::Arc;

    fn ou_probe(eps: f64) -> SlowFastSystem {
        let f = |_: &[f64], y: &[f64], o: &mut [f64]| o[0] = y[0];
        SlowFastSystem::new(
            "probe",
            DMatrix::zeros(1, 1),
            DMatrix::from_element(1, 1, -1.0),
            Arc::new(f),
            Arc::new(ZeroField),
            1.0,
            eps,
        )
        .unwrap()
        .with_lipschitz(1.0, 0.0)
    }

    #[test]
    fn linear_and_bilinear_interpolation() {
        let t = EmpiricalFunction::new(
            Grid::line(vec![0.0, 1.0, 3.0]),
            1,
            vec![vec![0.0], vec![2.0], vec![0.0]],
            vec![vec![0.1], vec![0.3], vec![0.2]],
        )
        .unwrap();
        let (v, e) = t.eval(&[0.5]).unwrap();
        assert_eq!((v[0], e[0]), (1.0, 0.3));
        assert_eq!(t.eval(&[2.0]).unwrap().0[0], 1.0);
        assert!(t.eval(&[3.5]).is_none());
        assert_eq!(t.lipschitz_estimate(), 2.0);

        let vals: Vec<Vec<f64>> = Grid::Tensor(vec![vec![0.0, 1.0], vec![0.0, 2.0]])
            .nodes()
            .iter()
            .map(|p| vec![p[0] + 3.0 * p[1]])
            .collect();
        let se = vec![vec![0.0]; 4];
        let t2 = EmpiricalFunction::new(Grid::Tensor(vec![vec![0.0, 1.0], vec![0.0, 2.0]]), 1, vals, se).unwrap();
        let v = t2.eval(&[0.25, 1.5]).unwrap().0[0];
        assert!((v - 4.75).abs() < 1e-15);
    }

    #[test]
    fn scattered_is_nearest_with_warning() {
        let g = Grid::Scattered(vec![vec![0.0, 0.0, 0.0], vec![1.0, 1.0, 1.0]]);
        let t = EmpiricalFunction::new(g, 1, vec![vec![1.0], vec![5.0]], vec![vec![0.0]; 2]).unwrap();
        assert_eq!(t.eval(&[0.9, 0.8, 1.0]).unwrap().0[0], 5.0);
        assert!(!t.warnings.is_empty());
    }

    #[test]
    fn time_average_of_centred_ou() {
        let s = ou_probe(0.01);
        let st = NoiseStream::new(3, 0, 1, s.eps / 20.0);
        let est = fbar_time_average(&s, &[0.0], 2000.0 * s.eps, &st).unwrap();
        assert!(est.value[0].abs() < 3.0 * est.stderr[0], "{est:?}");
        // variance of a window mean of OU is about sigma^2 / T on the fast clock
        let expected = (1.0f64 / 2000.0).sqrt();
        assert!(est.stderr[0] > 0.5 * expected && est.stderr[0] < 2.0 * expected);
    }

    #[test]
    fn short_window_is_rejected() {
        let s = ou_probe(0.01);
        let st = NoiseStream::new(3, 0, 1, s.eps / 20.0);
        assert!(fbar_time_average(&s, &[0.0], 10.0 * s.eps, &st).is_err());
    }

    #[test]
    fn ensemble_of_centred_ou_and_toy_origin() {
        let est = fbar_ensemble(&ou_probe(0.01), &[0.0], 400, 5).unwrap();
        assert!(est.value[0].abs() < 3.0 * est.stderr[0]);
        let toy = toy_system(0.1, 0.01).unwrap();
        let est = fbar_ensemble(&toy, &[0.0], 100, 5).unwrap();
        assert_eq!(est.value[0], 0.0);
    }

    #[test]
    fn single_node_table_matches_point_estimate() {
        let toy = toy_system(0.1, 0.01).unwrap();
        let tab = tabulate_fbar(&toy, Grid::line(vec![0.05]), FbarEstimator::Ensemble { n_replicas: 200 }, 9).unwrap();
        let est = fbar_ensemble(&toy, &[0.05], 200, 9).unwrap();
        assert_eq!(tab.values[0], est.value);
        assert_eq!(tab.eval(&[0.05]).unwrap().0, est.value);
    }

    #[test]
    fn rk4_constant_path_and_order() {
        let zero = FnDrift {
            dim: 1,
            f: |_: &[f64], o: &mut [f64]| o[0] = 0.0,
        };
        let p = integrate_averaged(&DMatrix::zeros(1, 1), &zero, &[0.3], 1.0, 0.1).unwrap();
        assert!(p.slow.iter().all(|&v| v == 0.3));

        let cubic = FnDrift {
            dim: 1,
            f: |x: &[f64], o: &mut [f64]| o[0] = -x[0].powi(3) + 0.01 * x[0],
        };
        let a = DMatrix::zeros(1, 1);
        let end = |dt: f64| integrate_averaged(&a, &cubic, &[0.05], 200.0, dt).unwrap().last_slow()[0];
        let (e1, e2, e3) = (end(8.0), end(4.0), end(2.0));
        let order = ((e1 - e2) / (e2 - e3)).abs().log2();
        assert!(order >= 3.5, "order {order}");
        // heads for the stable equilibrium sigma = 0.1
        let p = integrate_averaged(&a, &cubic, &[0.05], 2000.0, 1.0).unwrap();
        assert!(p.slow.windows(2).all(|w| w[1] >= w[0]));
        assert!((p.last_slow()[0] - 0.1).abs() < 1e-6);
    }

    #[test]
    fn table_range_is_enforced() {
        let t = EmpiricalFunction::new(
            Grid::line(vec![0.0, 1.0]),
            1,
            vec![vec![1.0], vec![1.0]],
            vec![vec![0.0]; 2],
        )
        .unwrap();
        match integrate_averaged(&DMatrix::zeros(1, 1), &t, &[0.5], 1.0, 0.01) {
            Err(Error::TableRangeExceeded { time }) => assert!((time - 0.5).abs() < 0.02, "{time}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn mixing_time_uses_lipschitz_when_contracting() {
        let s = linear_test_system(DMatrix::zeros(1, 1), DMatrix::from_element(1, 1, -2.0), 1.0, 0.1).unwrap();
        assert!((fast_mixing_time(&s) - 0.05).abs() < 1e-15);
    }
}
