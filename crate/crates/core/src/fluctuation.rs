//! Fluctuations about the averaged drift: the kernel `H = f - fbar`, its
//! conditional integral `Hbar`, the Green-Kubo covariance `Sigma`, the
//! martingale `M^eps` and the intermediate reduced SDE
//!
//! ```text
//! dx = [A x + fbar(x)] dt + sqrt(eps) sigmabar(x) dW
//! ```
//!
//! `Sigma` and `Hbar` live on the fast clock and do not depend on `eps`.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::averaging::{fast_mixing_time, frozen_series, stationary_samples, Drift, EmpiricalFunction, Estimate, Grid};
use crate::error::{Error, Result};
use crate::linalg::{norm, psd_sqrt, sym_part, Dense};
use crate::parallel::{pairwise_sum, par_blocks, par_map};
use crate::paths::{fast_substep, integrate_with, FastScheme, FastStepper, IntegratorOptions, NoiseStream, Observer, SamplePath};
use crate::report::ConvergenceReport;
use crate::stationary::quadrature_sigma;
use crate::stats::mean_se;
use crate::sweep::{run_sweep, SweepConfig, Tables};
use crate::systems::SlowFastSystem;

/// Fast-clock step of the frozen-slow runs behind `Sigma` and `Hbar`.
pub const FAST_STEP: f64 = 0.05;

/// `H(x, y) = f(x, y) - fbar(x)`.
pub struct FluctuationKernel<'a> {
    pub system: &'a SlowFastSystem,
    pub fbar: &'a EmpiricalFunction,
}

impl FluctuationKernel<'_> {
    /// `false` when `x` is outside the table.
    pub fn eval(&self, x: &[f64], y: &[f64], out: &mut [f64]) -> bool {
        let mut fb = vec![0.0; out.len()];
        if !self.fbar.value_into(x, &mut fb) {
            return false;
        }
        self.system.f.eval(x, y, out);
        out.iter_mut().zip(&fb).for_each(|(o, b)| *o -= b);
        true
    }

    /// Stationary mean of `H` at `x` over `n` pullback samples.
    pub fn centering(&self, x: &[f64], n: usize, seed: u64) -> Result<Estimate> {
        let ys = stationary_samples(self.system, x, n, seed)?;
        let d = self.system.n();
        let mut cols = vec![Vec::with_capacity(n); d];
        let mut buf = vec![0.0; d];
        for y in &ys {
            if !self.eval(x, y, &mut buf) {
                return Err(Error::InvalidArgument("x outside the fbar table".into()));
            }
            cols.iter_mut().zip(&buf).for_each(|(c, v)| c.push(*v));
        }
        let (value, stderr) = cols.iter().map(|c| mean_se(c)).unzip();
        Ok(Estimate { value, stderr })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauDiagnostic {
    pub found: bool,
    /// Selected integration window, fast clock.
    pub window: f64,
    /// Largest spread of the running integral over the last fifth of the
    /// window, in units of its standard error.
    pub spread_in_se: f64,
    pub n_batches: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SigmaEstimate {
    pub sigma: DMatrix<f64>,
    pub stderr: DMatrix<f64>,
    pub plateau: PlateauDiagnostic,
    /// Time-averaged `H` over the run, with its batch-means SE.
    pub centering: Estimate,
}

fn fast_floor(system: &SlowFastSystem) -> f64 {
    fast_mixing_time(system) / system.eps
}

/// Green-Kubo estimate `Sigma = 2 int_0^S C(s) ds` from a single frozen-`x`
/// run. `t_corr` and `t_total` are fast-clock lengths; the stream step sets
/// the sampling interval `stream.dt() / eps`.
pub fn sigma_estimate(
    system: &SlowFastSystem,
    x: &[f64],
    fbar: &[f64],
    t_corr: f64,
    t_total: f64,
    stream: &NoiseStream,
) -> Result<SigmaEstimate> {
    let est = sigma_estimate_raw(system, x, fbar, t_corr, t_total, stream)?;
    if !est.plateau.found {
        return Err(Error::NoPlateau);
    }
    for i in 0..est.sigma.nrows() {
        let (v, se) = (est.sigma[(i, i)], est.stderr[(i, i)]);
        if v < -3.0 * se {
            return Err(Error::NegativeDiagonal { index: i, value: v });
        }
    }
    Ok(est)
}

/// As [`sigma_estimate`] without the plateau and sign checks.
pub fn sigma_estimate_raw(
    system: &SlowFastSystem,
    x: &[f64],
    fbar: &[f64],
    t_corr: f64,
    t_total: f64,
    stream: &NoiseStream,
) -> Result<SigmaEstimate> {
    let n = system.n();
    if fbar.len() != n {
        return Err(Error::InvalidArgument("fbar has the wrong dimension".into()));
    }
    let floor = fast_floor(system);
    if !(t_corr >= 20.0 * floor * (1.0 - 1e-12)) || !(t_total >= 50.0 * t_corr * (1.0 - 1e-12)) {
        return Err(Error::InvalidArgument(format!(
            "need t_corr >= {} and t_total >= 50 t_corr (fast clock)",
            20.0 * floor
        )));
    }
    let d = stream.dt() / system.eps;
    let series = frozen_series(
        system,
        x,
        t_total * system.eps,
        stream,
        |x, y, out| {
            system.f.eval(x, y, out);
            out.iter_mut().zip(fbar).for_each(|(o, b)| *o -= b);
        },
        n,
    )?;
    let len = series[0].len();
    let lags = (t_corr / d).round() as usize;
    let nb = ((t_total / (2.0 * t_corr)).floor() as usize).clamp(2, 50);
    let blen = len / nb;
    if blen <= lags {
        return Err(Error::InvalidArgument("batches shorter than the correlation window".into()));
    }
    // running integrals per batch: integ[b][l][i*n+j]
    let integ: Vec<Vec<Vec<f64>>> = par_map(nb, |b| {
        let lo = b * blen;
        let mut cov = vec![vec![0.0; n * n]; lags + 1];
        for (l, c) in cov.iter_mut().enumerate() {
            let cnt = (blen - l) as f64;
            let mut terms = vec![0.0; blen - l];
            for i in 0..n {
                for j in 0..n {
                    let (si, sj) = (&series[i][lo..lo + blen], &series[j][lo..lo + blen]);
                    for k in 0..blen - l {
                        terms[k] = si[k + l] * sj[k];
                    }
                    c[i * n + j] = pairwise_sum(&terms) / cnt;
                }
            }
        }
        let mut run = vec![vec![0.0; n * n]; lags + 1];
        for l in 1..=lags {
            for e in 0..n * n {
                run[l][e] = run[l - 1][e] + d * (cov[l - 1][e] + cov[l][e]);
            }
        }
        // symmetrise: 2 int C and its transpose average
        for r in run.iter_mut() {
            let m = DMatrix::from_row_slice(n, n, r);
            let s = sym_part(&m);
            r.copy_from_slice(s.transpose().as_slice());
        }
        run
    });
    let mut mean = vec![vec![0.0; n * n]; lags + 1];
    let mut se = vec![vec![0.0; n * n]; lags + 1];
    for l in 0..=lags {
        for e in 0..n * n {
            let v: Vec<f64> = integ.iter().map(|b| b[l][e]).collect();
            let (m, s) = mean_se(&v);
            mean[l][e] = m;
            se[l][e] = s;
        }
    }
    let start = lags / 2;
    let mut chosen = None;
    let mut worst_at_choice = f64::INFINITY;
    for lc in start.max(5)..=lags {
        let lo = (0.8 * lc as f64).floor() as usize;
        let mut worst: f64 = 0.0;
        let mut flat = true;
        for e in 0..n * n {
            let vals = mean[lo..=lc].iter().map(|r| r[e]);
            let (mn, mx) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
            let spread = mx - mn;
            let s = se[lc][e];
            if spread > s {
                flat = false;
            }
            let ratio = if s > 0.0 { spread / s } else if spread > 0.0 { f64::INFINITY } else { 0.0 };
            worst = worst.max(ratio);
        }
        if flat {
            chosen = Some(lc);
            worst_at_choice = worst;
            break;
        }
        if lc == lags {
            worst_at_choice = worst;
        }
    }
    let l = chosen.unwrap_or(lags);
    let sigma = sym_part(&DMatrix::from_row_slice(n, n, &mean[l]));
    let stderr = DMatrix::from_row_slice(n, n, &se[l]);
    let centering = {
        let (value, stderr) = series.iter().map(|s| crate::stats::batch_means(s, nb)).unzip();
        Estimate { value, stderr }
    };
    Ok(SigmaEstimate {
        sigma,
        stderr,
        plateau: PlateauDiagnostic {
            found: chosen.is_some(),
            window: l as f64 * d,
            spread_in_se: worst_at_choice,
            n_batches: nb,
        },
        centering,
    })
}

/// Symmetric PSD square root with eigenvalues in `[-1e-8 tr, 0)` clipped.
pub fn sigma_sqrt(sigma: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let clip_tol = 1e-8 * sigma.trace().abs();
    psd_sqrt(sigma, clip_tol)
}

/// Per-path integrals `int_0^T H(x, Y_s) ds` from `y`, fast clock, one per
/// inner path. Paths share noise across `(x, y)` for the same seed.
fn hbar_paths(
    system: &SlowFastSystem,
    x: &[f64],
    y: &[f64],
    fbar: &[f64],
    n_inner: usize,
    t_inner: f64,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let (n, m) = (system.n(), system.m());
    let h = FAST_STEP * system.eps;
    let stepper = FastStepper::new(system, h, FastScheme::ExponentialHeun)?;
    let steps = (t_inner / FAST_STEP).round() as usize;
    par_map(n_inner, |p| {
        let stream = NoiseStream::new(seed, p as u64, m, h);
        let mut ws = stepper.workspace();
        let mut yy = y.to_vec();
        let mut z = vec![0.0; m];
        let mut h0 = vec![0.0; n];
        let mut h1 = vec![0.0; n];
        let mut acc = vec![0.0; n];
        system.f.eval(x, &yy, &mut h0);
        for k in 0..steps {
            stream.standard_normal(k as i64, &mut z);
            stepper.frozen_step(x, &mut yy, &z, &mut ws);
            system.f.eval(x, &yy, &mut h1);
            for i in 0..n {
                acc[i] += 0.5 * FAST_STEP * (h0[i] + h1[i] - 2.0 * fbar[i]);
            }
            std::mem::swap(&mut h0, &mut h1);
            if !(norm(&yy) <= 1e12) {
                let mut partial = SamplePath::new(0.0, h, n, m);
                partial.push(x, &yy);
                return Err(Error::BlowUp {
                    time: (k + 1) as f64 * h,
                    partial: Box::new(partial),
                });
            }
        }
        Ok(acc)
    })
    .into_iter()
    .collect()
}

fn hbar_check(system: &SlowFastSystem, n_inner: usize, t_inner: f64) -> Result<()> {
    let floor = 20.0 * fast_floor(system);
    if n_inner < 100 || !(t_inner >= floor * (1.0 - 1e-12)) {
        return Err(Error::InvalidArgument(format!(
            "hbar_estimate needs n_inner >= 100 and t_inner >= {floor} (fast clock)"
        )));
    }
    Ok(())
}

/// `Hbar(x, y) = int_0^T E_y[H(x, Y_s)] ds` on the fast clock by nested Monte
/// Carlo over `n_inner` frozen-`x` paths launched from `y`.
pub fn hbar_estimate(
    system: &SlowFastSystem,
    x: &[f64],
    y: &[f64],
    fbar: &[f64],
    n_inner: usize,
    t_inner: f64,
    seed: u64,
) -> Result<Estimate> {
    hbar_check(system, n_inner, t_inner)?;
    let paths = hbar_paths(system, x, y, fbar, n_inner, t_inner, seed)?;
    let (value, stderr) = (0..system.n())
        .map(|i| mean_se(&paths.iter().map(|p| p[i]).collect::<Vec<_>>()))
        .unzip();
    Ok(Estimate { value, stderr })
}

/// Diffusion factor of the intermediate model.
pub trait Diffusion: Sync {
    fn dim(&self) -> usize;
    /// Writes `sigmabar(x)` row-major; `false` outside the domain.
    fn factor(&self, x: &[f64], out: &mut [f64]) -> bool;
}

/// A factor given by a closure, defined everywhere.
pub struct FnDiffusion<F> {
    pub dim: usize,
    pub f: F,
}

impl<F: Fn(&[f64], &mut [f64]) + Sync> Diffusion for FnDiffusion<F> {
    fn dim(&self) -> usize {
        self.dim
    }

    fn factor(&self, x: &[f64], out: &mut [f64]) -> bool {
        (self.f)(x, out);
        true
    }
}

/// `Sigma(x)` and `sigmabar(x)` on a grid of slow states.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionTable {
    pub n: usize,
    /// `Sigma` entries row-major with standard errors.
    pub sigma: EmpiricalFunction,
    /// `sigmabar` entries row-major, interpolated entrywise.
    pub sigma_bar: EmpiricalFunction,
    pub window: Vec<f64>,
    pub plateau: Vec<Option<PlateauDiagnostic>>,
    pub method: String,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SigmaMethod {
    /// [`sigma_estimate`] at every node; lengths on the fast clock.
    GreenKubo { t_corr: f64, t_total: f64 },
    /// Poisson-equation quadrature (scalar fast variable).
    Quadrature { n_nodes: usize },
}

impl DiffusionTable {
    /// Builds the table from per-node `(Sigma, SE, plateau)`.
    pub fn from_nodes(
        grid: Grid,
        n: usize,
        nodes: Vec<(DMatrix<f64>, DMatrix<f64>, Option<PlateauDiagnostic>)>,
        method: &str,
        seed: u64,
    ) -> Result<Self> {
        let mut vals = Vec::with_capacity(nodes.len());
        let mut ses = Vec::with_capacity(nodes.len());
        let mut bars = Vec::with_capacity(nodes.len());
        let mut window = Vec::with_capacity(nodes.len());
        let mut plateau = Vec::with_capacity(nodes.len());
        for (s, se, p) in nodes {
            let s = sym_part(&s);
            let bar = sigma_sqrt(&s)?;
            vals.push(s.transpose().as_slice().to_vec());
            ses.push(se.transpose().as_slice().to_vec());
            bars.push(bar.transpose().as_slice().to_vec());
            window.push(p.as_ref().map_or(0.0, |p| p.window));
            plateau.push(p);
        }
        let zero = vec![vec![0.0; n * n]; bars.len()];
        Ok(DiffusionTable {
            n,
            sigma: EmpiricalFunction::new(grid.clone(), n * n, vals, ses)?,
            sigma_bar: EmpiricalFunction::new(grid, n * n, bars, zero)?,
            window,
            plateau,
            method: method.into(),
            seed,
        })
    }

    pub fn sigma_at(&self, x: &[f64]) -> Option<DMatrix<f64>> {
        self.sigma.eval(x).map(|(v, _)| DMatrix::from_row_slice(self.n, self.n, &v))
    }

    /// Trace of `Sigma(x)`; `None` outside the grid.
    pub fn trace_at(&self, x: &[f64]) -> Option<f64> {
        self.sigma_at(x).map(|s| s.trace())
    }

    /// CSV: `x_1..`, `Sigma_ij` row-major, `se_ij`, `window`.
    pub fn to_csv(&self) -> String {
        let n = self.n;
        let mut cols: Vec<String> = (1..=self.sigma.dim_in()).map(|i| format!("x_{i}")).collect();
        for p in ["sigma", "se"] {
            for i in 1..=n {
                for j in 1..=n {
                    cols.push(format!("{p}_{i}{j}"));
                }
            }
        }
        cols.push("window".into());
        let mut s = cols.join(",");
        s.push('\n');
        for (k, x) in self.sigma.grid.nodes().iter().enumerate() {
            let row: Vec<String> = x
                .iter()
                .chain(&self.sigma.values[k])
                .chain(&self.sigma.stderr[k])
                .chain(std::iter::once(&self.window[k]))
                .map(|v| format!("{v:.16e}"))
                .collect();
            let _ = writeln!(s, "{}", row.join(","));
        }
        s
    }

    pub fn metadata_json(&self) -> serde_json::Value {
        serde_json::json!({
            "method": self.method,
            "seed": self.seed,
            "n": self.n,
            "n_nodes": self.sigma.n_nodes(),
            "plateau": self.plateau,
        })
    }
}

impl Diffusion for DiffusionTable {
    fn dim(&self) -> usize {
        self.n
    }

    fn factor(&self, x: &[f64], out: &mut [f64]) -> bool {
        self.sigma_bar.value_into(x, out)
    }
}

/// Tabulates `Sigma` over `grid`; `fbar` centres the kernel.
pub fn tabulate_sigma(
    system: &SlowFastSystem,
    grid: Grid,
    fbar: &EmpiricalFunction,
    method: SigmaMethod,
    steps_per_eps: f64,
    seed: u64,
) -> Result<DiffusionTable> {
    let nodes = grid.nodes();
    let n = system.n();
    let per: Vec<Result<(DMatrix<f64>, DMatrix<f64>, Option<PlateauDiagnostic>)>> = par_map(nodes.len(), |k| {
        let x = &nodes[k];
        match method {
            SigmaMethod::GreenKubo { t_corr, t_total } => {
                let fb = fbar
                    .eval(x)
                    .ok_or_else(|| Error::InvalidArgument("sigma grid outside the fbar table".into()))?
                    .0;
                let stream = NoiseStream::new(seed, 0, system.m(), system.eps / steps_per_eps);
                let e = sigma_estimate(system, x, &fb, t_corr, t_total, &stream)?;
                Ok((e.sigma, e.stderr, Some(e.plateau)))
            }
            SigmaMethod::Quadrature { n_nodes } => {
                Ok((quadrature_sigma(system, x, n_nodes)?, DMatrix::zeros(n, n), None))
            }
        }
    });
    let per = per.into_iter().collect::<Result<Vec<_>>>()?;
    let label = match method {
        SigmaMethod::GreenKubo { .. } => "green_kubo",
        SigmaMethod::Quadrature { .. } => "quadrature",
    };
    DiffusionTable::from_nodes(grid, n, per, label, seed)
}

/// Euler-Maruyama steps of the intermediate model, calling `hook(x, dW)`
/// before every step; returns the endpoint.
#[allow(clippy::too_many_arguments)]
pub(crate) fn run_intermediate(
    a: &Dense,
    fbar: &dyn Drift,
    diffusion: &dyn Diffusion,
    eps: f64,
    x0: &[f64],
    steps: usize,
    dt: f64,
    stream: &NoiseStream,
    mut hook: impl FnMut(usize, &[f64], &[f64]),
) -> Result<Vec<f64>> {
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut drift = vec![0.0; n];
    let mut fac = vec![0.0; n * n];
    let mut dw = vec![0.0; n];
    let sq = (eps * dt).sqrt();
    for k in 0..steps {
        if !fbar.drift(&x, &mut drift) || !diffusion.factor(&x, &mut fac) {
            return Err(Error::TableRangeExceeded { time: k as f64 * dt });
        }
        a.apply_add(&x, &mut drift);
        stream.standard_normal(k as i64, &mut dw);
        hook(k, &x, &dw);
        for i in 0..n {
            let mut noise = 0.0;
            for j in 0..n {
                noise += fac[i * n + j] * dw[j];
            }
            x[i] += dt * drift[i] + sq * noise;
        }
    }
    if !fbar.drift(&x, &mut drift) {
        return Err(Error::TableRangeExceeded { time: steps as f64 * dt });
    }
    Ok(x)
}

/// Euler-Maruyama path of the intermediate model. The caller supplies the
/// auxiliary stream (dimension `n`, step `dt`).
#[allow(clippy::too_many_arguments)]
pub fn integrate_intermediate(
    a: &DMatrix<f64>,
    fbar: &dyn Drift,
    diffusion: &dyn Diffusion,
    eps: f64,
    x0: &[f64],
    t_end: f64,
    dt: f64,
    stream: &NoiseStream,
) -> Result<SamplePath> {
    let n = x0.len();
    if fbar.dim() != n || diffusion.dim() != n || stream.dim() != n || a.nrows() != n {
        return Err(Error::InvalidArgument("dimension mismatch".into()));
    }
    if ((stream.dt() - dt) / dt).abs() > 1e-9 {
        return Err(Error::StreamStepMismatch {
            stream_dt: stream.dt(),
            substep: dt,
        });
    }
    let steps = (t_end / dt).round() as usize;
    let mut path = SamplePath::new(0.0, dt, n, 0);
    let mut last = Vec::new();
    let end = run_intermediate(&Dense::from_matrix(a), fbar, diffusion, eps, x0, steps, dt, stream, |k, x, _| {
        if k > 0 && last.len() == n {
            path.push(&last, &[]);
        }
        last = x.to_vec();
    });
    if last.len() == n {
        path.push(&last, &[]);
    }
    let end = end?;
    path.push(&end, &[]);
    Ok(path)
}

/// Weak error of the intermediate model against the full system per eps, with
/// a log-log fit. Runs the shared sweep engine; see [`crate::sweep`].
pub fn intermediate_error_sweep(
    system: &SlowFastSystem,
    x0: &[f64],
    t_end: f64,
    eps_list: &[f64],
    n_replicas: usize,
    seed: u64,
    tables: &Tables,
) -> Result<ConvergenceReport> {
    let cfg = SweepConfig::new(x0.to_vec(), t_end, eps_list.to_vec(), n_replicas, seed);
    Ok(run_sweep(system, &cfg, tables)?.intermediate_weak)
}

/// `Hbar` and `d Hbar / dx` on a tensor grid of `(x, y)`, scalar slow and fast
/// variables. The `x` spacing is the finite-difference step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HbarCache {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub hbar: EmpiricalFunction,
    pub dhbar: EmpiricalFunction,
    /// RMS standard error of the derivative over RMS derivative.
    pub relative_se: f64,
    pub n_inner: usize,
    pub t_inner: f64,
}

impl HbarCache {
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        system: &SlowFastSystem,
        fbar: &EmpiricalFunction,
        x_range: (f64, f64),
        y_range: (f64, f64),
        n_y: usize,
        n_inner: usize,
        t_inner: f64,
        seed: u64,
    ) -> Result<Self> {
        if system.n() != 1 || system.m() != 1 {
            return Err(Error::Unsupported("the Hbar cache needs scalar slow and fast variables".into()));
        }
        hbar_check(system, n_inner, t_inner)?;
        let xc = 0.5 * (x_range.0 + x_range.1);
        let hx = (1e-2 * xc.abs()).max(1e-3);
        let k_lo = ((x_range.0 - xc) / hx).floor() as i64 - 1;
        let k_hi = ((x_range.1 - xc) / hx).ceil() as i64 + 1;
        let xs: Vec<f64> = (k_lo..=k_hi).map(|k| xc + k as f64 * hx).collect();
        let ys: Vec<f64> = (0..n_y)
            .map(|j| y_range.0 + (y_range.1 - y_range.0) * j as f64 / (n_y - 1) as f64)
            .collect();
        let mut fbs = Vec::with_capacity(xs.len());
        for &x in &xs {
            fbs.push(
                fbar.eval(&[x])
                    .ok_or_else(|| Error::InvalidArgument(format!("x = {x} outside the fbar table")))?
                    .0[0],
            );
        }
        // per node, per inner path
        let (nx, ny) = (xs.len(), ys.len());
        let raw: Vec<Result<Vec<f64>>> = par_map(nx * ny, |q| {
            let (i, j) = (q / ny, q % ny);
            Ok(hbar_paths(system, &[xs[i]], &[ys[j]], &[fbs[i]], n_inner, t_inner, seed)?
                .into_iter()
                .map(|v| v[0])
                .collect())
        });
        let raw: Vec<Vec<f64>> = raw.into_iter().collect::<Result<_>>()?;
        let at = |i: usize, j: usize| &raw[i * ny + j];
        let mut hv = Vec::with_capacity(nx * ny);
        let mut hse = Vec::with_capacity(nx * ny);
        let mut dv = Vec::with_capacity(nx * ny);
        let mut dse = Vec::with_capacity(nx * ny);
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..nx {
            for j in 0..ny {
                let (m, s) = mean_se(at(i, j));
                hv.push(vec![m]);
                hse.push(vec![s]);
                let (a, b, w) = if i == 0 {
                    (1, 0, hx)
                } else if i == nx - 1 {
                    (nx - 1, nx - 2, hx)
                } else {
                    (i + 1, i - 1, 2.0 * hx)
                };
                let diffs: Vec<f64> = at(a, j).iter().zip(at(b, j)).map(|(p, q)| (p - q) / w).collect();
                let (dm, ds) = mean_se(&diffs);
                dv.push(vec![dm]);
                dse.push(vec![ds]);
                if i > 0 && i < nx - 1 {
                    num += ds * ds;
                    den += dm * dm;
                }
            }
        }
        let relative_se = if den > 0.0 { (num / den).sqrt() } else if num > 0.0 { f64::INFINITY } else { 0.0 };
        let grid = Grid::Tensor(vec![xs.clone(), ys.clone()]);
        Ok(HbarCache {
            xs,
            ys,
            hbar: EmpiricalFunction::new(grid.clone(), 1, hv, hse)?,
            dhbar: EmpiricalFunction::new(grid, 1, dv, dse)?,
            relative_se,
            n_inner,
            t_inner,
        })
    }

    fn clamp(&self, x: f64, y: f64) -> ([f64; 2], bool) {
        let cx = x.clamp(self.xs[0], self.xs[self.xs.len() - 1]);
        let cy = y.clamp(self.ys[0], self.ys[self.ys.len() - 1]);
        ([cx, cy], cx != x || cy != y)
    }

    /// `(Hbar, d Hbar/dx, clamped)` with the state clamped into the grid.
    pub fn lookup(&self, x: f64, y: f64) -> (f64, f64, bool) {
        let (p, c) = self.clamp(x, y);
        let mut v = [0.0];
        let mut d = [0.0];
        self.hbar.value_into(&p, &mut v);
        self.dhbar.value_into(&p, &mut d);
        (v[0], d[0], c)
    }
}

/// F_s-measurable test functionals for the martingale check.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestFn {
    One,
    /// `x_1(s)`.
    Slow,
    /// `tanh(y_1(s) / sigma)`.
    FastTanh,
}

impl TestFn {
    pub fn name(self) -> &'static str {
        match self {
            TestFn::One => "one",
            TestFn::Slow => "x(s)",
            TestFn::FastTanh => "tanh(y(s)/sigma)",
        }
    }

    fn eval(self, x: f64, y: f64, sigma: f64) -> f64 {
        match self {
            TestFn::One => 1.0,
            TestFn::Slow => x,
            TestFn::FastTanh => (y / sigma.abs()).tanh(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MartingaleConfig {
    pub x0: Vec<f64>,
    pub t_end: f64,
    pub dt_slow: f64,
    pub n_replicas: usize,
    pub seed: u64,
    /// `(s, t)` pairs on the slow grid.
    pub schedule: Vec<(f64, f64)>,
    pub test_fns: Vec<TestFn>,
    pub n_inner: usize,
    /// Fast clock.
    pub t_inner: f64,
    pub n_y: usize,
    pub pilot: usize,
    pub options: IntegratorOptions,
}

impl MartingaleConfig {
    pub fn new(x0: Vec<f64>, n_replicas: usize, seed: u64) -> Self {
        MartingaleConfig {
            x0,
            t_end: 1.0,
            dt_slow: 1e-3,
            n_replicas,
            seed,
            schedule: vec![(0.0, 0.5), (0.25, 0.75), (0.5, 1.0)],
            test_fns: vec![TestFn::One, TestFn::Slow, TestFn::FastTanh],
            n_inner: 256,
            t_inner: 20.0,
            n_y: 33,
            pilot: 200,
            options: IntegratorOptions::heun(20.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualRow {
    pub s: f64,
    pub t: f64,
    pub test_fn: String,
    pub mean: f64,
    pub stderr: f64,
    pub within_3se: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MartingaleReport {
    pub eps: f64,
    pub rows: Vec<ResidualRow>,
    pub all_within: bool,
    /// `E[M_T^2] / E[int_0^T tr Sigma(x(s)) ds]`.
    pub qv_ratio: f64,
    pub qv_ratio_se: f64,
    /// Realised quadratic variation over the same denominator.
    pub realised_qv_ratio: f64,
    pub cache_relative_se: f64,
    pub clamped_fraction: f64,
    pub n_replicas: usize,
    pub seed: u64,
}

struct MartingaleObserver<'a> {
    sys: &'a SlowFastSystem,
    fbar: &'a EmpiricalFunction,
    sigma: &'a DiffusionTable,
    cache: &'a HbarCache,
    fbar_range: (f64, f64),
    sqe: f64,
    h: f64,
    int_h: f64,
    int_dx: f64,
    int_sigma: f64,
    qv: f64,
    hbar0: f64,
    m_prev: f64,
    lookups: u64,
    clamped: u64,
    /// `(H, dHbar/dx * xdot, tr Sigma)` at the current state.
    last: Option<(f64, f64, f64)>,
    m: Vec<f64>,
    xs: Vec<f64>,
    ys: Vec<f64>,
}

impl MartingaleObserver<'_> {
    /// `(H, dHbar/dx * xdot, tr Sigma, Hbar)` at `(x, y)`.
    fn pieces(&mut self, x: f64, y: f64) -> (f64, f64, f64, f64) {
        let xc = x.clamp(self.fbar_range.0, self.fbar_range.1);
        let mut fb = [0.0];
        self.fbar.value_into(&[xc], &mut fb);
        let tr = self.sigma.trace_at(&[xc]).unwrap_or(0.0);
        let mut f = [0.0];
        self.sys.f.eval(&[x], &[y], &mut f);
        let xdot = self.sys.a[(0, 0)] * x + f[0];
        let (hb, dhb, c) = self.cache.lookup(x, y);
        self.lookups += 1;
        self.clamped += u64::from(c || xc != x);
        (f[0] - fb[0], dhb * xdot, tr, hb)
    }
}

impl Observer for MartingaleObserver<'_> {
    fn substep(&mut self, _k: u64, x0: &[f64], y0: &[f64], x1: &[f64], y1: &[f64], _z: &[f64]) {
        let (h0, d0, s0) = match self.last {
            Some(p) => p,
            None => {
                let (a, b, c, _) = self.pieces(x0[0], y0[0]);
                (a, b, c)
            }
        };
        let (h1, d1, s1, hb1) = self.pieces(x1[0], y1[0]);
        self.last = Some((h1, d1, s1));
        self.int_h += 0.5 * self.h * (h0 + h1);
        self.int_dx += 0.5 * self.h * (d0 + d1);
        self.int_sigma += 0.5 * self.h * (s0 + s1);
        let m = self.sqe * (hb1 - self.hbar0) + self.int_h / self.sqe - self.sqe * self.int_dx;
        self.qv += (m - self.m_prev) * (m - self.m_prev);
        self.m_prev = m;
    }

    fn record(&mut self, i: usize, _t: f64, x: &[f64], y: &[f64]) {
        if i == 0 {
            self.hbar0 = self.cache.lookup(x[0], y[0]).0;
        }
        self.m.push(self.m_prev);
        self.xs.push(x[0]);
        self.ys.push(y[0]);
    }
}

/// Assembles `M^eps` along full-system replicas and tests
/// `E[(M_t - M_s) phi(path up to s)] = 0` and the quadratic variation.
pub fn martingale_residual(
    system: &SlowFastSystem,
    cfg: &MartingaleConfig,
    fbar: &EmpiricalFunction,
    sigma: &DiffusionTable,
) -> Result<MartingaleReport> {
    if system.n() != 1 || system.m() != 1 {
        return Err(Error::Unsupported("martingale_residual needs scalar slow and fast variables".into()));
    }
    let steps = (cfg.t_end / cfg.dt_slow).round() as usize;
    let grid_index = |t: f64| -> Result<usize> {
        let k = (t / cfg.dt_slow).round();
        if (t / cfg.dt_slow - k).abs() > 1e-6 || k as usize > steps {
            return Err(Error::InvalidArgument(format!("schedule time {t} is not on the slow grid")));
        }
        Ok(k as usize)
    };
    let sched: Vec<(usize, usize)> = cfg
        .schedule
        .iter()
        .map(|&(s, t)| Ok((grid_index(s)?, grid_index(t)?)))
        .collect::<Result<_>>()?;
    let (_, h) = fast_substep(system.eps, cfg.dt_slow, &cfg.options);
    let y0s = |lo: usize, hi: usize| stationary_samples_range(system, &cfg.x0, lo, hi, cfg.seed);

    // pilot run for the cache extent
    let pilot_n = cfg.pilot.min(cfg.n_replicas).max(1);
    let pilot_y0 = y0s(0, pilot_n)?;
    let ext: Vec<Result<(f64, f64, f64, f64)>> = par_map(pilot_n, |r| {
        struct Ext(f64, f64, f64, f64);
        impl Observer for Ext {
            fn record(&mut self, _i: usize, _t: f64, x: &[f64], y: &[f64]) {
                self.0 = self.0.min(x[0]);
                self.1 = self.1.max(x[0]);
                self.2 = self.2.min(y[0]);
                self.3 = self.3.max(y[0]);
            }
        }
        let stream = NoiseStream::new(cfg.seed, r as u64, 1, h);
        let mut e = Ext(f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        integrate_with(system, &cfg.x0, &pilot_y0[r], cfg.t_end, cfg.dt_slow, &stream, &cfg.options, &mut e)?;
        Ok((e.0, e.1, e.2, e.3))
    });
    let ext = ext.into_iter().collect::<Result<Vec<_>>>()?;
    let (xlo, xhi, ylo, yhi) = ext.iter().fold(
        (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY),
        |a, e| (a.0.min(e.0), a.1.max(e.1), a.2.min(e.2), a.3.max(e.3)),
    );
    let (xw, yw) = (xhi - xlo, yhi - ylo);
    let cache = HbarCache::build(
        system,
        fbar,
        (xlo - xw, xhi + xw),
        (ylo - 0.25 * yw, yhi + 0.25 * yw),
        cfg.n_y,
        cfg.n_inner,
        cfg.t_inner,
        cfg.seed ^ 0x4842_4152,
    )?;
    if cache.relative_se > 0.5 {
        return Err(Error::CacheResolutionTooCoarse {
            relative_se: cache.relative_se,
        });
    }

    let fbar_range = match &fbar.grid {
        Grid::Tensor(axes) => (axes[0][0], *axes[0].last().unwrap()),
        Grid::Scattered(_) => (f64::NEG_INFINITY, f64::INFINITY),
    };
    struct Out {
        m: Vec<f64>,
        xs: Vec<f64>,
        ys: Vec<f64>,
        int_sigma: f64,
        qv: f64,
        lookups: u64,
        clamped: u64,
    }
    let block = 64;
    let blocks: Vec<Result<Vec<Out>>> = par_blocks(cfg.n_replicas, block, |range| {
        let y0 = y0s(range.start, range.end)?;
        let mut outs = Vec::with_capacity(range.len());
        for (q, r) in range.enumerate() {
            let stream = NoiseStream::new(cfg.seed, r as u64, 1, h);
            let mut obs = MartingaleObserver {
                sys: system,
                fbar,
                sigma,
                cache: &cache,
                sqe: system.eps.sqrt(),
                fbar_range,
                h,
                int_h: 0.0,
                int_dx: 0.0,
                int_sigma: 0.0,
                qv: 0.0,
                hbar0: 0.0,
                m_prev: 0.0,
                lookups: 0,
                clamped: 0,
                last: None,
                m: Vec::with_capacity(steps + 1),
                xs: Vec::with_capacity(steps + 1),
                ys: Vec::with_capacity(steps + 1),
            };
            integrate_with(system, &cfg.x0, &y0[q], cfg.t_end, cfg.dt_slow, &stream, &cfg.options, &mut obs)?;
            outs.push(Out {
                m: sched.iter().flat_map(|&(s, t)| [obs.m[s], obs.m[t]]).chain([obs.m[steps]]).collect(),
                xs: sched.iter().map(|&(s, _)| obs.xs[s]).collect(),
                ys: sched.iter().map(|&(s, _)| obs.ys[s]).collect(),
                int_sigma: obs.int_sigma,
                qv: obs.qv,
                lookups: obs.lookups,
                clamped: obs.clamped,
            });
        }
        Ok(outs)
    });
    let outs: Vec<Out> = blocks.into_iter().collect::<Result<Vec<_>>>()?.into_iter().flatten().collect();

    let mut rows = Vec::new();
    for (p, &(s, t)) in sched.iter().enumerate() {
        for &phi in &cfg.test_fns {
            let v: Vec<f64> = outs
                .iter()
                .map(|o| (o.m[2 * p + 1] - o.m[2 * p]) * phi.eval(o.xs[p], o.ys[p], system.sigma))
                .collect();
            let (mean, se) = mean_se(&v);
            rows.push(ResidualRow {
                s: s as f64 * cfg.dt_slow,
                t: t as f64 * cfg.dt_slow,
                test_fn: phi.name().into(),
                mean,
                stderr: se,
                within_3se: mean.abs() <= 3.0 * se,
            });
        }
    }
    let last = 2 * sched.len();
    let m2: Vec<f64> = outs.iter().map(|o| o.m[last] * o.m[last]).collect();
    let den: Vec<f64> = outs.iter().map(|o| o.int_sigma).collect();
    let qv: Vec<f64> = outs.iter().map(|o| o.qv).collect();
    let (a, sa) = mean_se(&m2);
    let (b, sb) = mean_se(&den);
    let cov = {
        let n = outs.len() as f64;
        let s: Vec<f64> = m2.iter().zip(&den).map(|(p, q)| (p - a) * (q - b)).collect();
        pairwise_sum(&s) / (n - 1.0) / n
    };
    let ratio = a / b;
    let var = ratio * ratio * (sa * sa / (a * a) + sb * sb / (b * b) - 2.0 * cov / (a * b));
    let (lookups, clamped) = outs.iter().fold((0u64, 0u64), |acc, o| (acc.0 + o.lookups, acc.1 + o.clamped));
    Ok(MartingaleReport {
        eps: system.eps,
        all_within: rows.iter().all(|r| r.within_3se),
        rows,
        qv_ratio: ratio,
        qv_ratio_se: var.max(0.0).sqrt(),
        realised_qv_ratio: mean_se(&qv).0 / b,
        cache_relative_se: cache.relative_se,
        clamped_fraction: clamped as f64 / lookups.max(1) as f64,
        n_replicas: cfg.n_replicas,
        seed: cfg.seed,
    })
}

/// Stationary fast samples at `x` for replicas `lo..hi`.
pub(crate) fn stationary_samples_range(
    system: &SlowFastSystem,
    x: &[f64],
    lo: usize,
    hi: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let burn_in = crate::averaging::stationary_horizon(system);
    (lo..hi)
        .map(|r| {
            let stream = crate::manifold::manifold_stream(seed, r as u64, system.m(), system.eps);
            let (h, eta) = crate::manifold::h0_with_eta(system, x, &stream, burn_in)?;
            Ok(h.iter().zip(&eta).map(|(a, b)| a + b).collect())
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::ZeroField;
    use std::sync::Arc;

    fn ou_probe(eps: f64, sigma: f64) -> SlowFastSystem {
        let f = |_: &[f64], y: &[f64], o: &mut [f64]| o[0] = y[0];
        SlowFastSystem::new(
            "probe",
            DMatrix::zeros(1, 1),
            DMatrix::from_element(1, 1, -1.0),
            Arc::new(f),
            Arc::new(ZeroField),
            sigma,
            eps,
        )
        .unwrap()
        .with_lipschitz(1.0, 0.0)
    }

    #[test]
    fn green_kubo_for_ou_is_sigma_squared() {
        let s = ou_probe(0.01, 0.5);
        let st = NoiseStream::new(11, 0, 1, FAST_STEP * s.eps);
        let e = sigma_estimate(&s, &[0.0], &[0.0], 20.0, 20000.0, &st).unwrap();
        let v = e.sigma[(0, 0)];
        assert!((v - 0.25).abs() < 3.0 * e.stderr[(0, 0)] + 0.01, "{v} +- {}", e.stderr[(0, 0)]);
        assert!(e.plateau.found && e.plateau.window >= 10.0);
    }

    #[test]
    fn hbar_for_ou_is_the_start_point() {
        let s = ou_probe(0.01, 0.5);
        for y in [-0.4, 0.3] {
            let e = hbar_estimate(&s, &[0.0], &[y], &[0.0], 400, 20.0, 3).unwrap();
            assert!((e.value[0] - y).abs() < 3.0 * e.stderr[0] + 1e-3, "{e:?}");
        }
        assert!(hbar_estimate(&s, &[0.0], &[0.1], &[0.0], 50, 20.0, 3).is_err());
    }

    #[test]
    fn sigma_sqrt_cases() {
        let i = DMatrix::<f64>::identity(2, 2);
        assert!((sigma_sqrt(&i).unwrap() - &i).norm() < 1e-14);
        let d = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![4.0, 0.0]));
        let r = sigma_sqrt(&d).unwrap();
        assert!((r[(0, 0)] - 2.0).abs() < 1e-14 && r[(1, 1)].abs() < 1e-14);
        let bad = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, -0.1]));
        assert!(matches!(sigma_sqrt(&bad), Err(Error::NotNearlyPsd { .. })));
    }

    #[test]
    fn intermediate_without_noise_matches_rk4() {
        let cubic = crate::averaging::FnDrift {
            dim: 1,
            f: |x: &[f64], o: &mut [f64]| o[0] = -x[0].powi(3) + 0.01 * x[0],
        };
        let zero = FnDiffusion {
            dim: 1,
            f: |_: &[f64], o: &mut [f64]| o[0] = 0.0,
        };
        let a = DMatrix::zeros(1, 1);
        let st = NoiseStream::new(1, 0, 1, 1e-2);
        let em = integrate_intermediate(&a, &cubic, &zero, 0.01, &[0.05], 10.0, 1e-2, &st).unwrap();
        let rk = crate::averaging::integrate_averaged(&a, &cubic, &[0.05], 10.0, 1e-2).unwrap();
        assert_eq!(em.len(), rk.len());
        let d = (em.last_slow()[0] - rk.last_slow()[0]).abs();
        assert!(d < 1e-2 * 1e-3, "{d}");
    }

    #[test]
    fn log_norm_floor_matches_mixing_time() {
        let s = ou_probe(0.1, 1.0);
        assert!((fast_floor(&s) - 1.0).abs() < 1e-15);
        assert_eq!(crate::linalg::log_norm(&s.b), -1.0);
    }
}
