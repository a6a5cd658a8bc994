//! Monte Carlo sweep over eps shared by the averaging and intermediate error
//! reports. One pass per eps simulates the full system, the intermediate
//! model and the averaged ODE, so both reports see the same full-system data.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::averaging::{integrate_averaged, tabulate_fbar, EmpiricalFunction, FbarEstimator, Grid};
use crate::error::{Error, Result};
use crate::fluctuation::{run_intermediate, stationary_samples_range, tabulate_sigma, DiffusionTable, SigmaMethod};
use crate::linalg::Dense;
use crate::parallel::par_blocks;
use crate::paths::{fast_substep, integrate_with, Branch, IntegratorOptions, NoiseStream, Observer};
use crate::report::{ConvergenceReport, ConvergenceRow};
use crate::systems::SlowFastSystem;

/// Reduced-model coefficients: `fbar` and `Sigma`/`sigmabar` on a common grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tables {
    pub fbar: EmpiricalFunction,
    pub diffusion: DiffusionTable,
}

impl Tables {
    /// Stationary-density quadrature at every node (scalar fast variable).
    pub fn quadrature(system: &SlowFastSystem, grid: Grid, n_nodes: usize) -> Result<Self> {
        let fbar = tabulate_fbar(system, grid.clone(), FbarEstimator::Quadrature { n_nodes }, 0)?;
        let diffusion = tabulate_sigma(system, grid, &fbar, SigmaMethod::Quadrature { n_nodes }, 20.0, 0)?;
        Ok(Tables { fbar, diffusion })
    }

    /// Monte Carlo estimates at every node.
    pub fn estimated(
        system: &SlowFastSystem,
        grid: Grid,
        fbar: FbarEstimator,
        sigma: SigmaMethod,
        steps_per_eps: f64,
        seed: u64,
    ) -> Result<Self> {
        let fbar = tabulate_fbar(system, grid.clone(), fbar, seed)?;
        let diffusion = tabulate_sigma(system, grid, &fbar, sigma, steps_per_eps, seed)?;
        Ok(Tables { fbar, diffusion })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub x0: Vec<f64>,
    pub t_end: f64,
    /// Strictly decreasing.
    pub eps_list: Vec<f64>,
    /// Replicas per eps, same length as `eps_list`.
    pub n_replicas: Vec<usize>,
    pub seed: u64,
    pub dt_slow: f64,
    pub options: IntegratorOptions,
    pub control_variates: bool,
    pub block: usize,
}

impl SweepConfig {
    pub fn new(x0: Vec<f64>, t_end: f64, eps_list: Vec<f64>, n_replicas: usize, seed: u64) -> Self {
        let n = eps_list.len();
        SweepConfig {
            x0,
            t_end,
            eps_list,
            n_replicas: vec![n_replicas; n],
            seed,
            dt_slow: 1e-3,
            options: IntegratorOptions::heun(20.0),
            control_variates: true,
            block: 64,
        }
    }

    pub fn with_replicas(mut self, n_replicas: Vec<usize>) -> Self {
        self.n_replicas = n_replicas;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.eps_list.is_empty() || self.eps_list.len() != self.n_replicas.len() {
            return Err(Error::InvalidArgument("eps_list and n_replicas must be non-empty and of equal length".into()));
        }
        if self.eps_list.windows(2).any(|w| !(w[1] < w[0])) {
            return Err(Error::InvalidArgument("eps_list must be strictly decreasing".into()));
        }
        if self.n_replicas.iter().any(|&n| n < 2) {
            return Err(Error::InvalidArgument("need at least 2 replicas per eps".into()));
        }
        if self.block == 0 {
            return Err(Error::InvalidArgument("block must be positive".into()));
        }
        Ok(())
    }
}

/// Test statistics of the weak metric, applied to `x_1(T)`.
pub const STATISTICS: [&str; 3] = ["x", "x^2", "x^3"];

fn statistic(j: usize, x: f64) -> f64 {
    match j {
        0 => x,
        1 => x * x,
        _ => x * x * x,
    }
}

/// Per-eps results.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub eps: f64,
    pub n_replicas: usize,
    /// Full-system means of the statistics and their SEs.
    pub full: Vec<(f64, f64)>,
    /// SEs of the full-system means without control variates.
    pub full_plain_se: Vec<f64>,
    pub intermediate: Vec<(f64, f64)>,
    pub averaged: Vec<f64>,
    /// `sup_t E|x - xbar|` with the SE at the maximiser.
    pub strong: (f64, f64),
    /// `sup_t (E|x - xbar|^2)^(1/2)`.
    pub strong_l2: f64,
    /// Relative weak errors per statistic, with SEs.
    pub intermediate_weak: Vec<(f64, f64)>,
    pub averaged_weak: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub cells: Vec<SweepCell>,
    pub averaging_strong: ConvergenceReport,
    pub averaging_weak: ConvergenceReport,
    pub intermediate_weak: ConvergenceReport,
    /// Intermediate weak error below the averaged weak error at every eps.
    pub ordering_holds: bool,
}

/// Mean with linear control variates: the controls have mean zero, their
/// coefficients come from least squares on standardised columns.
/// Returns `(mean, se, plain_se)`.
pub fn cv_mean(v: &[f64], controls: &[Vec<f64>]) -> (f64, f64, f64) {
    let n = v.len();
    let (m0, se0) = crate::stats::mean_se(v);
    let k = controls.first().map_or(0, |c| c.len());
    if k == 0 || n <= k + 1 {
        return (m0, se0, se0);
    }
    let nf = n as f64;
    let mut mu = vec![0.0; k];
    let mut sd = vec![0.0; k];
    for j in 0..k {
        let col: Vec<f64> = controls.iter().map(|c| c[j]).collect();
        let (m, s) = crate::stats::mean_se(&col);
        mu[j] = m;
        sd[j] = s * nf.sqrt();
    }
    let mut gram = DMatrix::<f64>::zeros(k, k);
    let mut rhs = DMatrix::<f64>::zeros(k, 1);
    let mut w = vec![0.0; k];
    for (c, &y) in controls.iter().zip(v) {
        for j in 0..k {
            w[j] = if sd[j] > 0.0 { (c[j] - mu[j]) / sd[j] } else { 0.0 };
        }
        for a in 0..k {
            rhs[(a, 0)] += w[a] * (y - m0);
            for b in 0..=a {
                gram[(a, b)] += w[a] * w[b];
            }
        }
    }
    for a in 0..k {
        for b in 0..a {
            gram[(b, a)] = gram[(a, b)];
        }
    }
    let Ok(pinv) = gram.svd(true, true).pseudo_inverse(1e-10 * nf) else {
        return (m0, se0, se0);
    };
    let beta = pinv * rhs;
    let z: Vec<f64> = controls
        .iter()
        .zip(v)
        .map(|(c, &y)| {
            let mut adj = y;
            for j in 0..k {
                if sd[j] > 0.0 {
                    adj -= beta[(j, 0)] * c[j] / sd[j];
                }
            }
            adj
        })
        .collect();
    let (m, s) = crate::stats::mean_se(&z);
    // k fitted coefficients
    let s = s * ((nf - 1.0) / (nf - 1.0 - k as f64)).sqrt();
    (m, s, se0)
}

const N_FULL_CONTROLS: usize = 7;

struct FullObserver<'a> {
    xbar: &'a [Vec<f64>],
    controls: [f64; N_FULL_CONTROLS],
    abs: Vec<f64>,
    sq: Vec<f64>,
}

impl Observer for FullObserver<'_> {
    fn substep(&mut self, _k: u64, x0: &[f64], y0: &[f64], _x1: &[f64], _y1: &[f64], z: &[f64]) {
        let (x, y, w) = (x0[0], y0[0], z[0]);
        let c = &mut self.controls;
        c[0] += w;
        c[1] += y * w;
        c[2] += x * w;
        c[3] += x * y * w;
        c[4] += y * y * w;
        c[5] += x * x * w;
        c[6] += x * x * y * w;
    }

    fn record(&mut self, i: usize, _t: f64, x: &[f64], _y: &[f64]) {
        let d2: f64 = x.iter().zip(&self.xbar[i]).map(|(a, b)| (a - b) * (a - b)).sum();
        self.abs[i] += d2.sqrt();
        self.sq[i] += d2;
    }
}

struct Block {
    x_end: Vec<f64>,
    controls: Vec<Vec<f64>>,
    abs: Vec<f64>,
    abs_sq: Vec<f64>,
}

fn full_ensemble(
    system: &SlowFastSystem,
    cfg: &SweepConfig,
    n: usize,
    xbar: &[Vec<f64>],
) -> Result<Block> {
    let (_, h) = fast_substep(system.eps, cfg.dt_slow, &cfg.options);
    let m = system.m();
    let len = xbar.len();
    let blocks = par_blocks(n, cfg.block, |range| -> Result<Block> {
        let y0 = stationary_samples_range(system, &cfg.x0, range.start, range.end, cfg.seed)?;
        let mut out = Block {
            x_end: Vec::with_capacity(range.len()),
            controls: Vec::with_capacity(range.len()),
            abs: vec![0.0; len],
            abs_sq: vec![0.0; len],
        };
        for (q, r) in range.enumerate() {
            let stream = NoiseStream::new(cfg.seed, r as u64, m, h);
            let mut obs = FullObserver {
                xbar,
                controls: [0.0; N_FULL_CONTROLS],
                abs: vec![0.0; len],
                sq: vec![0.0; len],
            };
            let (x, _) = integrate_with(system, &cfg.x0, &y0[q], cfg.t_end, cfg.dt_slow, &stream, &cfg.options, &mut obs)?;
            out.x_end.push(x[0]);
            out.controls.push(obs.controls.to_vec());
            for i in 0..len {
                out.abs[i] += obs.abs[i];
                out.abs_sq[i] += obs.abs[i] * obs.abs[i];
            }
        }
        Ok(out)
    });
    merge(blocks, len)
}

fn merge(blocks: Vec<Result<Block>>, len: usize) -> Result<Block> {
    let mut all = Block {
        x_end: Vec::new(),
        controls: Vec::new(),
        abs: vec![0.0; len],
        abs_sq: vec![0.0; len],
    };
    for b in blocks {
        let b = b?;
        all.x_end.extend(b.x_end);
        all.controls.extend(b.controls);
        for i in 0..len {
            all.abs[i] += b.abs[i];
            all.abs_sq[i] += b.abs_sq[i];
        }
    }
    Ok(all)
}

fn intermediate_ensemble(system: &SlowFastSystem, cfg: &SweepConfig, tables: &Tables, n: usize) -> Result<Block> {
    let dim = system.n();
    let steps = (cfg.t_end / cfg.dt_slow).round() as usize;
    let a = Dense::from_matrix(&system.a);
    let blocks = par_blocks(n, cfg.block, |range| -> Result<Block> {
        let mut out = Block {
            x_end: Vec::with_capacity(range.len()),
            controls: Vec::with_capacity(range.len()),
            abs: Vec::new(),
            abs_sq: Vec::new(),
        };
        for r in range {
            let stream = NoiseStream::new(cfg.seed, r as u64, dim, cfg.dt_slow).with_branch(Branch::Auxiliary(0), dim);
            let mut c = [0.0; 2];
            let x = run_intermediate(
                &a,
                &tables.fbar,
                &tables.diffusion,
                system.eps,
                &cfg.x0,
                steps,
                cfg.dt_slow,
                &stream,
                |_, x, dw| {
                    c[0] += dw[0];
                    c[1] += x[0] * dw[0];
                },
            )?;
            out.x_end.push(x[0]);
            out.controls.push(c.to_vec());
        }
        Ok(out)
    });
    merge(blocks, 0)
}

fn rows_max(cells: &[SweepCell], pick: impl Fn(&SweepCell) -> &Vec<(f64, f64)>) -> Vec<ConvergenceRow> {
    cells
        .iter()
        .map(|c| {
            let (error, stderr) = pick(c)
                .iter()
                .copied()
                .fold((f64::NEG_INFINITY, 0.0), |a, b| if b.0 > a.0 { b } else { a });
            ConvergenceRow { eps: c.eps, error, stderr }
        })
        .collect()
}

/// Runs the sweep. The averaged path comes from RK4 on `tables.fbar` with the
/// slow step; the intermediate model uses Euler-Maruyama with the same step.
pub fn run_sweep(system: &SlowFastSystem, cfg: &SweepConfig, tables: &Tables) -> Result<SweepResult> {
    cfg.validate()?;
    if cfg.x0.len() != system.n() {
        return Err(Error::InvalidArgument("x0 has the wrong dimension".into()));
    }
    let xbar_path = integrate_averaged(&system.a, &tables.fbar, &cfg.x0, cfg.t_end, cfg.dt_slow)?;
    let xbar: Vec<Vec<f64>> = (0..xbar_path.len()).map(|i| xbar_path.slow_at(i).to_vec()).collect();
    let xbar_end = xbar.last().unwrap()[0];
    let mut cells = Vec::with_capacity(cfg.eps_list.len());
    for (&eps, &n) in cfg.eps_list.iter().zip(&cfg.n_replicas) {
        let sys = system.with_eps(eps)?;
        let full = full_ensemble(&sys, cfg, n, &xbar)?;
        let inter = intermediate_ensemble(&sys, cfg, tables, n)?;
        let nf = n as f64;
        let (mut strong, mut strong_se, mut l2) = (f64::NEG_INFINITY, 0.0, 0.0f64);
        for i in 0..xbar.len() {
            let mean = full.abs[i] / nf;
            let var = (full.abs_sq[i] / nf - mean * mean).max(0.0) * nf / (nf - 1.0);
            if mean > strong {
                strong = mean;
                strong_se = (var / nf).sqrt();
            }
            l2 = l2.max((full.abs_sq[i] / nf).sqrt());
        }
        let mut cell = SweepCell {
            eps,
            n_replicas: n,
            full: Vec::new(),
            full_plain_se: Vec::new(),
            intermediate: Vec::new(),
            averaged: Vec::new(),
            strong: (strong, strong_se),
            strong_l2: l2,
            intermediate_weak: Vec::new(),
            averaged_weak: Vec::new(),
        };
        let no_controls: Vec<Vec<f64>> = Vec::new();
        for j in 0..STATISTICS.len() {
            let vf: Vec<f64> = full.x_end.iter().map(|&x| statistic(j, x)).collect();
            let vi: Vec<f64> = inter.x_end.iter().map(|&x| statistic(j, x)).collect();
            let (cf, ci) = if cfg.control_variates {
                (&full.controls, &inter.controls)
            } else {
                (&no_controls, &no_controls)
            };
            let (mf, sf, pf) = cv_mean(&vf, cf);
            let (mi, si, _) = cv_mean(&vi, ci);
            let ma = statistic(j, xbar_end);
            let scale = mf.abs();
            cell.full.push((mf, sf));
            cell.full_plain_se.push(pf);
            cell.intermediate.push((mi, si));
            cell.averaged.push(ma);
            cell.intermediate_weak.push(((mf - mi).abs() / scale, sf.hypot(si) / scale));
            cell.averaged_weak.push(((mf - ma).abs() / scale, sf / scale));
        }
        cells.push(cell);
    }
    let n_rep = *cfg.n_replicas.iter().min().unwrap();
    let strong_rows: Vec<ConvergenceRow> = cells
        .iter()
        .map(|c| ConvergenceRow {
            eps: c.eps,
            error: c.strong.0,
            stderr: c.strong.1,
        })
        .collect();
    let mut averaging_strong = ConvergenceReport::from_rows("averaging_strong", strong_rows, n_rep, cfg.seed);
    let mut averaging_weak = ConvergenceReport::from_rows("averaging_weak", rows_max(&cells, |c| &c.averaged_weak), n_rep, cfg.seed);
    let mut intermediate_weak =
        ConvergenceReport::from_rows("intermediate_weak", rows_max(&cells, |c| &c.intermediate_weak), n_rep, cfg.seed);
    let ordering_holds = intermediate_weak
        .rows
        .iter()
        .zip(&averaging_weak.rows)
        .all(|(i, a)| i.error < a.error);
    let monotone = |r: &ConvergenceReport| r.rows.windows(2).all(|w| w[1].error <= w[0].error) as u8 as f64;
    for r in [&mut averaging_strong, &mut averaging_weak, &mut intermediate_weak] {
        let m = monotone(r);
        r.diagnostics.insert("monotone".into(), m);
        r.diagnostics.insert("dt_slow".into(), cfg.dt_slow);
        r.diagnostics.insert("t_end".into(), cfg.t_end);
    }
    for c in &cells {
        let key = format!("l2_eps_{:.3e}", c.eps);
        averaging_strong.diagnostics.insert(key, c.strong_l2);
    }
    intermediate_weak
        .diagnostics
        .insert("ordering_holds".into(), ordering_holds as u8 as f64);
    Ok(SweepResult {
        cells,
        averaging_strong,
        averaging_weak,
        intermediate_weak,
        ordering_holds,
    })
}
