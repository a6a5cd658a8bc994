//! Random slow manifold `y = h(x, omega) + eta(omega)` by a truncated
//! Lyapunov-Perron iteration, its frozen-slow limit `h0`, and the diagnostics
//! built on them: the `O(eps)` gap, exponential attraction, invariance along
//! the flow and the manifold-reduced slow vector field.
//!
//! All history computations run on the fast clock `tau = s / eps`. The base
//! spacing is the stream step divided by `eps`, so a stream built with
//! [`manifold_stream`] yields the same `eta` path for every `eps`. History
//! indices are negative, which selects the stream's backward substream; the
//! forward integrators read the nonnegative indices of the same stream.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{norm, phi_functions, Dense};
use crate::parallel::par_map;
use crate::paths::{
    integrate_slowfast, sample_stationary_ou, IntegratorOptions, NoiseStream, OuStepper, SamplePath, Substeps,
};
use crate::report::{ConvergenceReport, ConvergenceRow};
use crate::stats::mean_se;
use crate::systems::{check_completeness_gap, AssumptionReport, DomainBox, SlowFastSystem};

/// Default history spacing on the fast clock.
pub const FAST_SPACING: f64 = 0.1;
/// Fast-clock length of the uniformly resolved part of the history, in units of `1/|beta|`.
const FINE_SPAN: f64 = 16.0;
/// Intervals per spacing level in the coarsened part.
const LEVEL_INTERVALS: i64 = 32;

/// Stream whose step is [`FAST_SPACING`] on the fast clock of `eps`.
pub fn manifold_stream(seed: u64, replica: u64, m: usize, eps: f64) -> NoiseStream {
    NoiseStream::new(seed, replica, m, FAST_SPACING * eps)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LPConfig {
    /// History weight; `beta/eps < lambda < alpha`.
    pub lambda: f64,
    /// Truncation horizon `T0` in slow time.
    pub t_trunc: f64,
    /// Cap on history grid nodes.
    pub n_grid: usize,
    /// Fixed-point tolerance in the weighted sup norm.
    pub tol: f64,
    pub max_iter: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LpCertificate {
    pub kappa: f64,
    /// `exp((beta + L_g) T0 / eps)`, infinite when `beta + L_g >= 0`.
    pub tail_bound: f64,
    pub lambda_admissible: bool,
    pub contraction_certified: bool,
    pub truncation_certified: bool,
    pub warnings: Vec<String>,
}

impl LPConfig {
    pub fn new(lambda: f64, t_trunc: f64, n_grid: usize, tol: f64, max_iter: usize) -> Result<Self> {
        let c = LPConfig {
            lambda,
            t_trunc,
            n_grid,
            tol,
            max_iter,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t_trunc > 0.0) || !(self.tol > 0.0) || self.n_grid < 2 || self.max_iter == 0 {
            return Err(Error::InvalidArgument(format!("unusable LPConfig {self:?}")));
        }
        if !self.lambda.is_finite() {
            return Err(Error::InvalidArgument("lambda must be finite".into()));
        }
        Ok(())
    }

    /// The `lambda` minimising the contraction factor inside the H2 interval,
    /// or `beta/(2 eps)` when H2 has no solution; the horizon meets the tail
    /// bound when `beta + L_g < 0` and is never below `50 eps/|beta|`.
    pub fn auto(report: &AssumptionReport, eps: f64, tol: f64) -> Self {
        let lambda = match report.lambda_interval {
            Some((lo, hi)) => {
                let k = 2000;
                (1..k)
                    .map(|i| lo + (hi - lo) * i as f64 / k as f64)
                    .fold((0.5 * (lo + hi), f64::INFINITY), |acc, l| {
                        let v = report.h2_lhs(l, eps);
                        if v < acc.1 {
                            (l, v)
                        } else {
                            acc
                        }
                    })
                    .0
            }
            None => report.beta / (2.0 * eps),
        };
        LPConfig {
            lambda,
            t_trunc: eps * fast_horizon(report, tol),
            n_grid: 1 << 14,
            tol,
            max_iter: 200,
        }
    }

    pub fn contraction_factor(&self, report: &AssumptionReport, eps: f64) -> f64 {
        report.h2_lhs(self.lambda, eps)
    }

    pub fn tail_bound(&self, report: &AssumptionReport, eps: f64) -> f64 {
        let rate = report.beta + report.lip_g;
        if rate >= 0.0 {
            f64::INFINITY
        } else {
            (rate * self.t_trunc / eps).exp()
        }
    }

    /// Checks the two configuration invariants. Failures are reported as
    /// warnings: the global constants are sufficient, not necessary, and the
    /// iteration itself detects non-contraction and a short horizon.
    pub fn certify(&self, report: &AssumptionReport, eps: f64) -> LpCertificate {
        let kappa = self.contraction_factor(report, eps);
        let tail_bound = self.tail_bound(report, eps);
        let lambda_admissible = report.beta / eps < self.lambda && self.lambda < report.alpha;
        let contraction_certified = lambda_admissible && kappa < 1.0;
        let truncation_certified = tail_bound < self.tol / 10.0;
        let mut warnings = Vec::new();
        if !lambda_admissible {
            warnings.push(format!(
                "lambda = {} outside (beta/eps, alpha) = ({}, {})",
                self.lambda,
                report.beta / eps,
                report.alpha
            ));
        }
        if !contraction_certified {
            warnings.push(format!("contraction factor {kappa:.4} is not below 1 with global constants"));
        }
        if !truncation_certified {
            warnings.push(format!(
                "tail bound {tail_bound:.3e} is not below tol/10 = {:.3e}",
                self.tol / 10.0
            ));
        }
        LpCertificate {
            kappa,
            tail_bound,
            lambda_admissible,
            contraction_certified,
            truncation_certified,
            warnings,
        }
    }
}

/// Fast-clock horizon used by [`LPConfig::auto`].
fn fast_horizon(report: &AssumptionReport, tol: f64) -> f64 {
    let floor = 50.0 / report.beta.abs();
    let rate = report.beta + report.lip_g;
    let tail = if rate < 0.0 {
        (100.0 / tol).ln() / rate.abs()
    } else {
        0.0
    };
    tail.max(floor).min(1e4 / report.beta.abs())
}

/// Smallest admissible pullback horizon (slow time) for [`h0_eval`].
pub fn min_burn_in(report: &AssumptionReport, eps: f64, tol: f64) -> f64 {
    let rate = report.beta + report.lip_g;
    if rate < 0.0 {
        eps / rate.abs() * (1.0 / tol).ln()
    } else {
        50.0 * eps / report.beta.abs()
    }
}

/// `L_h = L_g / ((eps lambda - beta) (1 - K))` with the contraction factor
/// `K = L_f/(alpha - lambda) + L_g/(eps lambda - beta)`; `None` when `K >= 1`.
pub fn lipschitz_bound(report: &AssumptionReport, lambda: f64, eps: f64) -> Option<f64> {
    let (a, b) = (report.alpha - lambda, eps * lambda - report.beta);
    if !(a > 0.0 && b > 0.0) {
        return None;
    }
    let k = report.h2_lhs(lambda, eps);
    (k < 1.0).then(|| report.lip_g / (b * (1.0 - k)))
}

/// Fixed point of the truncated map on the history grid.
#[derive(Clone, Debug, PartialEq)]
pub struct HistoryPath {
    /// Slow times `-T0 = s_0 < ... < s_K = 0`.
    pub grid: Vec<f64>,
    pub n: usize,
    pub m: usize,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    /// The stationary OU realisation at the grid nodes.
    pub eta: Vec<f64>,
}

impl HistoryPath {
    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn x_at(&self, k: usize) -> &[f64] {
        &self.x[k * self.n..(k + 1) * self.n]
    }

    pub fn y_at(&self, k: usize) -> &[f64] {
        &self.y[k * self.m..(k + 1) * self.m]
    }

    pub fn eta_at(&self, k: usize) -> &[f64] {
        &self.eta[k * self.m..(k + 1) * self.m]
    }

    /// `sup_k e^{-lambda s_k} |(X_k, Y_k)|`.
    pub fn weighted_norm(&self, lambda: f64) -> f64 {
        (0..self.len())
            .map(|k| {
                let v: f64 = self.x_at(k).iter().chain(self.y_at(k)).map(|a| a * a).sum();
                (-lambda * self.grid[k]).exp() * v.sqrt()
            })
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LpSolution {
    pub history: HistoryPath,
    /// `h^eps(X0, omega) = Y(0)`.
    pub h: Vec<f64>,
    /// `eta(0)`; the manifold point in original coordinates is `h + eta0`.
    pub eta0: Vec<f64>,
    pub iterations: usize,
    /// Weighted-norm change of every iteration.
    pub changes: Vec<f64>,
    /// Size of the oldest grid cell's contribution to `Y(0)`.
    pub truncation_contribution: f64,
}

impl LpSolution {
    /// Largest ratio of successive changes while both are above `floor`.
    pub fn observed_contraction(&self, floor: f64) -> f64 {
        self.changes
            .windows(2)
            .filter(|w| w[0] > floor && w[1] > floor)
            .map(|w| w[1] / w[0])
            .fold(0.0, f64::max)
    }

    pub fn manifold_point(&self) -> Vec<f64> {
        self.h.iter().zip(&self.eta0).map(|(a, b)| a + b).collect()
    }
}

struct Coefficients {
    /// `e^{B Delta}`, `Delta (phi1 - phi2)(B Delta)`, `Delta phi2(B Delta)`.
    e: Dense,
    c0: Dense,
    c1: Dense,
    /// `e^{-eps A Delta}`, `eps Delta phi2`, `eps Delta (phi1 - phi2)` at `-eps A Delta`.
    es: Dense,
    s0: Dense,
    s1: Dense,
}

impl Coefficients {
    fn new(system: &SlowFastSystem, delta: f64, eps: f64) -> Self {
        let (e, p1, p2) = phi_functions(&(&system.b * delta));
        let (es, q1, q2) = phi_functions(&(&system.a * (-eps * delta)));
        Coefficients {
            e: Dense::from_matrix(&e),
            c0: Dense::from_matrix(&((&p1 - &p2) * delta)),
            c1: Dense::from_matrix(&(p2 * delta)),
            es: Dense::from_matrix(&es),
            s0: Dense::from_matrix(&(&q2 * (eps * delta))),
            s1: Dense::from_matrix(&((q1 - q2) * (eps * delta))),
        }
    }
}

/// Grid nodes (base-step indices, ascending, ending at 0), the `eta` values
/// there and the per-interval coefficients.
struct Setup {
    n: usize,
    m: usize,
    eps: f64,
    nodes: Vec<i64>,
    d0: f64,
    eta: Vec<f64>,
    coef: Vec<Coefficients>,
    which: Vec<usize>,
}

impl Setup {
    fn new(system: &SlowFastSystem, eps: f64, stream: &NoiseStream, span_slow: f64, n_grid: usize) -> Result<Self> {
        let (n, m) = (system.n(), system.m());
        if stream.dim() != m {
            return Err(Error::InvalidArgument(format!(
                "stream dimension {} does not match m = {m}",
                stream.dim()
            )));
        }
        let d0 = stream.dt() / eps;
        let beta = crate::linalg::log_norm(&system.b);
        if !(beta < 0.0) {
            return Err(Error::FastNotDissipative { mu: beta });
        }
        let nodes = history_nodes(span_slow / eps, d0, beta, n_grid)?;
        let eta = eta_on_nodes(system, eps, stream, &nodes)?;
        let mut by_len: BTreeMap<i64, usize> = BTreeMap::new();
        let mut coef = Vec::new();
        let mut which = Vec::with_capacity(nodes.len() - 1);
        for w in nodes.windows(2) {
            let len = w[1] - w[0];
            let id = *by_len.entry(len).or_insert_with(|| {
                coef.push(Coefficients::new(system, len as f64 * d0, eps));
                coef.len() - 1
            });
            which.push(id);
        }
        Ok(Setup {
            n,
            m,
            eps,
            nodes,
            d0,
            eta,
            coef,
            which,
        })
    }

    fn len(&self) -> usize {
        self.nodes.len()
    }

    fn slow_times(&self) -> Vec<f64> {
        self.nodes.iter().map(|&j| j as f64 * self.d0 * self.eps).collect()
    }

    fn eta_at(&self, k: usize) -> &[f64] {
        &self.eta[k * self.m..(k + 1) * self.m]
    }
}

/// Uniform spacing near 0, then doubling every [`LEVEL_INTERVALS`] intervals.
fn history_nodes(span_fast: f64, d0: f64, beta: f64, n_grid: usize) -> Result<Vec<i64>> {
    if !(d0 > 0.0) || !(span_fast > 0.0) {
        return Err(Error::InvalidArgument("history span and spacing must be positive".into()));
    }
    let total = (span_fast / d0 - 1e-9).ceil().max(1.0) as i64;
    let fine = ((FINE_SPAN / beta.abs()) / d0).ceil() as i64;
    let mut nodes = vec![0i64];
    let (mut j, mut step, mut count) = (0i64, 1i64, 0i64);
    while j > -total {
        if -j >= fine {
            if count == LEVEL_INTERVALS {
                step *= 2;
                count = 0;
            }
            count += 1;
        }
        j = (j - step).max(-total);
        nodes.push(j);
        if nodes.len() > n_grid {
            return Err(Error::InvalidArgument(format!(
                "history grid needs more than n_grid = {n_grid} nodes"
            )));
        }
    }
    nodes.reverse();
    Ok(nodes)
}

/// Stationary draw at the oldest node, exact OU steps on the base grid.
fn eta_on_nodes(system: &SlowFastSystem, eps: f64, stream: &NoiseStream, nodes: &[i64]) -> Result<Vec<f64>> {
    let m = system.m();
    let start = nodes[0];
    let mut state = sample_stationary_ou(&system.b, system.sigma, eps, &stream.shift_steps(start))?;
    let ou = OuStepper::new(&system.b, system.sigma, eps, stream.dt())?;
    let mut out = Vec::with_capacity(nodes.len() * m);
    out.extend_from_slice(&state);
    let (mut z, mut scratch) = (vec![0.0; m], vec![0.0; m]);
    let mut next = 1;
    for j in start..0 {
        stream.standard_normal(j, &mut z);
        ou.step(&mut state, &z, &mut scratch);
        if nodes[next] == j + 1 {
            out.extend_from_slice(&state);
            next += 1;
        }
    }
    Ok(out)
}

/// One application of the truncated map to `(x, y)`.
fn apply_map(
    system: &SlowFastSystem,
    st: &Setup,
    x0: &[f64],
    x: &[f64],
    y: &[f64],
    xo: &mut [f64],
    yo: &mut [f64],
    fbuf: &mut [f64],
    gbuf: &mut [f64],
) {
    let (n, m, kk) = (st.n, st.m, st.len());
    let mut u = vec![0.0; m];
    for k in 0..kk {
        for i in 0..m {
            u[i] = y[k * m + i] + st.eta_at(k)[i];
        }
        system.f.eval(&x[k * n..(k + 1) * n], &u, &mut fbuf[k * n..(k + 1) * n]);
        system.g.eval(&x[k * n..(k + 1) * n], &u, &mut gbuf[k * m..(k + 1) * m]);
    }
    yo[..m].iter_mut().for_each(|v| *v = 0.0);
    for k in 0..kk - 1 {
        let c = &st.coef[st.which[k]];
        let (head, tail) = yo.split_at_mut((k + 1) * m);
        let next = &mut tail[..m];
        c.e.apply(&head[k * m..], next);
        c.c0.apply_add(&gbuf[k * m..(k + 1) * m], next);
        c.c1.apply_add(&gbuf[(k + 1) * m..(k + 2) * m], next);
    }
    xo[(kk - 1) * n..].copy_from_slice(x0);
    let mut tmp = vec![0.0; n];
    for k in (0..kk - 1).rev() {
        let c = &st.coef[st.which[k]];
        c.es.apply(&xo[(k + 1) * n..(k + 2) * n], &mut tmp);
        let mut corr = vec![0.0; n];
        c.s0.apply(&fbuf[k * n..(k + 1) * n], &mut corr);
        c.s1.apply_add(&fbuf[(k + 1) * n..(k + 2) * n], &mut corr);
        for i in 0..n {
            xo[k * n + i] = tmp[i] - corr[i];
        }
    }
}

fn weighted_change(st: &Setup, times: &[f64], lambda: f64, x: &[f64], y: &[f64], xo: &[f64], yo: &[f64]) -> f64 {
    let (n, m) = (st.n, st.m);
    (0..st.len())
        .map(|k| {
            let dx: f64 = (0..n).map(|i| (xo[k * n + i] - x[k * n + i]).powi(2)).sum();
            let dy: f64 = (0..m).map(|i| (yo[k * m + i] - y[k * m + i]).powi(2)).sum();
            (-lambda * times[k]).exp() * (dx + dy).sqrt()
        })
        .fold(0.0, f64::max)
}

/// Size of the oldest cell's contribution to `Y(0)`.
fn oldest_cell_contribution(st: &Setup, gbuf: &[f64]) -> f64 {
    let m = st.m;
    if st.len() < 2 {
        return 0.0;
    }
    let c = &st.coef[st.which[0]];
    let mut v = vec![0.0; m];
    c.c0.apply_add(&gbuf[..m], &mut v);
    c.c1.apply_add(&gbuf[m..2 * m], &mut v);
    let mut w = vec![0.0; m];
    for k in 1..st.len() - 1 {
        st.coef[st.which[k]].e.apply(&v, &mut w);
        std::mem::swap(&mut v, &mut w);
    }
    norm(&v)
}

/// Picard iteration of the truncated Lyapunov-Perron map for `h^eps(x0, omega)`.
pub fn lp_iterate(system: &SlowFastSystem, x0: &[f64], stream: &NoiseStream, cfg: &LPConfig) -> Result<LpSolution> {
    cfg.validate()?;
    if x0.len() != system.n() {
        return Err(Error::InvalidArgument("x0 has the wrong dimension".into()));
    }
    let eps = system.eps;
    let st = Setup::new(system, eps, stream, cfg.t_trunc, cfg.n_grid)?;
    let (n, m, kk) = (st.n, st.m, st.len());
    let times = st.slow_times();
    let mut x: Vec<f64> = (0..kk).flat_map(|_| x0.iter().cloned()).collect();
    let mut y = vec![0.0; kk * m];
    let (mut xo, mut yo) = (vec![0.0; kk * n], vec![0.0; kk * m]);
    let (mut fbuf, mut gbuf) = (vec![0.0; kk * n], vec![0.0; kk * m]);
    let mut changes = Vec::new();
    let mut prev = f64::INFINITY;
    let mut rising = 0;
    let mut iterations = 0;
    let mut change = f64::INFINITY;
    while iterations < cfg.max_iter {
        iterations += 1;
        apply_map(system, &st, x0, &x, &y, &mut xo, &mut yo, &mut fbuf, &mut gbuf);
        change = weighted_change(&st, &times, cfg.lambda, &x, &y, &xo, &yo);
        std::mem::swap(&mut x, &mut xo);
        std::mem::swap(&mut y, &mut yo);
        changes.push(change);
        if !change.is_finite() || x.iter().chain(&y).any(|v| !v.is_finite()) {
            return Err(Error::NoContraction {
                ratio: f64::INFINITY,
                iteration: iterations,
            });
        }
        if prev.is_finite() {
            let ratio = if prev > 0.0 { change / prev } else { 0.0 };
            // changes at the rounding floor carry no information
            let floor = 1e-14 * (1.0 + norm(&y).max(norm(x0)));
            if ratio > 1.0 && change > floor {
                rising += 1;
                if rising >= 3 {
                    return Err(Error::NoContraction { ratio, iteration: iterations });
                }
            } else {
                rising = 0;
            }
        }
        prev = change;
        if change < cfg.tol {
            break;
        }
    }
    if !(change < cfg.tol) {
        return Err(Error::NotConverged { iterations, change });
    }
    // G at the returned iterate for the truncation check
    {
        let mut u = vec![0.0; m];
        for k in 0..kk {
            for i in 0..m {
                u[i] = y[k * m + i] + st.eta_at(k)[i];
            }
            system.g.eval(&x[k * n..(k + 1) * n], &u, &mut gbuf[k * m..(k + 1) * m]);
        }
    }
    let contribution = oldest_cell_contribution(&st, &gbuf);
    if contribution > cfg.tol {
        return Err(Error::TruncationTooShort { contribution });
    }
    let h = y[(kk - 1) * m..].to_vec();
    let eta0 = st.eta_at(kk - 1).to_vec();
    Ok(LpSolution {
        history: HistoryPath {
            grid: times,
            n,
            m,
            x,
            y,
            eta: st.eta,
        },
        h,
        eta0,
        iterations,
        changes,
        truncation_contribution: contribution,
    })
}

/// Weighted-norm distance between a history and its image under the map.
pub fn fixed_point_residual(
    system: &SlowFastSystem,
    x0: &[f64],
    stream: &NoiseStream,
    cfg: &LPConfig,
    sol: &LpSolution,
) -> Result<f64> {
    let st = Setup::new(system, system.eps, stream, cfg.t_trunc, cfg.n_grid)?;
    let (n, m, kk) = (st.n, st.m, st.len());
    if kk != sol.history.len() {
        return Err(Error::InvalidArgument("history does not match the configuration".into()));
    }
    let (mut xo, mut yo) = (vec![0.0; kk * n], vec![0.0; kk * m]);
    let (mut fbuf, mut gbuf) = (vec![0.0; kk * n], vec![0.0; kk * m]);
    let h = &sol.history;
    apply_map(system, &st, x0, &h.x, &h.y, &mut xo, &mut yo, &mut fbuf, &mut gbuf);
    Ok(weighted_change(&st, &h.grid, cfg.lambda, &h.x, &h.y, &xo, &yo))
}

/// Frozen-slow pullback on the history grid: returns `(h0(x, omega), eta(0))`.
fn h0_on_setup(system: &SlowFastSystem, x: &[f64], st: &Setup) -> Result<(Vec<f64>, Vec<f64>)> {
    let (m, kk) = (st.m, st.len());
    let mut y = vec![0.0; m];
    let (mut u, mut g0, mut g1) = (vec![0.0; m], vec![0.0; m], vec![0.0; m]);
    let (mut base, mut next, mut prev) = (vec![0.0; m], vec![0.0; m], vec![0.0; m]);
    for k in 0..kk - 1 {
        let c = &st.coef[st.which[k]];
        for i in 0..m {
            u[i] = y[i] + st.eta_at(k)[i];
        }
        system.g.eval(x, &u, &mut g0);
        c.e.apply(&y, &mut base);
        c.c0.apply_add(&g0, &mut base);
        // implicit in the new node: fixed-point iteration from the old value
        next.copy_from_slice(&y);
        for _ in 0..100 {
            prev.copy_from_slice(&next);
            for i in 0..m {
                u[i] = next[i] + st.eta_at(k + 1)[i];
            }
            system.g.eval(x, &u, &mut g1);
            next.copy_from_slice(&base);
            c.c1.apply_add(&g1, &mut next);
            let d: f64 = next.iter().zip(&prev).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            if d <= 1e-16 * (1.0 + norm(&next)) {
                break;
            }
        }
        y.copy_from_slice(&next);
        let size = norm(&y);
        if !(size <= 1e12) {
            let t = st.nodes[k + 1] as f64 * st.d0 * st.eps;
            let mut partial = SamplePath::new(st.nodes[0] as f64 * st.d0 * st.eps, st.d0 * st.eps, x.len(), m);
            partial.push(x, &y);
            return Err(Error::BlowUp {
                time: t,
                partial: Box::new(partial),
            });
        }
    }
    Ok((y, st.eta_at(kk - 1).to_vec()))
}

/// `h0(x, omega)` by pullback from `-burn_in` (slow time) with zero start.
pub fn h0_eval(system: &SlowFastSystem, x: &[f64], stream: &NoiseStream, burn_in: f64) -> Result<Vec<f64>> {
    Ok(h0_with_eta(system, x, stream, burn_in)?.0)
}

/// As [`h0_eval`], also returning `eta(0)` from the same realisation.
pub fn h0_with_eta(system: &SlowFastSystem, x: &[f64], stream: &NoiseStream, burn_in: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if x.len() != system.n() {
        return Err(Error::InvalidArgument("x has the wrong dimension".into()));
    }
    let beta = crate::linalg::log_norm(&system.b);
    let floor = match system.lipschitz {
        Some((_, lg)) if beta + lg < 0.0 => 0.0,
        _ => 50.0 * system.eps / beta.abs(),
    };
    if !(burn_in > 0.0) || burn_in < floor * (1.0 - 1e-12) {
        return Err(Error::InvalidArgument(format!(
            "burn_in = {burn_in} below the required {floor}"
        )));
    }
    let st = Setup::new(system, system.eps, stream, burn_in, usize::MAX)?;
    h0_on_setup(system, x, &st)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ManifoldMode {
    FullEps,
    FrozenLimit,
}

/// `X -> h(X, omega)` for a given noise realisation.
#[derive(Clone, Debug)]
pub struct ManifoldMap {
    pub system: SlowFastSystem,
    pub mode: ManifoldMode,
    pub config: LPConfig,
    pub lipschitz_bound: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifoldSlice {
    pub x: Vec<Vec<f64>>,
    pub mean: Vec<Vec<f64>>,
    pub std: Vec<Vec<f64>>,
    pub n_realizations: usize,
}

impl ManifoldSlice {
    pub fn to_csv(&self) -> String {
        use std::fmt::Write as _;
        let n = self.x.first().map_or(0, |v| v.len());
        let m = self.mean.first().map_or(0, |v| v.len());
        let mut cols: Vec<String> = (1..=n).map(|i| format!("x_{i}")).collect();
        cols.extend((1..=m).map(|i| format!("mean_h_{i}")));
        cols.extend((1..=m).map(|i| format!("std_h_{i}")));
        cols.push("n_realizations".into());
        let mut s = cols.join(",") + "\n";
        for k in 0..self.x.len() {
            let vals: Vec<String> = self.x[k]
                .iter()
                .chain(&self.mean[k])
                .chain(&self.std[k])
                .map(|v| format!("{v:.16e}"))
                .collect();
            let _ = writeln!(s, "{},{}", vals.join(","), self.n_realizations);
        }
        s
    }
}

impl ManifoldMap {
    pub fn new(system: SlowFastSystem, mode: ManifoldMode, config: LPConfig, report: &AssumptionReport) -> Self {
        let lipschitz_bound = lipschitz_bound(report, config.lambda, system.eps);
        ManifoldMap {
            system,
            mode,
            config,
            lipschitz_bound,
        }
    }

    /// Default configuration from the system's assumption report.
    pub fn for_system(system: &SlowFastSystem, mode: ManifoldMode, tol: f64) -> Result<Self> {
        let report = AssumptionReport::for_system(system)?;
        let cfg = LPConfig::auto(&report, system.eps, tol);
        Ok(Self::new(system.clone(), mode, cfg, &report))
    }

    pub fn eval(&self, x: &[f64], stream: &NoiseStream) -> Result<Vec<f64>> {
        Ok(self.eval_with_eta(x, stream)?.0)
    }

    pub fn eval_with_eta(&self, x: &[f64], stream: &NoiseStream) -> Result<(Vec<f64>, Vec<f64>)> {
        match self.mode {
            ManifoldMode::FullEps => {
                let sol = lp_iterate(&self.system, x, stream, &self.config)?;
                Ok((sol.h, sol.eta0))
            }
            ManifoldMode::FrozenLimit => {
                let st = Setup::new(&self.system, self.system.eps, stream, self.config.t_trunc, self.config.n_grid)?;
                h0_on_setup(&self.system, x, &st)
            }
        }
    }

    /// Largest difference quotient over `n_pairs` pairs in `domain`, for one realisation.
    pub fn empirical_lipschitz(&self, domain: &DomainBox, n_pairs: usize, stream: &NoiseStream) -> Result<f64> {
        let n = self.system.n();
        if domain.dim() != n {
            return Err(Error::InvalidArgument("domain dimension must equal n".into()));
        }
        let pick = |i: usize, salt: u64| -> Vec<f64> {
            (0..n)
                .map(|k| {
                    let h = crate::paths::mix64(crate::paths::mix64(i as u64 ^ salt) ^ k as u64);
                    let u = (h >> 11) as f64 / (1u64 << 53) as f64;
                    domain.lo[k] + u * (domain.hi[k] - domain.lo[k])
                })
                .collect()
        };
        let ratios: Vec<Result<f64>> = par_map(n_pairs, |i| {
            let (p, q) = (pick(i, 0xA5A5), pick(i, 0x5A5A));
            let d = norm(&p.iter().zip(&q).map(|(a, b)| a - b).collect::<Vec<_>>());
            if d == 0.0 {
                return Ok(0.0);
            }
            let (hp, hq) = (self.eval(&p, stream)?, self.eval(&q, stream)?);
            Ok(norm(&hp.iter().zip(&hq).map(|(a, b)| a - b).collect::<Vec<_>>()) / d)
        });
        let mut best = 0.0f64;
        for r in ratios {
            best = best.max(r?);
        }
        Ok(best)
    }

    /// Mean and spread of `h(X, .)` over realisations at each `X`.
    pub fn slice(&self, xs: &[Vec<f64>], n_realizations: usize, seed: u64) -> Result<ManifoldSlice> {
        let (eps, m) = (self.system.eps, self.system.m());
        let vals: Vec<Result<Vec<Vec<f64>>>> = par_map(n_realizations, |r| {
            let stream = manifold_stream(seed, r as u64, m, eps);
            xs.iter().map(|x| self.eval(x, &stream)).collect()
        });
        let mut per: Vec<Vec<Vec<f64>>> = Vec::with_capacity(n_realizations);
        for v in vals {
            per.push(v?);
        }
        let mut mean = Vec::new();
        let mut std = Vec::new();
        for k in 0..xs.len() {
            let (mut mu, mut sd) = (vec![0.0; m], vec![0.0; m]);
            for i in 0..m {
                let col: Vec<f64> = per.iter().map(|r| r[k][i]).collect();
                let (a, se) = mean_se(&col);
                mu[i] = a;
                sd[i] = se * (col.len() as f64).sqrt();
            }
            mean.push(mu);
            std.push(sd);
        }
        Ok(ManifoldSlice {
            x: xs.to_vec(),
            mean,
            std,
            n_realizations,
        })
    }
}

/// Shared-noise estimate of `E|h^eps(X) - h0(X)|` over `eps_list`.
pub fn manifold_gap(
    system: &SlowFastSystem,
    x: &[f64],
    eps_list: &[f64],
    n_realizations: usize,
    seed: u64,
) -> Result<ConvergenceReport> {
    if eps_list.len() < 4 || eps_list.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(Error::InvalidArgument("eps_list must be strictly decreasing with at least 4 values".into()));
    }
    if n_realizations < 2 {
        return Err(Error::InvalidArgument("need at least 2 realisations".into()));
    }
    let m = system.m();
    let tol = 1e-12;
    let mut per_eps: Vec<Vec<f64>> = Vec::with_capacity(eps_list.len());
    for &eps in eps_list {
        let s = system.with_eps(eps)?;
        let report = AssumptionReport::for_system(&s)?;
        let cfg = LPConfig::auto(&report, eps, tol);
        let gaps: Vec<Result<f64>> = par_map(n_realizations, |r| {
            let stream = manifold_stream(seed, r as u64, m, eps);
            let sol = lp_iterate(&s, x, &stream, &cfg)?;
            let st = Setup::new(&s, eps, &stream, cfg.t_trunc, cfg.n_grid)?;
            let (h0, _) = h0_on_setup(&s, x, &st)?;
            Ok(norm(&sol.h.iter().zip(&h0).map(|(a, b)| a - b).collect::<Vec<_>>()))
        });
        per_eps.push(gaps.into_iter().collect::<Result<Vec<_>>>()?);
    }
    let rows = eps_list
        .iter()
        .zip(&per_eps)
        .map(|(&eps, g)| {
            let (mean, se) = mean_se(g);
            ConvergenceRow { eps, error: mean, stderr: se }
        })
        .collect();
    let mut rep = ConvergenceReport::from_rows("manifold_gap", rows, n_realizations, seed);
    // pathwise comparison of the largest eps with the value closest to a tenth of it
    let target = eps_list[0] / 10.0;
    let j = (1..eps_list.len())
        .min_by(|&a, &b| {
            let da = (eps_list[a].ln() - target.ln()).abs();
            let db = (eps_list[b].ln() - target.ln()).abs();
            da.partial_cmp(&db).unwrap()
        })
        .unwrap();
    let smaller = per_eps[j].iter().zip(&per_eps[0]).filter(|(a, b)| a < b).count();
    rep.diagnostics
        .insert("monotone_fraction".into(), smaller as f64 / n_realizations as f64);
    rep.diagnostics.insert("monotone_eps".into(), eps_list[j]);
    Ok(rep)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttractionConfig {
    pub x0: Vec<f64>,
    /// Perturbation of the fast coordinate for the off-manifold start.
    pub offset: Vec<f64>,
    /// Fit window length in units of `eps/|beta|`.
    pub window: f64,
    pub n_realizations: usize,
    pub seed: u64,
    /// Slow steps per unit `eps`.
    pub steps_per_eps: usize,
    pub tol: f64,
}

impl AttractionConfig {
    pub fn new(x0: Vec<f64>, offset: Vec<f64>, n_realizations: usize, seed: u64) -> Self {
        AttractionConfig {
            x0,
            offset,
            window: 4.0,
            n_realizations,
            seed,
            steps_per_eps: 20,
            tol: 1e-12,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayReport {
    pub eps: f64,
    /// Fitted `k` in `|z(t) - z'(t)| ~ e^{-k t}`; `None` when the starts coincide.
    pub rate: Option<f64>,
    pub rate_se: Option<f64>,
    pub fit_window: (f64, f64),
    /// The window was cut because the distance reached the rounding floor.
    pub window_shortened: bool,
    pub initial_distance: f64,
    pub max_distance: f64,
    /// `-mu(B)/eps`, exact for linear fast dynamics.
    pub linear_rate: f64,
    pub gamma: Option<f64>,
    /// `k >= gamma/(2 eps)` when the completeness gap holds.
    pub gamma_check: Option<bool>,
    pub initial_condition: String,
}

/// Decay of the distance between an on-manifold start and a perturbed start
/// driven by the same noise.
pub fn attraction_test(system: &SlowFastSystem, cfg: &AttractionConfig) -> Result<DecayReport> {
    let (n, m) = (system.n(), system.m());
    if cfg.x0.len() != n || cfg.offset.len() != m {
        return Err(Error::InvalidArgument("x0 or offset has the wrong dimension".into()));
    }
    let eps = system.eps;
    let report = AssumptionReport::for_system(system)?;
    let lp = LPConfig::auto(&report, eps, cfg.tol);
    let dt_slow = eps / cfg.steps_per_eps as f64;
    let steps = ((cfg.window * eps / report.beta.abs()) / dt_slow).ceil() as usize;
    let t_end = steps as f64 * dt_slow;
    let opts = IntegratorOptions {
        substeps: Substeps::Fixed(1),
        ..IntegratorOptions::default()
    };
    let runs: Vec<Result<Vec<f64>>> = par_map(cfg.n_realizations, |r| {
        let stream = NoiseStream::new(cfg.seed, r as u64, m, dt_slow);
        let sol = lp_iterate(system, &cfg.x0, &stream, &lp)?;
        let y_on = sol.manifold_point();
        let y_off: Vec<f64> = y_on.iter().zip(&cfg.offset).map(|(a, b)| a + b).collect();
        let p_on = integrate_slowfast(system, &cfg.x0, &y_on, t_end, dt_slow, &stream, &opts)?;
        let p_off = integrate_slowfast(system, &cfg.x0, &y_off, t_end, dt_slow, &stream, &opts)?;
        Ok((0..p_on.len())
            .map(|i| {
                let dx: f64 = p_on.slow_at(i).iter().zip(p_off.slow_at(i)).map(|(a, b)| (a - b).powi(2)).sum();
                let dy: f64 = p_on.fast_at(i).iter().zip(p_off.fast_at(i)).map(|(a, b)| (a - b).powi(2)).sum();
                (dx + dy).sqrt()
            })
            .collect())
    });
    let dists = runs.into_iter().collect::<Result<Vec<_>>>()?;
    let d0 = norm(&cfg.offset);
    let max_distance = dists.iter().flatten().cloned().fold(0.0, f64::max);
    let gap = check_completeness_gap(&report, eps);
    let base = DecayReport {
        eps,
        rate: None,
        rate_se: None,
        fit_window: (0.0, t_end),
        window_shortened: false,
        initial_distance: d0,
        max_distance,
        linear_rate: -report.beta / eps,
        gamma: gap.gamma,
        gamma_check: None,
        initial_condition: "manifold-projected start with the same slow coordinate".into(),
    };
    if d0 == 0.0 {
        return Ok(base);
    }
    // usable prefix: every realisation still above the rounding floor
    let floor = 1e-12 * d0;
    let mut usable = dists.iter().map(|d| d.iter().take_while(|v| **v > floor).count()).min().unwrap_or(0);
    let shortened = usable < steps + 1;
    usable = usable.min(steps + 1);
    if usable < 3 {
        return Err(Error::DistanceUnderflow);
    }
    let t: Vec<f64> = (0..usable).map(|i| i as f64 * dt_slow).collect();
    let slopes: Vec<f64> = dists.iter().map(|d| -crate::stats::log_slope(&t, &d[..usable])).collect();
    let log_mean: Vec<f64> = (0..usable)
        .map(|i| (dists.iter().map(|d| d[i].ln()).sum::<f64>() / dists.len() as f64).exp())
        .collect();
    let rate = -crate::stats::log_slope(&t, &log_mean);
    let (_, se) = mean_se(&slopes);
    Ok(DecayReport {
        rate: Some(rate),
        rate_se: Some(se),
        fit_window: (0.0, t[usable - 1]),
        window_shortened: shortened,
        gamma_check: gap.gamma.map(|g| rate >= g / (2.0 * eps)),
        ..base
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttractionComparison {
    pub reports: (DecayReport, DecayReport),
    pub rate_ratio: f64,
    pub expected_ratio: f64,
    /// Rate ratio within a factor 2 of the `1/eps` ratio.
    pub scales_like_inverse_eps: bool,
}

/// Runs [`attraction_test`] at two values of `eps` and compares the rates.
pub fn attraction_scaling(system: &SlowFastSystem, eps_pair: (f64, f64), cfg: &AttractionConfig) -> Result<AttractionComparison> {
    let a = attraction_test(&system.with_eps(eps_pair.0)?, cfg)?;
    let b = attraction_test(&system.with_eps(eps_pair.1)?, cfg)?;
    let (ra, rb) = match (a.rate, b.rate) {
        (Some(x), Some(y)) => (x, y),
        _ => return Err(Error::InvalidArgument("zero perturbation has no decay rate".into())),
    };
    let rate_ratio = rb / ra;
    let expected_ratio = eps_pair.0 / eps_pair.1;
    let q = rate_ratio / expected_ratio;
    Ok(AttractionComparison {
        reports: (a, b),
        rate_ratio,
        expected_ratio,
        scales_like_inverse_eps: (0.5..=2.0).contains(&q),
    })
}

/// `A x + f(x, h0(x, theta_t omega) + eta(theta_t omega))`; `stream_at_t` is
/// the stream shifted to the current time.
pub fn reduced_rhs(system: &SlowFastSystem, x: &[f64], stream_at_t: &NoiseStream, burn_in: f64) -> Result<Vec<f64>> {
    let (h0, eta) = h0_with_eta(system, x, stream_at_t, burn_in)?;
    let y: Vec<f64> = h0.iter().zip(&eta).map(|(a, b)| a + b).collect();
    let mut out = vec![0.0; system.n()];
    system.slow_drift(x, &y, &mut out);
    Ok(out)
}

/// Heun integration of the manifold-reduced random ODE in steps of the stream
/// step. The fast column of the path holds `h0 + eta` along the solution.
pub fn integrate_reduced(
    system: &SlowFastSystem,
    x0: &[f64],
    t_end: f64,
    dt_slow: f64,
    stream: &NoiseStream,
    burn_in: f64,
) -> Result<SamplePath> {
    let h = stream.dt();
    let r = dt_slow / h;
    let per = r.round();
    if (r - per).abs() > 1e-9 || per < 1.0 {
        return Err(Error::StreamStepMismatch {
            stream_dt: h,
            substep: dt_slow,
        });
    }
    let per = per as usize;
    let q = t_end / dt_slow;
    if (q - q.round()).abs() > 1e-6 {
        return Err(Error::InvalidArgument("T must be a multiple of dt_slow".into()));
    }
    let steps = q.round() as usize;
    let (n, m) = (system.n(), system.m());
    let mut path = SamplePath::new(0.0, dt_slow, n, m);
    let mut x = x0.to_vec();
    let on = |x: &[f64], k: i64| -> Result<(Vec<f64>, Vec<f64>)> {
        let s = stream.shift_steps(k);
        let (h0, eta) = h0_with_eta(system, x, &s, burn_in)?;
        let y: Vec<f64> = h0.iter().zip(&eta).map(|(a, b)| a + b).collect();
        let mut d = vec![0.0; n];
        system.slow_drift(x, &y, &mut d);
        Ok((d, y))
    };
    let (mut d, mut y_last) = on(&x, 0)?;
    path.push(&x, &y_last);
    let mut k = 0i64;
    for i in 1..=steps {
        for _ in 0..per {
            let xs: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + h * b).collect();
            let (d1, _) = on(&xs, k + 1)?;
            for j in 0..n {
                x[j] += 0.5 * h * (d[j] + d1[j]);
            }
            k += 1;
            let (dn, yn) = on(&x, k)?;
            d = dn;
            y_last = yn;
        }
        if !(norm(&x) <= 1e12) {
            return Err(Error::BlowUp {
                time: i as f64 * dt_slow,
                partial: Box::new(path),
            });
        }
        path.push(&x, &y_last);
    }
    Ok(path)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvarianceReport {
    pub times: Vec<f64>,
    /// `|y(t) - h(x(t), theta_t omega) - eta(theta_t omega)|`.
    pub discrepancy: Vec<f64>,
    /// Difference between the step-`h` and step-`2h` solutions at the same times.
    pub integrator_error: Vec<f64>,
    pub bound: f64,
    pub within_bound: bool,
}

/// Starts the full system on the manifold and tracks the distance of the fast
/// coordinate to the manifold at `t = eps, 2 eps, ..., n_checks eps`.
pub fn invariance_check(
    system: &SlowFastSystem,
    x0: &[f64],
    stream: &NoiseStream,
    cfg: &LPConfig,
    n_checks: usize,
) -> Result<InvarianceReport> {
    let eps = system.eps;
    let h = stream.dt();
    let per = (eps / h).round() as usize;
    if per < 2 || ((eps / h) - per as f64).abs() > 1e-9 || per % 2 != 0 {
        return Err(Error::InvalidArgument("stream step must divide eps an even number of times".into()));
    }
    let sol = lp_iterate(system, x0, stream, cfg)?;
    let y0 = sol.manifold_point();
    let t_end = n_checks as f64 * eps;
    let fine = IntegratorOptions {
        substeps: Substeps::Fixed(per),
        ..IntegratorOptions::default()
    };
    let coarse = IntegratorOptions {
        substeps: Substeps::Fixed(per / 2),
        ..IntegratorOptions::default()
    };
    let pf = integrate_slowfast(system, x0, &y0, t_end, eps, stream, &fine)?;
    let pc = integrate_slowfast(system, x0, &y0, t_end, eps, &stream.coarsen(2), &coarse)?;
    let mut times = Vec::new();
    let mut discrepancy = Vec::new();
    let mut integrator_error = Vec::new();
    for i in 1..=n_checks {
        let shifted = stream.shift_steps((i * per) as i64);
        let on = lp_iterate(system, pf.slow_at(i), &shifted, cfg)?.manifold_point();
        let d = norm(&pf.fast_at(i).iter().zip(&on).map(|(a, b)| a - b).collect::<Vec<_>>());
        let e = norm(&pf.fast_at(i).iter().zip(pc.fast_at(i)).map(|(a, b)| a - b).collect::<Vec<_>>());
        times.push(i as f64 * eps);
        discrepancy.push(d);
        integrator_error.push(e);
    }
    let bound = 5.0 * cfg.tol + integrator_error.iter().cloned().fold(0.0, f64::max);
    let within_bound = discrepancy.iter().all(|d| *d <= bound);
    Ok(InvarianceReport {
        times,
        discrepancy,
        integrator_error,
        bound,
        within_bound,
    })
}

/// Linear fixed point `-B^{-1} g(x)` for a `g` that does not depend on `y`.
pub fn constant_forcing_fixed_point(b: &DMatrix<f64>, g: &[f64]) -> Result<Vec<f64>> {
    let rhs = nalgebra::DVector::from_column_slice(g);
    let sol = b
        .clone()
        .lu()
        .solve(&(-rhs))
        .ok_or_else(|| Error::InvalidArgument("B is singular".into()))?;
    Ok(sol.iter().cloned().collect())
}
