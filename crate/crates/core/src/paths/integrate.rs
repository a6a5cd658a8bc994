use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::noise::NoiseStream;
use super::path::SamplePath;
use crate::error::{Error, Result};
use crate::linalg::{norm, ou_covariance, phi_functions, psd_sqrt, Dense};
use crate::parallel::par_map;
use crate::paths::noise::Branch;
use crate::stats::mean_se;
use crate::systems::{SlowFastSystem, VectorField};

/// Treatment of the fast nonlinearity over one substep. Both variants use the
/// exact linear propagator and the exact OU noise covariance.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FastScheme {
    /// `g` frozen at the start of the substep.
    #[default]
    ExponentialEuler,
    /// Trapezoidal corrector on `g` with the same noise draw.
    ExponentialHeun,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Substeps {
    /// `n_sub = ceil(per_eps * dt_slow / eps)`.
    Auto { per_eps: f64 },
    Fixed(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntegratorOptions {
    pub scheme: FastScheme,
    pub substeps: Substeps,
}

impl Default for IntegratorOptions {
    fn default() -> Self {
        IntegratorOptions {
            scheme: FastScheme::ExponentialEuler,
            substeps: Substeps::Auto { per_eps: 10.0 },
        }
    }
}

impl IntegratorOptions {
    pub fn heun(per_eps: f64) -> Self {
        IntegratorOptions {
            scheme: FastScheme::ExponentialHeun,
            substeps: Substeps::Auto { per_eps },
        }
    }
}

/// Number of fast substeps per slow step and the substep length.
pub fn fast_substep(eps: f64, dt_slow: f64, opts: &IntegratorOptions) -> (usize, f64) {
    let n = match opts.substeps {
        Substeps::Auto { per_eps } => ((per_eps * dt_slow / eps) - 1e-9).ceil().max(1.0) as usize,
        Substeps::Fixed(n) => n.max(1),
    };
    (n, dt_slow / n as f64)
}

/// Per-substep operators for a fixed substep `h`.
#[derive(Clone)]
pub struct FastStepper {
    pub n: usize,
    pub m: usize,
    pub h: f64,
    pub scheme: FastScheme,
    e: Dense,
    p1: Dense,
    l: Dense,
    a: Dense,
    f: Arc<dyn VectorField>,
    g: Arc<dyn VectorField>,
}

/// Scratch buffers for [`FastStepper`].
#[derive(Clone, Debug)]
pub struct Workspace {
    drift: Vec<f64>,
    g0: Vec<f64>,
    g1: Vec<f64>,
    xi: Vec<f64>,
    ystar: Vec<f64>,
    xstar: Vec<f64>,
    tmp: Vec<f64>,
    xt: Vec<f64>,
}

impl Workspace {
    pub fn new(n: usize, m: usize) -> Self {
        Workspace {
            drift: vec![0.0; n],
            g0: vec![0.0; m],
            g1: vec![0.0; m],
            xi: vec![0.0; m],
            ystar: vec![0.0; m],
            xstar: vec![0.0; n],
            tmp: vec![0.0; m],
            xt: vec![0.0; n],
        }
    }
}

impl FastStepper {
    pub fn new(system: &SlowFastSystem, h: f64, scheme: FastScheme) -> Result<Self> {
        let hf = h / system.eps;
        let (e, phi1, _) = phi_functions(&(&system.b * hf));
        let q = ou_covariance(&system.b, system.sigma * system.sigma, hf)?;
        let l = psd_sqrt(&q, 1e-12 * q.norm().max(1e-300))
            .map_err(|_| Error::CovarianceNotPsd { min_eig: crate::linalg::min_eigenvalue(&q) })?;
        Ok(FastStepper {
            n: system.n(),
            m: system.m(),
            h,
            scheme,
            e: Dense::from_matrix(&e),
            p1: Dense::from_matrix(&(phi1 * hf)),
            l: Dense::from_matrix(&l),
            a: Dense::from_matrix(&system.a),
            f: system.f.clone(),
            g: system.g.clone(),
        })
    }

    pub fn workspace(&self) -> Workspace {
        Workspace::new(self.n, self.m)
    }

    /// OU innovation `xi = Q(h)^{1/2} z`.
    #[inline]
    pub fn innovation(&self, z: &[f64], out: &mut [f64]) {
        self.l.apply(z, out);
    }

    #[inline]
    fn slow_drift(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        self.f.eval(x, y, out);
        self.a.apply_add(x, out);
    }

    /// `e^{Bh/eps} y + h/eps phi1(Bh/eps) g + xi` into `out`.
    #[inline]
    fn fast_update(&self, y: &[f64], g: &[f64], xi: &[f64], out: &mut [f64]) {
        self.e.apply(y, out);
        self.p1.apply_add(g, out);
        for (o, x) in out.iter_mut().zip(xi) {
            *o += x;
        }
    }

    /// One fast substep with the slow state frozen at `x`.
    #[inline]
    pub fn frozen_step(&self, x: &[f64], y: &mut [f64], z: &[f64], ws: &mut Workspace) {
        self.g.eval(x, y, &mut ws.g0);
        self.innovation(z, &mut ws.xi);
        self.fast_update(y, &ws.g0, &ws.xi, &mut ws.ystar);
        if self.scheme == FastScheme::ExponentialHeun {
            self.g.eval(x, &ws.ystar, &mut ws.g1);
            for i in 0..self.m {
                ws.g1[i] = 0.5 * (ws.g0[i] + ws.g1[i]);
            }
            self.fast_update(y, &ws.g1, &ws.xi, &mut ws.tmp);
            y.copy_from_slice(&ws.tmp);
        } else {
            y.copy_from_slice(&ws.ystar);
        }
    }

    /// One coupled substep: fast variable by the exponential scheme, slow
    /// variable by explicit midpoint using the substep-averaged fast state.
    #[inline]
    pub fn coupled_step(&self, x: &mut [f64], y: &mut [f64], z: &[f64], ws: &mut Workspace) {
        let h = self.h;
        self.slow_drift(x, y, &mut ws.drift);
        self.g.eval(x, y, &mut ws.g0);
        self.innovation(z, &mut ws.xi);
        self.fast_update(y, &ws.g0, &ws.xi, &mut ws.ystar);
        if self.scheme == FastScheme::ExponentialHeun {
            for i in 0..self.n {
                ws.xstar[i] = x[i] + h * ws.drift[i];
            }
            self.g.eval(&ws.xstar, &ws.ystar, &mut ws.g1);
            for i in 0..self.m {
                ws.g1[i] = 0.5 * (ws.g0[i] + ws.g1[i]);
            }
            self.fast_update(y, &ws.g1, &ws.xi, &mut ws.tmp);
            ws.ystar.copy_from_slice(&ws.tmp);
        }
        for i in 0..self.n {
            ws.xt[i] = x[i] + 0.5 * h * ws.drift[i];
        }
        for i in 0..self.m {
            ws.tmp[i] = 0.5 * (y[i] + ws.ystar[i]);
        }
        self.slow_drift(&ws.xt, &ws.tmp, &mut ws.drift);
        for i in 0..self.n {
            x[i] += h * ws.drift[i];
        }
        y.copy_from_slice(&ws.ystar);
    }
}

/// Hooks called by [`integrate_with`].
pub trait Observer {
    /// After every substep, with the states before and after and the normal draw.
    fn substep(&mut self, _k: u64, _x0: &[f64], _y0: &[f64], _x1: &[f64], _y1: &[f64], _z: &[f64]) {}
    /// On the slow grid, including `t = 0`.
    fn record(&mut self, _i: usize, _t: f64, _x: &[f64], _y: &[f64]) {}
}

impl Observer for () {}

struct Recorder<'a>(&'a mut SamplePath);

impl Observer for Recorder<'_> {
    fn record(&mut self, _i: usize, _t: f64, x: &[f64], y: &[f64]) {
        self.0.push(x, y);
    }
}

fn slow_steps(t_end: f64, dt_slow: f64) -> Result<usize> {
    if !(dt_slow > 0.0) || !(t_end >= 0.0) {
        return Err(Error::InvalidArgument("need dt_slow > 0 and T >= 0".into()));
    }
    let r = t_end / dt_slow;
    let k = r.round();
    if (r - k).abs() > 1e-6 {
        return Err(Error::InvalidArgument(format!("T = {t_end} is not a multiple of dt = {dt_slow}")));
    }
    Ok(k as usize)
}

/// Integrates the coupled system, reporting through `obs`. The stream step must
/// equal the fast substep; see [`fast_substep`].
#[allow(clippy::too_many_arguments)]
pub fn integrate_with(
    system: &SlowFastSystem,
    x0: &[f64],
    y0: &[f64],
    t_end: f64,
    dt_slow: f64,
    stream: &NoiseStream,
    opts: &IntegratorOptions,
    obs: &mut dyn Observer,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let steps = slow_steps(t_end, dt_slow)?;
    let (n_sub, h) = fast_substep(system.eps, dt_slow, opts);
    if ((stream.dt() - h) / h).abs() > 1e-9 {
        return Err(Error::StreamStepMismatch {
            stream_dt: stream.dt(),
            substep: h,
        });
    }
    let stepper = FastStepper::new(system, h, opts.scheme)?;
    run_stepper(&stepper, x0, y0, steps, n_sub, dt_slow, stream, obs)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn run_stepper(
    stepper: &FastStepper,
    x0: &[f64],
    y0: &[f64],
    steps: usize,
    n_sub: usize,
    dt_slow: f64,
    stream: &NoiseStream,
    obs: &mut dyn Observer,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let (n, m) = (stepper.n, stepper.m);
    let mut ws = stepper.workspace();
    let (mut x, mut y) = (x0.to_vec(), y0.to_vec());
    let (mut xp, mut yp) = (vec![0.0; n], vec![0.0; m]);
    let mut z = vec![0.0; m];
    obs.record(0, 0.0, &x, &y);
    let mut k: u64 = 0;
    for i in 1..=steps {
        for _ in 0..n_sub {
            stream.standard_normal(k as i64, &mut z);
            xp.copy_from_slice(&x);
            yp.copy_from_slice(&y);
            stepper.coupled_step(&mut x, &mut y, &z, &mut ws);
            obs.substep(k, &xp, &yp, &x, &y, &z);
            k += 1;
        }
        let t = i as f64 * dt_slow;
        let size = norm(&x).max(norm(&y));
        if !(size <= 1e12) {
            return Err(Error::BlowUp {
                time: t,
                partial: Box::new(SamplePath::new(0.0, dt_slow, n, m)),
            });
        }
        obs.record(i, t, &x, &y);
    }
    Ok((x, y))
}

/// Full path of the coupled system on the slow grid.
#[allow(clippy::too_many_arguments)]
pub fn integrate_slowfast(
    system: &SlowFastSystem,
    x0: &[f64],
    y0: &[f64],
    t_end: f64,
    dt_slow: f64,
    stream: &NoiseStream,
    opts: &IntegratorOptions,
) -> Result<SamplePath> {
    let mut path = SamplePath::new(0.0, dt_slow, system.n(), system.m());
    let res = integrate_with(system, x0, y0, t_end, dt_slow, stream, opts, &mut Recorder(&mut path));
    match res {
        Ok(_) => Ok(path),
        Err(Error::BlowUp { time, .. }) => Err(Error::BlowUp {
            time,
            partial: Box::new(path),
        }),
        Err(e) => Err(e),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub mean_sup_sq: f64,
    pub stderr: f64,
    /// `E sup |(x, y)|^2 / (|z0|^2 + 1)`.
    pub ratio: f64,
    pub n_replicas: usize,
}

/// Ensemble estimate of `E sup_{t<=T} |(x, y)|^2` relative to `|z0|^2 + 1`.
#[allow(clippy::too_many_arguments)]
pub fn moment_sanity(
    system: &SlowFastSystem,
    x0: &[f64],
    y0: &[f64],
    t_end: f64,
    dt_slow: f64,
    n_replicas: usize,
    seed: u64,
    opts: &IntegratorOptions,
) -> Result<BoundReport> {
    if n_replicas < 100 {
        return Err(Error::InvalidArgument("moment_sanity needs at least 100 replicas".into()));
    }
    struct SupSq(f64);
    impl Observer for SupSq {
        fn record(&mut self, _i: usize, _t: f64, x: &[f64], y: &[f64]) {
            let s: f64 = x.iter().chain(y).map(|v| v * v).sum();
            self.0 = self.0.max(s);
        }
    }
    let (_, h) = fast_substep(system.eps, dt_slow, opts);
    let sups: Vec<Result<f64>> = par_map(n_replicas, |r| {
        let stream = NoiseStream::new(seed, r as u64, system.m(), h).with_branch(Branch::Fast, system.m());
        let mut obs = SupSq(0.0);
        integrate_with(system, x0, y0, t_end, dt_slow, &stream, opts, &mut obs)?;
        Ok(obs.0)
    });
    let sups: Vec<f64> = sups.into_iter().collect::<Result<_>>()?;
    let (mean, se) = mean_se(&sups);
    let z2: f64 = x0.iter().chain(y0).map(|v| v * v).sum();
    Ok(BoundReport {
        mean_sup_sq: mean,
        stderr: se,
        ratio: mean / (z2 + 1.0),
        n_replicas,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::linear_test_system;
    use nalgebra::DMatrix;

    #[test]
    fn substep_rule() {
        let o = IntegratorOptions::default();
        assert_eq!(fast_substep(0.01, 1e-3, &o).0, 1);
        assert_eq!(fast_substep(0.01, 2e-3, &o).0, 2);
        assert_eq!(fast_substep(0.001, 1e-3, &o).0, 10);
    }

    #[test]
    fn decoupled_linear_slow_part() {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, -0.1]);
        let s = linear_test_system(a.clone(), DMatrix::from_element(1, 1, -1.0), 0.5, 0.01).unwrap();
        let o = IntegratorOptions::default();
        let (_, h) = fast_substep(s.eps, 1e-3, &o);
        let st = NoiseStream::new(1, 0, 1, h);
        let p = integrate_slowfast(&s, &[1.0, 0.0], &[0.0], 1.0, 1e-3, &st, &o).unwrap();
        let exact = a.exp() * nalgebra::DVector::from_vec(vec![1.0, 0.0]);
        let x = p.last_slow();
        for i in 0..2 {
            assert!((x[i] - exact[i]).abs() < 1e-4 * exact.norm());
        }
    }

    #[test]
    fn stream_step_must_match() {
        let s = linear_test_system(DMatrix::zeros(1, 1), DMatrix::from_element(1, 1, -1.0), 1.0, 0.1).unwrap();
        let st = NoiseStream::new(1, 0, 1, 0.5);
        let r = integrate_slowfast(&s, &[0.0], &[0.0], 1.0, 0.1, &st, &IntegratorOptions::default());
        assert!(matches!(r, Err(Error::StreamStepMismatch { .. })));
    }

    #[test]
    fn blow_up_returns_partial_path() {
        let s = linear_test_system(DMatrix::from_element(1, 1, 40.0), DMatrix::from_element(1, 1, -1.0), 1.0, 0.1)
            .unwrap();
        let o = IntegratorOptions::default();
        let (_, h) = fast_substep(s.eps, 0.01, &o);
        let st = NoiseStream::new(1, 0, 1, h);
        match integrate_slowfast(&s, &[1.0], &[0.0], 1.0, 0.01, &st, &o) {
            Err(Error::BlowUp { time, partial }) => {
                assert!(time < 1.0 && !partial.is_empty());
            }
            other => panic!("{other:?}"),
        }
    }
}
