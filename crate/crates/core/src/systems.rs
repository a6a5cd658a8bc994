//! Slow-fast system definitions and numerical certification of the structural
//! assumptions (dissipative fast part, spectral gap, completeness gap).

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::log_norm;

/// A nonlinearity `(x, y) -> out`.
pub trait VectorField: Send + Sync {
    fn eval(&self, x: &[f64], y: &[f64], out: &mut [f64]);
}

impl<F> VectorField for F
where
    F: Fn(&[f64], &[f64], &mut [f64]) + Send + Sync,
{
    fn eval(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        self(x, y, out)
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ZeroField;

impl VectorField for ZeroField {
    fn eval(&self, _x: &[f64], _y: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
    }
}

/// `dx = (Ax + f(x,y)) dt`, `dy = (1/eps)(By + g(x,y)) dt + (sigma/sqrt(eps)) dW`.
#[derive(Clone)]
pub struct SlowFastSystem {
    pub name: String,
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub f: Arc<dyn VectorField>,
    pub g: Arc<dyn VectorField>,
    pub sigma: f64,
    pub eps: f64,
    /// Analytic Lipschitz constants `(L_f, L_g)` when known.
    pub lipschitz: Option<(f64, f64)>,
}

impl fmt::Debug for SlowFastSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SlowFastSystem")
            .field("name", &self.name)
            .field("a", &self.a)
            .field("b", &self.b)
            .field("sigma", &self.sigma)
            .field("eps", &self.eps)
            .finish()
    }
}

impl SlowFastSystem {
    pub fn new(
        name: impl Into<String>,
        a: DMatrix<f64>,
        b: DMatrix<f64>,
        f: Arc<dyn VectorField>,
        g: Arc<dyn VectorField>,
        sigma: f64,
        eps: f64,
    ) -> Result<Self> {
        let sys = SlowFastSystem {
            name: name.into(),
            a,
            b,
            f,
            g,
            sigma,
            eps,
            lipschitz: None,
        };
        sys.validate()?;
        Ok(sys)
    }

    fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSystem(m));
        if !self.a.is_square() || self.a.nrows() == 0 {
            return bad("A must be a nonempty square matrix".into());
        }
        if !self.b.is_square() || self.b.nrows() == 0 {
            return bad("B must be a nonempty square matrix".into());
        }
        if self.a.iter().chain(self.b.iter()).any(|v| !v.is_finite()) {
            return bad("A and B must be finite".into());
        }
        if !(self.eps > 0.0 && self.eps <= 1.0) {
            return bad(format!("eps = {} outside (0, 1]", self.eps));
        }
        if self.sigma == 0.0 || !self.sigma.is_finite() {
            return bad("sigma must be finite and nonzero".into());
        }
        let (n, m) = (self.n(), self.m());
        let (mut fo, mut go) = (vec![0.0; n], vec![0.0; m]);
        self.f.eval(&vec![0.0; n], &vec![0.0; m], &mut fo);
        self.g.eval(&vec![0.0; n], &vec![0.0; m], &mut go);
        if fo.iter().chain(go.iter()).any(|v| v.abs() > 1e-12) {
            return bad("nonlinearities must vanish at the origin".into());
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.a.nrows()
    }

    pub fn m(&self) -> usize {
        self.b.nrows()
    }

    pub fn with_eps(&self, eps: f64) -> Result<Self> {
        let mut s = self.clone();
        s.eps = eps;
        s.validate()?;
        Ok(s)
    }

    pub fn with_lipschitz(mut self, lip_f: f64, lip_g: f64) -> Self {
        self.lipschitz = Some((lip_f, lip_g));
        self
    }

    /// Slow drift `Ax + f(x, y)`.
    pub fn slow_drift(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        self.f.eval(x, y, out);
        for i in 0..self.n() {
            for j in 0..self.n() {
                out[i] += self.a[(i, j)] * x[j];
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub alpha: f64,
    pub beta: f64,
    pub lip_f: f64,
    pub lip_g: f64,
    /// Whether the Lipschitz constants came from the sampling estimator
    /// (and are therefore lower bounds).
    pub lipschitz_estimated: bool,
    pub lambda_interval: Option<(f64, f64)>,
    pub h2_holds: bool,
    pub gap_holds: bool,
    /// `None` with `gap_holds` means the optimum sits at a limit (0 or infinity).
    pub delta: Option<f64>,
    pub gamma: Option<f64>,
}

impl AssumptionReport {
    pub fn new(alpha: f64, beta: f64, lip_f: f64, lip_g: f64) -> Self {
        AssumptionReport {
            alpha,
            beta,
            lip_f,
            lip_g,
            lipschitz_estimated: false,
            lambda_interval: None,
            h2_holds: false,
            gap_holds: false,
            delta: None,
            gamma: None,
        }
    }

    /// Runs H1, H2 and the gap check for a system with the given constants.
    pub fn assess(system: &SlowFastSystem, lip_f: f64, lip_g: f64) -> Result<Self> {
        let (alpha, beta) = check_h1(system)?;
        let mut r = AssumptionReport::new(alpha, beta, lip_f, lip_g);
        let (h2, interval) = check_h2(&r, system.eps)?;
        r.h2_holds = h2;
        r.lambda_interval = interval;
        let gap = check_completeness_gap(&r, system.eps);
        r.gap_holds = gap.holds;
        r.delta = gap.delta;
        r.gamma = gap.gamma;
        Ok(r)
    }

    /// Uses the system's analytic Lipschitz constants when present, otherwise
    /// the sampling estimate on the cube of half-width 1.
    pub fn for_system(system: &SlowFastSystem) -> Result<Self> {
        match system.lipschitz {
            Some((lf, lg)) => Self::assess(system, lf, lg),
            None => {
                let lf = estimate_field_lipschitz(system, Field::Slow, 1.0, 4096, 0)?;
                let lg = estimate_field_lipschitz(system, Field::Fast, 1.0, 4096, 0)?;
                let mut r = Self::assess(system, lf, lg)?;
                r.lipschitz_estimated = true;
                Ok(r)
            }
        }
    }

    /// H2 left-hand side `L_f/(alpha - lambda) + L_g/(eps lambda - beta)`.
    pub fn h2_lhs(&self, lambda: f64, eps: f64) -> f64 {
        let a = if self.lip_f == 0.0 {
            0.0
        } else {
            self.lip_f / (self.alpha - lambda)
        };
        let b = if self.lip_g == 0.0 {
            0.0
        } else {
            self.lip_g / (eps * lambda - self.beta)
        };
        a + b
    }
}

/// Tightest logarithmic-norm bounds: `alpha = max(0, -mu(-A))`, `beta = mu(B)`.
pub fn check_h1(system: &SlowFastSystem) -> Result<(f64, f64)> {
    let alpha = (-log_norm(&(-&system.a))).max(0.0);
    let beta = log_norm(&system.b);
    if beta >= 0.0 {
        return Err(Error::FastNotDissipative { mu: beta });
    }
    Ok((alpha, beta))
}

const H2_GRID: usize = 1024;

/// Searches `beta/eps < lambda < alpha` for the spectral gap condition and
/// returns the feasible sub-interval.
pub fn check_h2(report: &AssumptionReport, eps: f64) -> Result<(bool, Option<(f64, f64)>)> {
    let lo = report.beta / eps;
    let hi = report.alpha;
    if hi <= lo {
        return Err(Error::DegenerateInterval {
            alpha: report.alpha,
            lower: lo,
        });
    }
    if report.lip_f == 0.0 && report.lip_g == 0.0 {
        return Ok((true, Some((lo, hi))));
    }
    // logistic map of a uniform grid: log-spaced near both open ends
    let lam = |z: f64| lo + (hi - lo) / (1.0 + (-z).exp());
    let obj = |z: f64| report.h2_lhs(lam(z), eps);
    let zmax = 36.0;
    let zs: Vec<f64> = (0..H2_GRID)
        .map(|i| -zmax + 2.0 * zmax * i as f64 / (H2_GRID - 1) as f64)
        .collect();
    let vals: Vec<f64> = zs.iter().map(|&z| obj(z)).collect();
    let (imin, _) = vals
        .iter()
        .enumerate()
        .filter(|(_, v)| v.is_finite())
        .fold((0, f64::INFINITY), |acc, (i, &v)| if v < acc.1 { (i, v) } else { acc });
    let a = zs[imin.saturating_sub(1)];
    let b = zs[(imin + 1).min(H2_GRID - 1)];
    let zstar = golden_section(&obj, a, b, 1e-12);
    let best = obj(zstar).min(vals[imin]);
    if !(best < 1.0) {
        return Ok((false, None));
    }
    let zstar = if obj(zstar) <= vals[imin] { zstar } else { zs[imin] };
    let edge = |target: f64| {
        // bisection between the minimiser and an end of the search range
        let (mut inside, mut outside) = (zstar, target);
        if obj(outside) < 1.0 {
            return outside;
        }
        for _ in 0..200 {
            let mid = 0.5 * (inside + outside);
            if obj(mid) < 1.0 {
                inside = mid;
            } else {
                outside = mid;
            }
        }
        inside
    };
    let zl = edge(-zmax);
    let zh = edge(zmax);
    let l = if zl <= -zmax { lo } else { lam(zl) };
    let h = if zh >= zmax { hi } else { lam(zh) };
    Ok((true, Some((l, h))))
}

fn golden_section(f: &dyn Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let r = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while (b - a).abs() > tol {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GapCheck {
    pub holds: bool,
    pub delta: Option<f64>,
    pub gamma: Option<f64>,
    /// Minimum of the gap objective over `delta > 0` (a limit value in the
    /// degenerate cases).
    pub objective: f64,
}

/// Gap objective `eps alpha + eps L_f + eps delta L_f + beta + L_g + L_g/delta`.
pub fn gap_objective(report: &AssumptionReport, eps: f64, delta: f64) -> f64 {
    let r = report;
    eps * r.alpha + eps * r.lip_f + eps * delta * r.lip_f + r.beta + r.lip_g + r.lip_g / delta
}

pub fn check_completeness_gap(report: &AssumptionReport, eps: f64) -> GapCheck {
    let r = report;
    let (delta, objective, gamma) = if r.lip_f > 0.0 && r.lip_g > 0.0 {
        let d = (r.lip_g / (eps * r.lip_f)).sqrt();
        (Some(d), gap_objective(r, eps, d), -r.beta - r.lip_g - r.lip_g / d)
    } else if r.lip_f == 0.0 {
        // objective decreases in delta: take the delta -> infinity limit
        (None, eps * r.alpha + r.beta + r.lip_g, -r.beta - r.lip_g)
    } else {
        // L_g = 0: objective increases in delta, limit delta -> 0
        (None, eps * r.alpha + eps * r.lip_f + r.beta, -r.beta)
    };
    let holds = objective < 0.0 && gamma > 0.0;
    GapCheck {
        holds,
        delta: if holds { delta } else { None },
        gamma: if holds { Some(gamma) } else { None },
        objective,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl DomainBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Self {
        DomainBox { lo, hi }
    }

    pub fn cube(dim: usize, half_width: f64) -> Self {
        DomainBox {
            lo: vec![-half_width; dim],
            hi: vec![half_width; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }
}

fn first_primes(k: usize) -> Vec<u64> {
    let mut out = Vec::with_capacity(k);
    let mut c = 2u64;
    while out.len() < k {
        if out.iter().take_while(|p| *p * *p <= c).all(|p| c % p != 0) {
            out.push(c);
        }
        c += 1;
    }
    out
}

fn radical_inverse(mut i: u64, base: u64) -> f64 {
    let inv = 1.0 / base as f64;
    let (mut f, mut r) = (inv, 0.0);
    while i > 0 {
        r += f * (i % base) as f64;
        i /= base;
        f *= inv;
    }
    r
}

/// Sampled lower bound on the Lipschitz constant of `func` over `domain`:
/// Halton pairs with a seeded Cranley-Patterson rotation.
pub fn estimate_lipschitz(
    func: &dyn Fn(&[f64]) -> Vec<f64>,
    domain: &DomainBox,
    n_samples: usize,
    seed: u64,
) -> Result<f64> {
    let d = domain.dim();
    if d == 0 || domain.lo.iter().zip(&domain.hi).any(|(l, h)| !(h > l)) {
        return Err(Error::EmptyDomain);
    }
    let primes = first_primes(2 * d);
    let shift: Vec<f64> = (0..2 * d)
        .map(|k| {
            let h = crate::paths::mix64(seed ^ crate::paths::mix64(k as u64 + 1));
            (h >> 11) as f64 / (1u64 << 53) as f64
        })
        .collect();
    let point = |i: u64, off: usize| -> Vec<f64> {
        (0..d)
            .map(|k| {
                let u = (radical_inverse(i, primes[off + k]) + shift[off + k]).fract();
                domain.lo[k] + u * (domain.hi[k] - domain.lo[k])
            })
            .collect()
    };
    let mut best = 0.0f64;
    for i in 1..=n_samples.max(2) as u64 {
        let p = point(i, 0);
        let q = point(i, d);
        let dist = crate::linalg::norm(&p.iter().zip(&q).map(|(a, b)| a - b).collect::<Vec<_>>());
        if dist == 0.0 {
            continue;
        }
        let (fp, fq) = (func(&p), func(&q));
        let diff = crate::linalg::norm(&fp.iter().zip(&fq).map(|(a, b)| a - b).collect::<Vec<_>>());
        best = best.max(diff / dist);
    }
    Ok(best)
}

/// Lipschitz estimate of a system nonlinearity on a box in the joint `(x, y)` space.
pub fn estimate_field_lipschitz(
    system: &SlowFastSystem,
    which: Field,
    half_width: f64,
    n_samples: usize,
    seed: u64,
) -> Result<f64> {
    let (n, m) = (system.n(), system.m());
    let field = match which {
        Field::Slow => system.f.clone(),
        Field::Fast => system.g.clone(),
    };
    let out_dim = match which {
        Field::Slow => n,
        Field::Fast => m,
    };
    let func = move |z: &[f64]| {
        let mut out = vec![0.0; out_dim];
        field.eval(&z[..n], &z[n..], &mut out);
        out
    };
    estimate_lipschitz(&func, &DomainBox::cube(n + m, half_width), n_samples, seed)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Field {
    Slow,
    Fast,
}

pub type FieldPair = (Arc<dyn VectorField>, Arc<dyn VectorField>);
pub type FieldBuilder = fn(usize, usize) -> Result<FieldPair>;

/// Named nonlinearity pairs `(f, g)` available to configuration files.
#[derive(Clone)]
pub struct NonlinearityRegistry {
    entries: BTreeMap<String, FieldBuilder>,
}

impl Default for NonlinearityRegistry {
    fn default() -> Self {
        Self::builtin()
    }
}

impl NonlinearityRegistry {
    pub fn empty() -> Self {
        NonlinearityRegistry {
            entries: BTreeMap::new(),
        }
    }

    pub fn builtin() -> Self {
        let mut r = Self::empty();
        r.register("toy", |n, m| {
            if n != 1 || m != 1 {
                return Err(Error::InvalidSystem("toy nonlinearity needs n = m = 1".into()));
            }
            let t = crate::benchmark::ToyModel::default();
            Ok((Arc::new(t.slow_field()), Arc::new(t.fast_field())))
        });
        r.register("linear_test", |_, _| Ok((Arc::new(ZeroField), Arc::new(ZeroField))));
        r
    }

    pub fn register(&mut self, name: &str, builder: FieldBuilder) {
        self.entries.insert(name.to_string(), builder);
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    pub fn build(&self, name: &str, n: usize, m: usize) -> Result<FieldPair> {
        match self.entries.get(name) {
            Some(b) => b(n, m),
            None => Err(Error::InvalidSystem(format!(
                "unknown nonlinearity '{name}' (known: {})",
                self.names().join(", ")
            ))),
        }
    }
}

/// `A = 0`, `B = diag(b)`, `f = g = 0`.
pub fn linear_test_system(a: DMatrix<f64>, b: DMatrix<f64>, sigma: f64, eps: f64) -> Result<SlowFastSystem> {
    Ok(SlowFastSystem::new("linear_test", a, b, Arc::new(ZeroField), Arc::new(ZeroField), sigma, eps)?
        .with_lipschitz(0.0, 0.0))
}
