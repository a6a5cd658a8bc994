//! Strict TOML experiment configuration.

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use slowfast::benchmark::{toy_system, BudgetLevel};
use slowfast::systems::NonlinearityRegistry;
use slowfast::{DMatrix, SlowFastSystem};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Simulate,
    ManifoldGap,
    AverageSweep,
    IntermediateSweep,
    SigmaTable,
    ValidateToy,
    MartingaleCheck,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: Kind,
    pub seed: u64,
    pub output_dir: String,
    pub system: Option<SystemSection>,
    pub paths: Option<PathsSection>,
    pub manifold: Option<ManifoldSection>,
    pub averaging: Option<AveragingSection>,
    pub fluctuation: Option<FluctuationSection>,
    pub benchmark: Option<BenchmarkSection>,
}

/// Either `builtin = "toy"` or a registered nonlinearity with explicit `a`, `b`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    pub builtin: Option<String>,
    pub nonlinearity: Option<String>,
    pub a: Option<Vec<Vec<f64>>>,
    pub b: Option<Vec<Vec<f64>>>,
    pub sigma: f64,
    pub eps: f64,
    /// `[L_f, L_g]`.
    pub lipschitz: Option<[f64; 2]>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    pub x0: Vec<f64>,
    pub y0: Option<Vec<f64>>,
    pub t_end: f64,
    #[serde(default = "default_dt")]
    pub dt_slow: f64,
    #[serde(default = "default_per_eps")]
    pub substeps_per_eps: f64,
    #[serde(default = "one")]
    pub n_replicas: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifoldSection {
    pub x: Vec<f64>,
    pub eps_list: Vec<f64>,
    pub n_realizations: usize,
}

/// Replica count for every eps, or one per eps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Replicas {
    Same(usize),
    PerEps(Vec<usize>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TableMethod {
    Quadrature,
    MonteCarlo,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AveragingSection {
    pub x0: Vec<f64>,
    pub t_end: f64,
    pub eps_list: Vec<f64>,
    pub n_replicas: Replicas,
    /// `[lo, hi, n]` along the first slow coordinate.
    pub grid: (f64, f64, usize),
    #[serde(default = "default_dt")]
    pub dt_slow: f64,
    #[serde(default = "default_per_eps")]
    pub substeps_per_eps: f64,
    #[serde(default = "quadrature")]
    pub tables: TableMethod,
    #[serde(default = "default_nodes")]
    pub quadrature_nodes: usize,
    #[serde(default = "yes")]
    pub control_variates: bool,
    /// Exit with status 2 when the fitted slope falls outside.
    pub expected_slope: Option<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FluctuationSection {
    pub grid: Option<(f64, f64, usize)>,
    #[serde(default = "quadrature")]
    pub method: TableMethod,
    #[serde(default = "default_nodes")]
    pub quadrature_nodes: usize,
    /// Fast clock.
    #[serde(default = "default_t_corr")]
    pub t_corr: f64,
    /// Fast clock.
    #[serde(default = "default_t_total")]
    pub t_total: f64,
    pub x0: Option<Vec<f64>>,
    pub n_replicas: Option<usize>,
    pub t_end: Option<f64>,
    pub n_inner: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchmarkSection {
    #[serde(default = "default_budget")]
    pub budget: BudgetLevel,
}

fn default_dt() -> f64 {
    1e-3
}
fn default_per_eps() -> f64 {
    20.0
}
fn default_nodes() -> usize {
    400
}
fn default_t_corr() -> f64 {
    20.0
}
fn default_t_total() -> f64 {
    20_000.0
}
fn default_budget() -> BudgetLevel {
    BudgetLevel::Default
}
fn one() -> usize {
    1
}
fn yes() -> bool {
    true
}
fn quadrature() -> TableMethod {
    TableMethod::Quadrature
}

fn decreasing(name: &str, v: &[f64]) -> Result<()> {
    if v.is_empty() {
        bail!("{name} is empty");
    }
    if v.windows(2).any(|w| !(w[1] < w[0])) {
        bail!("{name} must be strictly decreasing, got {v:?}");
    }
    Ok(())
}

fn matrix(rows: &[Vec<f64>], name: &str) -> Result<DMatrix<f64>> {
    let n = rows.len();
    if n == 0 || rows.iter().any(|r| r.len() != n) {
        bail!("{name} must be a non-empty square matrix");
    }
    Ok(DMatrix::from_fn(n, n, |i, j| rows[i][j]))
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).context("config parse error")?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn need<'a, T>(&self, s: &'a Option<T>, name: &str) -> Result<&'a T> {
        s.as_ref()
            .with_context(|| format!("config parse error: kind {:?} needs a [{name}] section", self.kind))
    }

    pub fn validate(&self) -> Result<()> {
        let wrap = |r: Result<()>| r.context("config parse error");
        match self.kind {
            Kind::ValidateToy => {}
            _ => {
                self.need(&self.system, "system")?;
            }
        }
        match self.kind {
            Kind::Simulate => {
                self.need(&self.paths, "paths")?;
            }
            Kind::ManifoldGap => {
                let m = self.need(&self.manifold, "manifold")?;
                wrap(decreasing("manifold.eps_list", &m.eps_list))?;
            }
            Kind::AverageSweep | Kind::IntermediateSweep => {
                let a = self.need(&self.averaging, "averaging")?;
                wrap(decreasing("averaging.eps_list", &a.eps_list))?;
                if let Replicas::PerEps(v) = &a.n_replicas {
                    if v.len() != a.eps_list.len() {
                        return wrap(Err(anyhow::anyhow!("averaging.n_replicas must have one entry per eps")));
                    }
                }
            }
            Kind::SigmaTable => {
                let f = self.need(&self.fluctuation, "fluctuation")?;
                if f.grid.is_none() {
                    bail!("config parse error: sigma_table needs fluctuation.grid");
                }
            }
            Kind::MartingaleCheck => {
                let f = self.need(&self.fluctuation, "fluctuation")?;
                if f.grid.is_none() || f.x0.is_none() || f.n_replicas.is_none() {
                    bail!("config parse error: martingale_check needs fluctuation.grid, x0 and n_replicas");
                }
            }
            Kind::ValidateToy => {}
        }
        Ok(())
    }

    pub fn build_system(&self) -> Result<SlowFastSystem> {
        let s = self.need(&self.system, "system")?;
        let sys = match (&s.builtin, &s.nonlinearity) {
            (Some(name), None) if name == "toy" => toy_system(s.sigma, s.eps)?,
            (Some(name), None) => bail!("unknown builtin system `{name}` (known: toy)"),
            (None, Some(name)) => {
                let a = matrix(s.a.as_deref().context("system.a is required with system.nonlinearity")?, "system.a")?;
                let b = matrix(s.b.as_deref().context("system.b is required with system.nonlinearity")?, "system.b")?;
                let (f, g) = NonlinearityRegistry::builtin().build(name, a.nrows(), b.nrows())?;
                let sys = SlowFastSystem::new(name.clone(), a, b, f, g, s.sigma, s.eps)?;
                if name == "linear_test" {
                    sys.with_lipschitz(0.0, 0.0)
                } else {
                    sys
                }
            }
            _ => bail!("system needs exactly one of `builtin` or `nonlinearity`"),
        };
        Ok(match s.lipschitz {
            Some([lf, lg]) => sys.with_lipschitz(lf, lg),
            None => sys,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SWEEP: &str = r#"
kind = "average_sweep"
seed = 3
output_dir = "out"

[system]
builtin = "toy"
sigma = 0.1
eps = 0.01

[averaging]
x0 = [0.05]
t_end = 1.0
eps_list = [0.1, 0.01, 0.001]
n_replicas = 100
grid = [0.03, 0.08, 11]
"#;

    #[test]
    fn parses_a_sweep() {
        let c = ExperimentConfig::parse(SWEEP).unwrap();
        assert_eq!(c.kind, Kind::AverageSweep);
        assert_eq!(c.averaging.unwrap().n_replicas, Replicas::Same(100));
    }

    #[test]
    fn rejects_unknown_keys_and_increasing_eps() {
        let typo = SWEEP.replace("t_end = 1.0", "t_ned = 1.0");
        let e = format!("{:#}", ExperimentConfig::parse(&typo).unwrap_err());
        assert!(e.contains("t_ned"), "{e}");
        let up = SWEEP.replace("[0.1, 0.01, 0.001]", "[0.001, 0.01, 0.1]");
        let e = format!("{:#}", ExperimentConfig::parse(&up).unwrap_err());
        assert!(e.contains("strictly decreasing"), "{e}");
    }

    #[test]
    fn missing_section_is_reported() {
        let e = ExperimentConfig::parse("kind = \"simulate\"\nseed = 1\noutput_dir = \"o\"\n[system]\nbuiltin = \"toy\"\nsigma = 0.1\neps = 0.1\n")
            .unwrap_err();
        assert!(format!("{e:#}").contains("[paths]"));
    }

    #[test]
    fn linear_system_from_matrices() {
        let text = "kind = \"simulate\"\nseed = 1\noutput_dir = \"o\"\n[system]\nnonlinearity = \"linear_test\"\na = [[0.0]]\nb = [[-2.0]]\nsigma = 1.0\neps = 0.1\n[paths]\nx0 = [1.0]\nt_end = 1.0\n";
        let c = ExperimentConfig::parse(text).unwrap();
        let s = c.build_system().unwrap();
        assert_eq!(s.b[(0, 0)], -2.0);
        assert_eq!(s.lipschitz, Some((0.0, 0.0)));
    }
}
