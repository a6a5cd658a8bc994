//! Experiment execution and output files.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde_json::json;
use slowfast::averaging::{fast_mixing_time, stationary_samples, FbarEstimator, Grid};
use slowfast::benchmark::{validate_toy, Budget, BudgetLevel, ValidationReport};
use slowfast::fluctuation::{martingale_residual, MartingaleConfig, SigmaMethod};
use slowfast::manifold::manifold_gap;
use slowfast::paths::{integrate_slowfast, IntegratorOptions};
use slowfast::sweep::{run_sweep, SweepConfig, Tables};
use slowfast::{ConvergenceReport, NoiseStream, SlowFastSystem};

use crate::config::{ExperimentConfig, Kind, Replicas, TableMethod};

pub const VERSION: &str = env!("SLOWFAST_VERSION");

/// Result of one experiment: files written and whether its checks passed.
pub struct Outcome {
    pub outputs: Vec<String>,
    pub passed: bool,
    pub summary: String,
}

struct Out<'a> {
    dir: &'a Path,
    files: Vec<String>,
}

impl Out<'_> {
    fn write(&mut self, name: &str, text: &str) -> Result<()> {
        let p = self.dir.join(name);
        std::fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?;
        self.files.push(name.into());
        Ok(())
    }

    fn json(&mut self, name: &str, v: &impl serde::Serialize) -> Result<()> {
        self.write(name, &(serde_json::to_string_pretty(v)? + "\n"))
    }

    fn report(&mut self, r: &ConvergenceReport, stem: &str) -> Result<()> {
        r.write(self.dir, stem)?;
        for ext in ["csv", "json", "dat"] {
            self.files.push(format!("{stem}.{ext}"));
        }
        Ok(())
    }
}

fn options(per_eps: f64) -> IntegratorOptions {
    IntegratorOptions::heun(per_eps)
}

fn grid(g: (f64, f64, usize)) -> Grid {
    Grid::uniform(g.0, g.1, g.2)
}

fn tables(sys: &SlowFastSystem, g: Grid, method: TableMethod, nodes: usize, t_corr: f64, t_total: f64, seed: u64) -> Result<Tables> {
    Ok(match method {
        TableMethod::Quadrature => Tables::quadrature(sys, g, nodes)?,
        TableMethod::MonteCarlo => {
            let mix = fast_mixing_time(sys);
            let fast = mix / sys.eps;
            let t_corr = t_corr.max(20.0 * fast);
            Tables::estimated(
                sys,
                g,
                FbarEstimator::TimeAverage {
                    t_avg: 1e4 * mix,
                    steps_per_eps: 20.0,
                },
                SigmaMethod::GreenKubo {
                    t_corr,
                    t_total: t_total.max(50.0 * t_corr),
                },
                1.0 / slowfast::fluctuation::FAST_STEP,
                seed,
            )?
        }
    })
}

fn slope_line(r: &ConvergenceReport) -> String {
    match (r.slope, r.slope_ci) {
        (Some(s), Some((a, b))) => format!("{}: slope {s:.4} (95% CI {a:.4} .. {b:.4})", r.label),
        _ if r.exact_zero => format!("{}: all errors exactly zero", r.label),
        _ => format!("{}: no slope", r.label),
    }
}

pub fn validation_lines(r: &ValidationReport) -> String {
    let mut s = String::new();
    for i in &r.items {
        let status = if i.skipped {
            "SKIP"
        } else if i.pass {
            "PASS"
        } else {
            "FAIL"
        };
        let est = i.estimate.map_or("-".to_string(), |v| format!("{v:.6e}"));
        if i.skipped {
            let _ = write!(s, "{status} {}", i.name);
        } else {
            let _ = write!(s, "{status} {:34} estimate {est:>14} target {:.6e} tol {:.3e}", i.name, i.target, i.tolerance);
        }
        if let Some(e) = &i.error {
            let _ = write!(s, " error: {e}");
        }
        s.push('\n');
    }
    let _ = writeln!(s, "{} failed, {} skipped, {} total", r.n_failed, r.n_skipped, r.items.len());
    s
}

/// Runs the toy checklist and writes `validation_report.json`.
pub fn run_validation(level: BudgetLevel, seed: u64, dir: &Path) -> Result<Outcome> {
    let report = validate_toy(&Budget::for_level(level), seed)?;
    let mut out = Out { dir, files: Vec::new() };
    out.write("validation_report.json", &(report.to_json() + "\n"))?;
    Ok(Outcome {
        outputs: out.files,
        passed: report.all_pass,
        summary: validation_lines(&report),
    })
}

pub fn run_experiment(cfg: &ExperimentConfig, dir: &Path) -> Result<Outcome> {
    let seed = cfg.seed;
    if cfg.kind == Kind::ValidateToy {
        let level = cfg.benchmark.as_ref().map_or(BudgetLevel::Default, |b| b.budget);
        return run_validation(level, seed, dir);
    }
    let sys = cfg.build_system()?;
    let mut out = Out { dir, files: Vec::new() };
    let mut passed = true;
    let mut summary = String::new();
    match cfg.kind {
        Kind::Simulate => {
            let p = cfg.paths.as_ref().unwrap();
            let opts = options(p.substeps_per_eps);
            let (_, h) = slowfast::paths::fast_substep(sys.eps, p.dt_slow, &opts);
            let y0s = match &p.y0 {
                Some(y) => vec![y.clone(); p.n_replicas],
                None => stationary_samples(&sys, &p.x0, p.n_replicas, seed)?,
            };
            let mut ends = String::from("replica");
            for i in 1..=sys.n() {
                let _ = write!(ends, ",x_{i}");
            }
            for i in 1..=sys.m() {
                let _ = write!(ends, ",y_{i}");
            }
            ends.push('\n');
            for (r, y0) in y0s.iter().enumerate() {
                let stream = NoiseStream::new(seed, r as u64, sys.m(), h);
                let path = integrate_slowfast(&sys, &p.x0, y0, p.t_end, p.dt_slow, &stream, &opts)?;
                if r == 0 {
                    out.write("path_0.csv", &path.to_csv())?;
                }
                let last = path.len() - 1;
                let vals: Vec<String> = path
                    .slow_at(last)
                    .iter()
                    .chain(path.fast_at(last))
                    .map(|v| format!("{v:.16e}"))
                    .collect();
                let _ = writeln!(ends, "{r},{}", vals.join(","));
            }
            out.write("endpoints.csv", &ends)?;
            let _ = writeln!(summary, "simulated {} replica(s) to T = {}", p.n_replicas, p.t_end);
        }
        Kind::ManifoldGap => {
            let m = cfg.manifold.as_ref().unwrap();
            let r = manifold_gap(&sys, &m.x, &m.eps_list, m.n_realizations, seed)?;
            out.report(&r, "manifold_gap")?;
            summary = slope_line(&r) + "\n";
        }
        Kind::AverageSweep | Kind::IntermediateSweep => {
            let a = cfg.averaging.as_ref().unwrap();
            let t = tables(&sys, grid(a.grid), a.tables, a.quadrature_nodes, 20.0, 20_000.0, seed)?;
            let reps = match &a.n_replicas {
                Replicas::Same(n) => vec![*n; a.eps_list.len()],
                Replicas::PerEps(v) => v.clone(),
            };
            let mut sc = SweepConfig::new(a.x0.clone(), a.t_end, a.eps_list.clone(), 0, seed).with_replicas(reps);
            sc.dt_slow = a.dt_slow;
            sc.options = options(a.substeps_per_eps);
            sc.control_variates = a.control_variates;
            let r = run_sweep(&sys, &sc, &t)?;
            out.report(&r.averaging_strong, "averaging_strong")?;
            out.report(&r.averaging_weak, "averaging_weak")?;
            out.report(&r.intermediate_weak, "intermediate_weak")?;
            out.json("sweep_cells.json", &r.cells)?;
            out.write("fbar_table.csv", &t.fbar.to_csv())?;
            out.write("sigma_table.csv", &t.diffusion.to_csv())?;
            let primary = if cfg.kind == Kind::AverageSweep {
                &r.averaging_strong
            } else {
                &r.intermediate_weak
            };
            if let Some((lo, hi)) = a.expected_slope {
                passed = primary.slope.is_some_and(|s| (lo..=hi).contains(&s));
            }
            if cfg.kind == Kind::IntermediateSweep {
                passed &= r.ordering_holds;
            }
            for rep in [&r.averaging_strong, &r.averaging_weak, &r.intermediate_weak] {
                summary += &(slope_line(rep) + "\n");
            }
            let _ = writeln!(summary, "intermediate below averaged at every eps: {}", r.ordering_holds);
        }
        Kind::SigmaTable => {
            let f = cfg.fluctuation.as_ref().unwrap();
            let t = tables(&sys, grid(f.grid.unwrap()), f.method, f.quadrature_nodes, f.t_corr, f.t_total, seed)?;
            out.write("sigma_table.csv", &t.diffusion.to_csv())?;
            out.json("sigma_table.json", &t.diffusion.metadata_json())?;
            out.write("fbar_table.csv", &t.fbar.to_csv())?;
            let _ = writeln!(summary, "tabulated Sigma at {} nodes", t.diffusion.sigma.n_nodes());
        }
        Kind::MartingaleCheck => {
            let f = cfg.fluctuation.as_ref().unwrap();
            let t = tables(&sys, grid(f.grid.unwrap()), f.method, f.quadrature_nodes, f.t_corr, f.t_total, seed)?;
            let mut mc = MartingaleConfig::new(f.x0.clone().unwrap(), f.n_replicas.unwrap(), seed);
            if let Some(te) = f.t_end {
                mc.t_end = te;
                mc.schedule = vec![(0.0, 0.5 * te), (0.25 * te, 0.75 * te), (0.5 * te, te)];
            }
            if let Some(n) = f.n_inner {
                mc.n_inner = n;
            }
            mc.pilot = mc.pilot.min(mc.n_replicas);
            let r = martingale_residual(&sys, &mc, &t.fbar, &t.diffusion)?;
            out.json("martingale.json", &r)?;
            passed = r.all_within;
            let _ = writeln!(
                summary,
                "residuals within 3 SE: {}; E[M_T^2]/E[int Sigma] = {:.4} +- {:.4}",
                r.all_within, r.qv_ratio, r.qv_ratio_se
            );
        }
        Kind::ValidateToy => unreachable!(),
    }
    Ok(Outcome {
        outputs: out.files,
        passed,
        summary,
    })
}

/// `manifest.json`: everything needed to rerun, plus the wall time.
pub fn write_manifest(dir: &Path, command: serde_json::Value, outcome: &Outcome, wall: f64) -> Result<PathBuf> {
    let m = json!({
        "version": VERSION,
        "command": command,
        "threads": slowfast::parallel::configured_threads(),
        "outputs": outcome.outputs,
        "passed": outcome.passed,
        "wall_time_s": wall,
    });
    let p = dir.join("manifest.json");
    std::fs::write(&p, serde_json::to_string_pretty(&m)? + "\n").with_context(|| format!("writing {}", p.display()))?;
    Ok(p)
}
