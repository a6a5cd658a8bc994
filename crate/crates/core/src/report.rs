//! Convergence reports, log-log rate fits and plot-data files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub eps: f64,
    pub error: f64,
    pub stderr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_se: f64,
    pub slope_ci: (f64, f64),
    pub weighted: bool,
}

/// Weighted least squares of `log10(error)` on `log10(eps)` with weights
/// `1/se_log^2`, `se_log = se / (error ln 10)`. Unweighted when any SE is zero.
/// The 95% interval uses the residual scale and Student-t with `n - 2` dof.
pub fn fit_rate(rows: &[ConvergenceRow]) -> Result<RateFit> {
    if rows.len() < 3 {
        return Err(Error::DegenerateFit(format!("need at least 3 rows, got {}", rows.len())));
    }
    if rows.iter().any(|r| !(r.error > 0.0) || !(r.eps > 0.0)) {
        return Err(Error::DegenerateFit("errors and eps must be positive".into()));
    }
    let ln10 = std::f64::consts::LN_10;
    let weighted = rows.iter().all(|r| r.stderr > 0.0 && r.stderr.is_finite());
    let x: Vec<f64> = rows.iter().map(|r| r.eps.log10()).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.error.log10()).collect();
    let w: Vec<f64> = rows
        .iter()
        .map(|r| {
            if weighted {
                let s = r.stderr / (r.error * ln10);
                1.0 / (s * s)
            } else {
                1.0
            }
        })
        .collect();
    let sw: f64 = w.iter().sum();
    let xm = w.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>() / sw;
    let ym = w.iter().zip(&y).map(|(a, b)| a * b).sum::<f64>() / sw;
    let sxx: f64 = (0..x.len()).map(|i| w[i] * (x[i] - xm).powi(2)).sum();
    if !(sxx > 1e-300) || x.iter().all(|v| (v - x[0]).abs() < 1e-15) {
        return Err(Error::DegenerateFit("all eps equal".into()));
    }
    let sxy: f64 = (0..x.len()).map(|i| w[i] * (x[i] - xm) * (y[i] - ym)).sum();
    let slope = sxy / sxx;
    let intercept = ym - slope * xm;
    let dof = (rows.len() - 2) as f64;
    let chi2: f64 = (0..x.len())
        .map(|i| w[i] * (y[i] - intercept - slope * x[i]).powi(2))
        .sum();
    let slope_se = (chi2 / dof / sxx).sqrt();
    let t = StudentsT::new(0.0, 1.0, dof)
        .map_err(|e| Error::DegenerateFit(e.to_string()))?
        .inverse_cdf(0.975);
    Ok(RateFit {
        slope,
        intercept,
        slope_se,
        slope_ci: (slope - t * slope_se, slope + t * slope_se),
        weighted,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceReport {
    pub label: String,
    /// Sorted by eps, descending.
    pub rows: Vec<ConvergenceRow>,
    pub slope: Option<f64>,
    pub intercept: Option<f64>,
    pub slope_ci: Option<(f64, f64)>,
    /// Every error is exactly zero; no rate is defined.
    pub exact_zero: bool,
    pub n_replicas: usize,
    pub seed: u64,
    #[serde(default)]
    pub diagnostics: BTreeMap<String, f64>,
}

impl ConvergenceReport {
    pub fn from_rows(label: impl Into<String>, mut rows: Vec<ConvergenceRow>, n_replicas: usize, seed: u64) -> Self {
        rows.sort_by(|a, b| b.eps.partial_cmp(&a.eps).unwrap_or(std::cmp::Ordering::Equal));
        let exact_zero = !rows.is_empty() && rows.iter().all(|r| r.error == 0.0);
        let fit = if exact_zero { None } else { fit_rate(&rows).ok() };
        ConvergenceReport {
            label: label.into(),
            rows,
            slope: fit.map(|f| f.slope),
            intercept: fit.map(|f| f.intercept),
            slope_ci: fit.map(|f| f.slope_ci),
            exact_zero,
            n_replicas,
            seed,
            diagnostics: BTreeMap::new(),
        }
    }

    pub fn empty(label: impl Into<String>) -> Self {
        Self::from_rows(label, Vec::new(), 0, 0)
    }

    pub fn errors(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.error).collect()
    }

    pub fn fitted(&self, eps: f64) -> Option<f64> {
        match (self.slope, self.intercept) {
            (Some(s), Some(c)) => Some(10f64.powf(c + s * eps.log10())),
            _ => None,
        }
    }

    /// `eps,error,stderr` at 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("eps,error,stderr\n");
        for r in &self.rows {
            let _ = writeln!(s, "{:.16e},{:.16e},{:.16e}", r.eps, r.error, r.stderr);
        }
        s
    }

    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "label": self.label,
            "slope": self.slope,
            "intercept": self.intercept,
            "slope_ci": self.slope_ci.map(|(a, b)| vec![a, b]),
            "exact_zero": self.exact_zero,
            "n_replicas": self.n_replicas,
            "seed": self.seed,
            "diagnostics": self.diagnostics,
        })
    }

    pub fn write(&self, dir: impl AsRef<Path>, stem: &str) -> Result<()> {
        let dir = dir.as_ref();
        let csv = dir.join(format!("{stem}.csv"));
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let json = dir.join(format!("{stem}.json"));
        let text = serde_json::to_string_pretty(&self.summary_json()).map_err(|e| Error::Parse(e.to_string()))?;
        std::fs::write(&json, text + "\n").map_err(|e| Error::io(&json, e))?;
        emit_plotdata(self, dir.join(format!("{stem}.dat")))
    }
}

/// Whitespace-separated data for gnuplot: `eps error stderr fitted`.
pub fn plotdata_string(report: &ConvergenceReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# {}", report.label);
    match (report.slope, report.intercept) {
        (Some(a), Some(b)) => {
            let _ = writeln!(s, "# fit: log10(error) = {b:.16e} + {a:.16e} * log10(eps)");
        }
        _ => {
            let _ = writeln!(s, "# fit: none");
        }
    }
    let _ = writeln!(s, "# columns: eps error stderr fitted");
    for r in &report.rows {
        let fitted = report.fitted(r.eps).unwrap_or(f64::NAN);
        let _ = writeln!(s, "{:.16e} {:.16e} {:.16e} {:.16e}", r.eps, r.error, r.stderr, fitted);
    }
    s
}

pub fn emit_plotdata(report: &ConvergenceReport, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path.as_ref(), plotdata_string(report)).map_err(|e| Error::io(path, e))
}

/// Parses the data lines of a plot-data file into `(row, fitted)` pairs.
pub fn parse_plotdata(text: &str) -> Result<Vec<(ConvergenceRow, f64)>> {
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let v: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Parse(format!("line {}: {e}", ln + 1)))?;
        if v.len() != 4 {
            return Err(Error::Parse(format!("line {}: expected 4 columns", ln + 1)));
        }
        out.push((
            ConvergenceRow {
                eps: v[0],
                error: v[1],
                stderr: v[2],
            },
            v[3],
        ));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(f: impl Fn(f64) -> f64) -> Vec<ConvergenceRow> {
        [1e-1, 10f64.powf(-1.5), 1e-2, 10f64.powf(-2.5)]
            .iter()
            .map(|&e| ConvergenceRow {
                eps: e,
                error: f(e),
                stderr: 0.0,
            })
            .collect()
    }

    #[test]
    fn exact_linear_rate() {
        let fit = fit_rate(&rows(|e| 3.0 * e)).unwrap();
        assert!((fit.slope - 1.0).abs() < 1e-12);
        assert!(fit.slope_ci.1 - fit.slope_ci.0 < 2e-9);
    }

    #[test]
    fn exact_sqrt_rate() {
        let fit = fit_rate(&rows(|e| 0.2 * e.sqrt())).unwrap();
        assert!((fit.slope - 0.5).abs() < 1e-12);
    }

    #[test]
    fn degenerate_inputs() {
        let same: Vec<_> = (0..3)
            .map(|_| ConvergenceRow {
                eps: 0.1,
                error: 1.0,
                stderr: 0.1,
            })
            .collect();
        assert!(matches!(fit_rate(&same), Err(Error::DegenerateFit(_))));
        assert!(fit_rate(&rows(|e| e)[..2]).is_err());
    }

    #[test]
    fn exact_zero_report() {
        let r = ConvergenceReport::from_rows("zero", rows(|_| 0.0), 10, 1);
        assert!(r.exact_zero);
        assert!(r.slope.is_none());
    }

    #[test]
    fn rows_sorted_descending() {
        let mut rs = rows(|e| e);
        rs.reverse();
        let r = ConvergenceReport::from_rows("x", rs, 1, 0);
        assert!(r.rows.windows(2).all(|w| w[0].eps > w[1].eps));
    }

    #[test]
    fn plotdata_round_trip_and_fitted_column() {
        let mut rs = rows(|e| 0.3 * e.powf(0.8));
        rs.iter_mut().for_each(|r| r.stderr = 0.05 * r.error);
        let rep = ConvergenceReport::from_rows("demo", rs, 100, 7);
        let parsed = parse_plotdata(&plotdata_string(&rep)).unwrap();
        assert_eq!(parsed.len(), rep.rows.len());
        for ((row, fitted), orig) in parsed.iter().zip(&rep.rows) {
            assert_eq!(row, orig);
            let want = 10f64.powf(rep.intercept.unwrap() + rep.slope.unwrap() * orig.eps.log10());
            assert!((fitted - want).abs() <= 1e-12 * want.abs());
        }
    }

    #[test]
    fn empty_report_is_header_only() {
        let s = plotdata_string(&ConvergenceReport::empty("nothing"));
        assert!(s.lines().all(|l| l.starts_with('#')));
        assert!(parse_plotdata(&s).unwrap().is_empty());
    }
}
