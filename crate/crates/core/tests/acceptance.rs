//! Acceptance suite. Each test prints one `PASS`/`FAIL` line for its
//! criterion; run with `--nocapture` to see them.
//!
//! The toy checklist at the default budget is computed once and shared by
//! criteria 1-4, 6 and the toy half of 7.

use std::sync::OnceLock;

use slowfast::benchmark::{closed_forms, validate_toy, Budget, BudgetLevel, ValidationReport};
use slowfast::manifold::{attraction_test, manifold_gap, AttractionConfig};
use slowfast::parallel::with_threads;
use slowfast::paths::{ou_exact_step, stationary_covariance, stationary_covariance_scaled, OuStepper};
use slowfast::stats::batch_means;
use slowfast::systems::linear_test_system;
use slowfast::{DMatrix, NoiseStream};

const SEED: u64 = 20240501;

fn default_report() -> &'static ValidationReport {
    static R: OnceLock<ValidationReport> = OnceLock::new();
    R.get_or_init(|| validate_toy(&Budget::for_level(BudgetLevel::Default), SEED).expect("validate_toy runs"))
}

fn verdict(n: u32, title: &str, ok: bool, detail: &str) {
    println!("criterion {n} {title}: {} ({detail})", if ok { "PASS" } else { "FAIL" });
}

fn item_line(r: &ValidationReport, name: &str) -> (bool, String) {
    let i = r.item(name).unwrap_or_else(|| panic!("missing item {name}"));
    let est = i.estimate.map_or("none".into(), |v| format!("{v:.4e}"));
    let mut s = format!("{name} = {est}, target {:.4e} +- {:.3e}", i.target, i.tolerance);
    if let Some(e) = &i.error {
        s += &format!(", error {e}");
    }
    (i.pass && !i.skipped, s)
}

fn combine(r: &ValidationReport, names: &[&str]) -> (bool, String) {
    let parts: Vec<(bool, String)> = names.iter().map(|n| item_line(r, n)).collect();
    (parts.iter().all(|p| p.0), parts.iter().map(|p| p.1.as_str()).collect::<Vec<_>>().join("; "))
}

#[test]
fn criterion_1_averaging_rate() {
    let r = default_report();
    let enough = r.budget.sweep_replicas.iter().all(|&n| n >= 10_000);
    let (ok, s) = combine(r, &["averaging_rate"]);
    let ok = ok && enough;
    verdict(1, "averaging rate in [0.35, 0.65]", ok, &format!("{s}; replicas {:?}", r.budget.sweep_replicas));
    assert!(ok);
}

#[test]
fn criterion_2_intermediate_rate_and_ordering() {
    let r = default_report();
    let (ok, s) = combine(r, &["intermediate_rate", "intermediate_below_averaged"]);
    verdict(2, "intermediate weak rate in [0.7, 1.3] and below averaged", ok, &s);
    assert!(ok);
}

#[test]
fn criterion_3_manifold_gap() {
    let r = default_report();
    let (slope_ok, s) = combine(r, &["manifold_gap_slope"]);
    let lin = linear_test_system(DMatrix::from_element(1, 1, 0.0), DMatrix::from_element(1, 1, -1.0), 0.1, 0.1).unwrap();
    let eps = slowfast::benchmark::sweep_eps();
    let z = manifold_gap(&lin, &[0.05], &eps, 8, SEED).unwrap();
    let ok = slope_ok && z.exact_zero;
    verdict(3, "manifold gap slope in [0.8, 1.2], exact zero for g = 0", ok, &format!("{s}; g=0 exact_zero {}", z.exact_zero));
    assert!(ok);
}

#[test]
fn criterion_4_closed_forms() {
    let r = default_report();
    let cf = closed_forms(0.05, 0.1);
    assert!((cf.fbar - 3.75e-4).abs() < 1e-15 && (cf.sigma - 2.925e-5).abs() < 1e-17 && (cf.ybar_mean + 0.0075).abs() < 1e-15);
    let (ok, s) = combine(
        r,
        &[
            "fbar_time_average_x0.05",
            "fbar_ensemble_x0.05",
            "fbar_quadrature_x0.05",
            "sigma_green_kubo_x0.05",
            "stationary_fast_mean",
        ],
    );
    verdict(4, "closed forms at x = 0.05", ok, &s);
    assert!(ok);
}

fn empirical_covariance_check(b: &DMatrix<f64>, sigma: f64, eps: f64, dt: f64, steps: usize, seed: u64) -> (bool, String) {
    let m = b.nrows();
    let st = OuStepper::new(b, sigma, eps, dt).unwrap();
    let q = stationary_covariance(b, sigma).unwrap();
    let noise = NoiseStream::new(seed, 0, m, dt);
    let l = slowfast::linalg::psd_sqrt(&q, f64::INFINITY).unwrap();
    let mut z = vec![0.0; m];
    noise.standard_normal(-1, &mut z);
    let mut y: Vec<f64> = (0..m).map(|i| (0..m).map(|j| l[(i, j)] * z[j]).sum()).collect();
    let mut scratch = vec![0.0; m];
    let mut series = vec![Vec::with_capacity(steps); m * (m + 1) / 2];
    for k in 0..steps {
        noise.standard_normal(k as i64, &mut z);
        st.step(&mut y, &z, &mut scratch);
        let mut c = 0;
        for i in 0..m {
            for j in i..m {
                series[c].push(y[i] * y[j]);
                c += 1;
            }
        }
    }
    let mut ok = true;
    let mut parts = Vec::new();
    let mut c = 0;
    for i in 0..m {
        for j in i..m {
            let (mean, se) = batch_means(&series[c], 100);
            let e = (mean - q[(i, j)]).abs();
            ok &= e <= 3.0 * se;
            parts.push(format!("Q{i}{j} {mean:.5} vs {:.5} ({:.2} SE)", q[(i, j)], e / se));
            c += 1;
        }
    }
    (ok, parts.join(", "))
}

#[test]
fn criterion_5_ou_exactness() {
    // the scalar case and a non-normal 2x2 case, each over 10^6 steps
    let (ok1, s1) = empirical_covariance_check(&DMatrix::from_element(1, 1, -1.0), 1.0, 1.0, 0.1, 1_000_000, SEED);
    let b2 = DMatrix::from_row_slice(2, 2, &[-1.0, 0.5, 0.0, -2.0]);
    let (ok2, s2) = empirical_covariance_check(&b2, 0.7, 0.05, 0.005, 1_000_000, SEED + 1);

    // the convenience step agrees with the stepper
    let dw = [0.03, -0.02];
    let a = ou_exact_step(&b2, 0.7, 0.05, &[0.1, 0.2], &dw, 0.005).unwrap();
    let st = OuStepper::new(&b2, 0.7, 0.05, 0.005).unwrap();
    let mut y = [0.1, 0.2];
    let z: Vec<f64> = dw.iter().map(|w| w / 0.005f64.sqrt()).collect();
    st.step(&mut y, &z, &mut [0.0; 2]);
    let same_step = a.iter().zip(&y).all(|(p, q)| (p - q).abs() <= 1e-15);

    let q1 = stationary_covariance_scaled(&b2, 0.7, 1.0).unwrap();
    let mut rel = 0.0f64;
    for eps in [0.5, 0.1, 1e-2, 1e-3, 1e-4] {
        let q = stationary_covariance_scaled(&b2, 0.7, eps).unwrap();
        rel = rel.max((&q - &q1).norm() / q1.norm());
    }
    let invariant = rel <= 1e-12;
    let ok = ok1 && ok2 && same_step && invariant;
    verdict(
        5,
        "OU exactness",
        ok,
        &format!("scalar: {s1}; 2x2: {s2}; Q(inf) max relative spread over eps {rel:.2e}"),
    );
    assert!(ok);
}

#[test]
fn criterion_6_martingale() {
    let r = default_report();
    let (ok, s) = combine(r, &["martingale_residuals", "martingale_quadratic_variation"]);
    verdict(6, "martingale residuals and quadratic variation", ok, &s);
    assert!(ok);
}

#[test]
fn criterion_7_attraction() {
    let r = default_report();
    let (toy_ok, s) = combine(r, &["attraction_rate_ratio"]);
    let eps = 1e-2;
    let lin = linear_test_system(DMatrix::from_element(1, 1, 0.0), DMatrix::from_element(1, 1, -2.0), 0.5, eps).unwrap();
    let cfg = AttractionConfig::new(vec![0.3], vec![0.1], 4, SEED);
    let d = attraction_test(&lin, &cfg).unwrap();
    let rate = d.rate.unwrap();
    let exact = 2.0 / eps;
    let lin_ok = ((rate - exact) / exact).abs() <= 0.05;
    let ok = toy_ok && lin_ok;
    verdict(7, "attraction", ok, &format!("{s}; linear rate {rate:.4} vs |beta|/eps = {exact}"));
    assert!(ok);
}

#[test]
fn criterion_8_determinism() {
    let b = Budget::for_level(BudgetLevel::Small);
    let first = validate_toy(&b, SEED).unwrap().to_json();
    let second = validate_toy(&b, SEED).unwrap().to_json();
    let one = with_threads(1, || validate_toy(&b, SEED).unwrap().to_json());
    let three = with_threads(3, || validate_toy(&b, SEED).unwrap().to_json());
    let ok = first == second && one == three && first == one;
    verdict(
        8,
        "determinism",
        ok,
        &format!(
            "repeat identical {}, 1 vs 3 threads identical {}, {} bytes",
            first == second,
            one == three,
            first.len()
        ),
    );
    assert!(ok);
}
