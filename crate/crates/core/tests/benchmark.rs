use std::collections::BTreeSet;

use slowfast::benchmark::{closed_forms, normal_form_simulate, toy_system, validate_toy, Budget, BudgetLevel, ValidationReport};
use slowfast::parallel::par_map;
use slowfast::stationary::quadrature_fbar;
use slowfast::stats::mean_se;
use slowfast::systems::{estimate_lipschitz, DomainBox};
use slowfast::NoiseStream;

#[test]
fn toy_lipschitz_estimate_on_the_inner_ball() {
    let t = slowfast::benchmark::ToyModel::default();
    // radial projection onto |z| <= 1/4 is 1-Lipschitz, so the ratio stays below sup |grad f| = 1/4
    let f = |p: &[f64]| {
        let r = p[0].hypot(p[1]);
        let s = if r > 0.25 { 0.25 / r } else { 1.0 };
        vec![t.f(p[0] * s, p[1] * s)]
    };
    let l = estimate_lipschitz(&f, &DomainBox::cube(2, 0.25), 4096, 3).unwrap();
    assert!((0.2..=0.25 + 1e-12).contains(&l), "{l}");
}

#[test]
fn quadrature_drift_tracks_the_closed_form_near_zero() {
    let sys = toy_system(0.1, 1e-2).unwrap();
    for x in [0.01, 0.03, 0.05] {
        let (v, _) = quadrature_fbar(&sys, &[x], 400).unwrap();
        let cf = closed_forms(x, 0.1).fbar;
        // the neglected terms are O(x^3) and O(sigma^4 x)
        assert!((v[0] - cf).abs() <= 0.35 * x * x * x + 15.0 * 1e-4 * x, "x = {x}: {} vs {cf}", v[0]);
    }
}

#[test]
fn normal_form_mean_follows_the_averaged_drift() {
    let eps = 1e-2;
    let ends: Vec<f64> = par_map(2000, |r| {
        let s = NoiseStream::new(8, r as u64, 1, 1e-3);
        normal_form_simulate(0.1, eps, 0.05, 1.0, 1e-3, &s).unwrap().last_slow()[0]
    });
    let det = normal_form_simulate(0.1, 0.0, 0.05, 1.0, 1e-3, &NoiseStream::new(8, 0, 1, 1e-3)).unwrap();
    let (m, se) = mean_se(&ends);
    // the Ito correction of the multiplicative noise is O(eps sigma^2 x)
    assert!((m - det.last_slow()[0]).abs() <= 3.0 * se + 2.0 * eps * 0.1 * 0.1 * 0.05, "{m} +- {se} vs {}", det.last_slow()[0]);
    assert!(se > 0.0);
}

fn small() -> ValidationReport {
    validate_toy(&Budget::for_level(BudgetLevel::Small), 7).unwrap()
}

#[test]
fn small_budget_report_is_complete_and_consistent() {
    let r = small();
    assert_eq!(r.items.len(), 18);
    let names: BTreeSet<&str> = r.items.iter().map(|i| i.name.as_str()).collect();
    assert_eq!(names.len(), 18);
    assert_eq!(r.n_skipped, 0);
    assert_eq!(r.n_failed, r.items.iter().filter(|i| !i.pass).count());
    assert_eq!(r.all_pass, r.n_failed == 0);
    for i in &r.items {
        assert!(i.error.is_none(), "{}: {:?}", i.name, i.error);
        let (e, m) = (i.estimate.unwrap(), i.margin.unwrap());
        assert!(((e - i.target).abs() / i.tolerance - m).abs() <= 1e-12 * m.max(1.0));
        if i.name != "intermediate_below_averaged" {
            assert_eq!(i.pass, m <= 1.0, "{}", i.name);
        }
    }
    let back: ValidationReport = serde_json::from_str(&r.to_json()).unwrap();
    assert_eq!(back.to_json(), r.to_json());
    for n in ["fbar_odd_symmetry", "fbar_quadrature_x0.05", "stationary_fast_mean", "manifold_gap_slope"] {
        assert!(r.item(n).unwrap().pass, "{n}");
    }
}
