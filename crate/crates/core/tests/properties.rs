//! Property tests for the structural invariants.

use proptest::prelude::*;
use slowfast::benchmark::{toy_system, Blend, ToyModel};
use slowfast::linalg::{expm, lyapunov, psd_sqrt};
use slowfast::parallel::{pairwise_sum, par_blocks, par_map};
use slowfast::paths::{ou_exact_step, ou_transition_covariance, Branch};
use slowfast::report::fit_rate;
use slowfast::stationary::{quadrature_fbar, quadrature_sigma};
use slowfast::systems::{
    check_completeness_gap, check_h1, check_h2, estimate_lipschitz, gap_objective, linear_test_system, AssumptionReport,
    DomainBox,
};
use slowfast::{ConvergenceReport, ConvergenceRow, DMatrix, NoiseStream, SamplePath};

fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    m.clone().svd(false, false).singular_values.max()
}

fn mat2(v: [f64; 4]) -> DMatrix<f64> {
    DMatrix::from_row_slice(2, 2, &v)
}

fn stable2(v: [f64; 4], shift: f64) -> DMatrix<f64> {
    let m = mat2(v);
    let mu = slowfast::linalg::log_norm(&m);
    m - DMatrix::identity(2, 2) * (mu + shift)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn increments_regenerate_bit_identically(seed in any::<u64>(), replica in 0u64..1000, k in -1_000_000i64..1_000_000) {
        let a = NoiseStream::new(seed, replica, 3, 0.01);
        let b = NoiseStream::new(seed, replica, 3, 0.01);
        let (mut u, mut v) = ([0.0; 3], [0.0; 3]);
        a.increment(k, &mut u);
        b.increment(k, &mut v);
        prop_assert_eq!(u.map(f64::to_bits), v.map(f64::to_bits));
        let mut w = [0.0; 3];
        a.with_branch(Branch::Auxiliary(1), 3).increment(k, &mut w);
        prop_assert_ne!(u, w);
    }

    #[test]
    fn shift_group_law(seed in any::<u64>(), a in -5000i64..5000, b in -5000i64..5000, k in -100i64..100) {
        let s = NoiseStream::new(seed, 0, 2, 0.001);
        let (mut u, mut v, mut w) = ([0.0; 2], [0.0; 2], [0.0; 2]);
        s.shift_steps(a).shift_steps(b).increment(k, &mut u);
        s.shift_steps(a + b).increment(k, &mut v);
        s.increment(k + a + b, &mut w);
        prop_assert_eq!(u, v);
        prop_assert_eq!(v, w);
        let t = s.shift(a as f64 * 0.001).unwrap();
        t.increment(k, &mut u);
        s.increment(k + a, &mut v);
        prop_assert_eq!(u, v);
    }

    // slow parts with mu(-A) <= 0, so that the clamp at alpha = 0 is inactive
    #[test]
    fn h1_constants_bound_the_semigroups(a in prop::array::uniform4(-2.0f64..2.0), b in prop::array::uniform4(-2.0f64..2.0),
                                         grow in 0.0f64..1.0, shift in 0.05f64..2.0, t in 0.0f64..10.0) {
        let am = -stable2(a.map(|v| -v), grow);
        let sys = linear_test_system(am, stable2(b, shift), 1.0, 0.1).unwrap();
        let (alpha, beta) = check_h1(&sys).unwrap();
        prop_assert!(alpha >= 0.0 && beta < 0.0);
        let back = spectral_norm(&expm(&(&sys.a * -t)));
        prop_assert!(back <= (-alpha * t).exp() * (1.0 + 1e-8) + 1e-12, "{back} vs {}", (-alpha * t).exp());
        let fwd = spectral_norm(&expm(&(&sys.b * t)));
        prop_assert!(fwd <= (beta * t).exp() * (1.0 + 1e-8) + 1e-300, "{fwd} vs {}", (beta * t).exp());
    }

    #[test]
    fn h2_is_monotone_in_the_lipschitz_constants(alpha in 0.0f64..2.0, beta in -3.0f64..-0.05, eps in 0.001f64..1.0,
                                                  lf in 0.0f64..3.0, lg in 0.0f64..3.0, kf in 0.0f64..1.0, kg in 0.0f64..1.0) {
        let big = AssumptionReport::new(alpha, beta, lf, lg);
        let small = AssumptionReport::new(alpha, beta, lf * kf, lg * kg);
        if let (Ok((true, _)), Ok((h, _))) = (check_h2(&big, eps), check_h2(&small, eps)) {
            prop_assert!(h);
        }
    }

    #[test]
    fn gap_closed_form_matches_grid_minimum(alpha in 0.0f64..2.0, beta in -3.0f64..-0.05, eps in 0.001f64..1.0,
                                            lf in 0.001f64..3.0, lg in 0.001f64..3.0) {
        let r = AssumptionReport::new(alpha, beta, lf, lg);
        let g = check_completeness_gap(&r, eps);
        let grid_min = (0..=200_000)
            .map(|i| 10f64.powf(-8.0 + 16.0 * i as f64 / 200_000.0))
            .map(|d| gap_objective(&r, eps, d))
            .fold(f64::INFINITY, f64::min);
        prop_assert!(g.objective <= grid_min + 1e-6);
        prop_assert!(grid_min - g.objective <= 1e-6, "closed {} grid {grid_min}", g.objective);
    }

    #[test]
    fn lipschitz_estimate_grows_with_samples(seed in any::<u64>(), n in 2usize..200, extra in 0usize..200) {
        let f = |p: &[f64]| vec![(3.0 * p[0]).sin() * p[1], p[0] * p[0]];
        let dom = DomainBox::cube(2, 1.0);
        let a = estimate_lipschitz(&f, &dom, n, seed).unwrap();
        let b = estimate_lipschitz(&f, &dom, n + extra, seed).unwrap();
        prop_assert!(a <= b);
    }

    #[test]
    fn ou_step_mean_and_covariance_are_exact(b in prop::array::uniform4(-2.0f64..2.0), shift in 0.05f64..2.0,
                                             sigma in 0.1f64..2.0, eps in 0.01f64..1.0, tau in 0.005f64..20.0,
                                             y in prop::array::uniform2(-1.0f64..1.0)) {
        let bm = stable2(b, shift);
        let dt = tau * eps;
        let mean = ou_exact_step(&bm, sigma, eps, &y, &[0.0, 0.0], dt).unwrap();
        let e = expm(&(&bm * (dt / eps)));
        let want = &e * DMatrix::from_column_slice(2, 1, &y);
        for i in 0..2 {
            prop_assert!((mean[i] - want[i]).abs() <= 1e-12 * (1.0 + want[i].abs()));
        }
        // Simpson quadrature of (sigma^2/eps) int_0^dt e^{Bs/eps} e^{B^T s/eps} ds
        let q = ou_transition_covariance(&bm, sigma, eps, dt).unwrap();
        let rate = 2.0 * bm.amax() * tau;
        let n = 2 * ((rate / 0.004).ceil() as usize).max(1000);
        let h = dt / n as f64;
        let step = expm(&(&bm * (h / eps)));
        let mut ek = DMatrix::<f64>::identity(2, 2);
        let mut acc = DMatrix::<f64>::zeros(2, 2);
        for k in 0..=n {
            let w = if k == 0 || k == n { 1.0 } else if k % 2 == 1 { 4.0 } else { 2.0 };
            acc += &ek * ek.transpose() * w;
            ek = &step * ek;
        }
        acc *= sigma * sigma / eps * h / 3.0;
        prop_assert!((&acc - &q).norm() <= 1e-10 * q.norm().max(1e-300), "{}", (&acc - &q).norm() / q.norm());
    }

    #[test]
    fn lyapunov_residual_is_small(b in prop::array::uniform4(-2.0f64..2.0), shift in 0.05f64..2.0, c in 0.01f64..4.0) {
        let bm = stable2(b, shift);
        let q = lyapunov(&bm, c).unwrap();
        let r = &bm * &q + &q * bm.transpose() + DMatrix::identity(2, 2) * c;
        prop_assert!(r.amax() <= 1e-8 * c);
        prop_assert!(slowfast::linalg::min_eigenvalue(&q) > 0.0);
    }

    #[test]
    fn psd_sqrt_squares_back(v in prop::array::uniform9(-1.0f64..1.0)) {
        let m = DMatrix::from_row_slice(3, 3, &v);
        let s = &m * m.transpose();
        let r = psd_sqrt(&s, 1e-12).unwrap();
        prop_assert!((&r * &r - &s).amax() <= 1e-10);
        prop_assert!((&r - r.transpose()).amax() == 0.0);
    }

    #[test]
    fn toy_symmetry_and_exact_region(x in -0.5f64..0.5, y in -0.5f64..0.5) {
        let t = ToyModel::default();
        prop_assert_eq!(t.f(-x, y), -t.f(x, y));
        prop_assert_eq!(t.g(-x, y), t.g(x, y));
        if x * x + y * y < 1.0 / 16.0 {
            prop_assert_eq!(t.f(x, y), -x * y);
            prop_assert_eq!(t.g(x, y), x * x - 2.0 * y * y);
        }
        if x * x + y * y >= 1.0 / 8.0 {
            prop_assert_eq!((t.f(x, y), t.g(x, y)), (0.0, 0.0));
        }
    }

    #[test]
    fn blend_is_c1_across_both_circles(theta in 0.0f64..std::f64::consts::TAU, which in 0usize..2) {
        let t = ToyModel::default();
        let bl = Blend::default();
        let r2 = if which == 0 { bl.inner_r2 } else { bl.outer_r2 };
        let width = bl.outer_r2 - bl.inner_r2;
        let h = 1e-7;
        let at = |r2: f64| {
            let r = r2.sqrt();
            let (x, y) = (r * theta.cos(), r * theta.sin());
            (t.f(x, y), t.g(x, y))
        };
        let (lo, mid, hi) = (at(r2 - h), at(r2), at(r2 + h));
        // one-sided slopes in r^2 agree, so there is no jump in value or slope
        let dl = ((mid.0 - lo.0) / h, (mid.1 - lo.1) / h);
        let dr = ((hi.0 - mid.0) / h, (hi.1 - mid.1) / h);
        let tol = 1e-6 / width;
        prop_assert!((dl.0 - dr.0).abs() <= tol && (dl.1 - dr.1).abs() <= tol, "{dl:?} {dr:?}");
    }

    #[test]
    fn rate_fit_recovers_a_power_law(c in 0.01f64..100.0, p in 0.1f64..2.0, n in 3usize..8) {
        let rows: Vec<ConvergenceRow> = (0..n)
            .map(|i| {
                let eps = 10f64.powf(-0.5 * i as f64 - 0.5);
                ConvergenceRow { eps, error: c * eps.powf(p), stderr: 0.0 }
            })
            .collect();
        let fit = fit_rate(&rows).unwrap();
        prop_assert!((fit.slope - p).abs() <= 1e-9);
        prop_assert!((fit.intercept - c.log10()).abs() <= 1e-9);
    }

    #[test]
    fn report_rows_are_sorted_by_decreasing_eps(v in prop::collection::vec((1e-4f64..1.0, 1e-6f64..1.0), 0..10)) {
        let rows: Vec<ConvergenceRow> = v.iter().map(|&(eps, error)| ConvergenceRow { eps, error, stderr: 0.1 * error }).collect();
        let r = ConvergenceReport::from_rows("p", rows, 10, 1);
        prop_assert!(r.rows.windows(2).all(|w| w[0].eps >= w[1].eps));
        prop_assert_eq!(r.rows.len(), v.len());
    }

    #[test]
    fn block_partition_does_not_change_results(n in 0usize..500, block in 1usize..100) {
        let f = |i: usize| ((i as f64) * 0.37).sin();
        let a: Vec<f64> = par_blocks(n, block, |r| r.map(f).collect::<Vec<_>>()).into_iter().flatten().collect();
        let b = par_map(n, f);
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(pairwise_sum(&a).to_bits(), pairwise_sum(&b).to_bits());
    }

    #[test]
    fn path_interpolation_hits_nodes_and_is_linear(vals in prop::collection::vec(-10.0f64..10.0, 2..20), frac in 0.0f64..1.0) {
        let mut p = SamplePath::new(0.5, 0.25, 1, 1);
        for v in &vals {
            p.push(&[*v], &[2.0 * v]);
        }
        for (i, v) in vals.iter().enumerate() {
            let (x, y) = p.interpolate(p.time(i)).unwrap();
            prop_assert!((x[0] - v).abs() <= 1e-12 && (y[0] - 2.0 * v).abs() <= 1e-12);
        }
        let j = ((vals.len() - 1) as f64 * frac).floor() as usize;
        let j = j.min(vals.len() - 2);
        let t = p.time(j) + 0.25 * 0.5;
        let (x, _) = p.interpolate(t).unwrap();
        prop_assert!((x[0] - 0.5 * (vals[j] + vals[j + 1])).abs() <= 1e-12);
        prop_assert!(p.interpolate(p.t_end() + 0.1).is_err() && p.interpolate(0.4).is_err());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn quadrature_fbar_is_odd_and_sigma_even(x in 0.0f64..0.15) {
        let s = toy_system(0.1, 0.01).unwrap();
        let (a, _) = quadrature_fbar(&s, &[x], 200).unwrap();
        let (b, _) = quadrature_fbar(&s, &[-x], 200).unwrap();
        prop_assert!((a[0] + b[0]).abs() <= 1e-15);
        let sa = quadrature_sigma(&s, &[x], 200).unwrap();
        let sb = quadrature_sigma(&s, &[-x], 200).unwrap();
        prop_assert!((sa[(0, 0)] - sb[(0, 0)]).abs() <= 1e-15 * sa[(0, 0)].abs().max(1e-300));
    }
}
