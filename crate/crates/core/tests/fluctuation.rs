use slowfast::averaging::{stationary_samples, tabulate_fbar, FbarEstimator, FnDrift, Grid};
use slowfast::benchmark::{closed_forms, toy_system};
use slowfast::fluctuation::{hbar_estimate, integrate_intermediate, sigma_estimate, FluctuationKernel, FnDiffusion, FAST_STEP};
use slowfast::parallel::par_map;
use slowfast::stationary::{quadrature_fbar, quadrature_sigma};
use slowfast::stats::mean_se;
use slowfast::{DMatrix, NoiseStream};

#[test]
fn kernel_is_centred_at_every_node() {
    let sys = toy_system(0.1, 1e-2).unwrap();
    let grid = Grid::uniform(0.03, 0.08, 6);
    let fbar = tabulate_fbar(&sys, grid.clone(), FbarEstimator::Quadrature { n_nodes: 400 }, 0).unwrap();
    let k = FluctuationKernel { system: &sys, fbar: &fbar };
    for (i, x) in grid.nodes().iter().enumerate() {
        let c = k.centering(x, 4000, 70 + i as u64).unwrap();
        assert!(c.value[0].abs() <= 3.0 * c.stderr[0], "x = {x:?}: {c:?}");
    }
}

#[test]
fn green_kubo_is_eps_independent_on_the_fast_clock() {
    let x = [0.05];
    let fb = quadrature_fbar(&toy_system(0.1, 1e-2).unwrap(), &x, 400).unwrap().0;
    let est: Vec<(f64, f64)> = [1e-2, 1e-3]
        .into_iter()
        .enumerate()
        .map(|(i, eps)| {
            let sys = toy_system(0.1, eps).unwrap();
            let s = NoiseStream::new(90 + i as u64, 0, 1, eps * FAST_STEP);
            let e = sigma_estimate(&sys, &x, &fb, 20.0, 20_000.0, &s).unwrap();
            assert_eq!(e.sigma, e.sigma.transpose());
            (e.sigma[(0, 0)], e.stderr[(0, 0)])
        })
        .collect();
    let (a, b) = (est[0], est[1]);
    assert!((a.0 - b.0).abs() <= 3.0 * (a.1 * a.1 + b.1 * b.1).sqrt(), "{a:?} vs {b:?}");
    let cf = closed_forms(0.05, 0.1).sigma;
    assert!((a.0 - cf).abs() < 0.2 * cf);
}

#[test]
fn corrector_representation_matches_green_kubo() {
    // Sigma = 2 E[Hbar(x, y) H(x, y)] over the stationary law of y
    let sys = toy_system(0.1, 1e-2).unwrap();
    let x = [0.05];
    let fb = quadrature_fbar(&sys, &x, 400).unwrap().0;
    let ys = stationary_samples(&sys, &x, 400, 5).unwrap();
    let prod: Vec<f64> = par_map(ys.len(), |i| {
        let hb = hbar_estimate(&sys, &x, &ys[i], &fb, 100, 20.0, 1000 + i as u64).unwrap();
        let mut f = [0.0];
        sys.f.eval(&x, &ys[i], &mut f);
        2.0 * hb.value[0] * (f[0] - fb[0])
    });
    let (m, se) = mean_se(&prod);
    let q = quadrature_sigma(&sys, &x, 400).unwrap()[(0, 0)];
    assert!((m - q).abs() <= 3.0 * se, "{m} +- {se} vs {q}");
}

#[test]
fn intermediate_integrator_has_weak_order_one() {
    let a = DMatrix::from_element(1, 1, -1.0);
    let drift = FnDrift {
        dim: 1,
        f: |x: &[f64], o: &mut [f64]| o[0] = -x[0] * x[0] * x[0],
    };
    let diff = FnDiffusion {
        dim: 1,
        f: |_: &[f64], o: &mut [f64]| o[0] = 0.5,
    };
    let levels = 5;
    let base = 0.1;
    let ends: Vec<Vec<f64>> = par_map(2000, |r| {
        let fine = NoiseStream::new(33, r as u64, 1, base / (1u64 << (levels - 1)) as f64);
        (0..levels)
            .map(|l| {
                let dt = base / (1u64 << l) as f64;
                let s = fine.coarsen(1 << (levels - 1 - l));
                integrate_intermediate(&a, &drift, &diff, 1.0, &[1.0], 1.0, dt, &s).unwrap().last_slow()[0]
            })
            .collect()
    });
    let mean_diff: Vec<f64> = (0..levels - 1)
        .map(|l| (ends.iter().map(|e| e[l] - e[l + 1]).sum::<f64>() / ends.len() as f64).abs())
        .collect();
    let orders: Vec<f64> = mean_diff.windows(2).map(|w| (w[0] / w[1]).log2()).collect();
    let order = orders.iter().sum::<f64>() / orders.len() as f64;
    assert!(order >= 0.8, "{mean_diff:?} {orders:?}");
}
