use gradphi::coupling::{
    compare_hs_solutions, couple_dirichlet_periodic, couple_tilts_potentials, inner_gradient_bias, marginal_check, CouplingOptions, HsProblem,
};
use gradphi::diagnostics::{brascamp_lieb_check, exp_moment_check, spectral_gap_check, Verdict};
use gradphi::dynamics::{Scheme, System, TrajectoryConfig};
use gradphi::gaussian::DenseGaussian;
use gradphi::hs::{GradientSum, LinearObservable};
use gradphi::lattice::{Convention, Cube};
use gradphi::potential::Potential;
use gradphi::solvers::conjugate_gradient;
use gradphi::stats::linear_fit;

fn quad(l: i64, tilt: Vec<f64>) -> System {
    System::dirichlet(l, 2, Potential::quadratic(1.0).unwrap(), tilt, Convention::Paired).unwrap()
}

fn logcosh(l: i64) -> System {
    System::dirichlet(l, 2, Potential::logcosh(0.5).unwrap(), vec![0.0, 0.0], Convention::Paired).unwrap()
}

fn lm(samples: usize, stride: u64, seed: u64) -> TrajectoryConfig {
    TrajectoryConfig { dt: 0.03, scheme: Scheme::LeimkuhlerMatthews, burn_in_factor: 1.0, stride, samples, seed }
}

#[test]
fn dirichlet_periodic_tail_is_monotone() {
    let d = quad(4, vec![0.0, 0.0]);
    let p = System::periodic(4, 2, Potential::quadratic(1.0).unwrap(), vec![0.0, 0.0], Convention::Paired).unwrap();
    let opts = CouplingOptions { samples: 24, s_grid: vec![0.5, 1.0, 2.0, 3.0], ..Default::default() };
    let r = couple_dirichlet_periodic(&d, &p, &opts).unwrap();
    let e = &r.tail.exceedance;
    assert!(e.windows(2).all(|w| w[1] <= w[0]), "{e:?}");
    assert!(e[3] <= e[1]);
    assert!(r.inner_gradient.value.is_finite());
}

#[test]
fn quadratic_tilt_coupling_is_deterministic_and_linear() {
    let a = quad(6, vec![0.0, 0.0]);
    let opts = CouplingOptions { samples: 4, ..Default::default() };
    let one = couple_tilts_potentials(&a, &quad(6, vec![0.2, 0.0]), &[2, 3], &[0, 0], Some(4.0), &opts).unwrap();
    let two = couple_tilts_potentials(&a, &quad(6, vec![0.4, 0.0]), &[2, 3], &[0, 0], Some(4.0), &opts).unwrap();
    for (r1, r2) in one.rows.iter().zip(&two.rows) {
        // the noise cancels in the difference of two Gaussian dynamics
        assert!(r1.mean_sup.stderr < 1e-12 * (1.0 + r1.mean_sup.value));
        assert!((r2.mean_sup.value - 2.0 * r1.mean_sup.value).abs() < 1e-9);
        assert!((r2.force_gap - 2.0 * r1.force_gap).abs() < 1e-9);
    }
}

#[test]
fn quadratic_hs_solutions_agree_across_boxes() {
    let opts = CouplingOptions { samples: 2, ..Default::default() };
    for problem in [HsProblem::Dirichlet, HsProblem::Neumann] {
        let c = compare_hs_solutions(&quad(6, vec![0.0, 0.0]), &quad(8, vec![0.0, 0.0]), 2, problem, 0, 1.0, 30.0, &opts).unwrap();
        assert!(c.mean_square.value < 1e-20, "{problem:?} {c:?}");
    }
}

#[test]
fn perturbed_hs_solutions_differ_finitely() {
    let a = logcosh(6);
    let b = System::dirichlet(6, 2, Potential::quadratic(1.25).unwrap(), vec![0.0, 0.0], Convention::Paired).unwrap();
    let opts = CouplingOptions { samples: 4, ..Default::default() };
    let c = compare_hs_solutions(&a, &b, 2, HsProblem::Dirichlet, 0, 4.0, 30.0, &opts).unwrap();
    assert!(c.mean_square.value.is_finite() && c.mean_square.value > 0.0);
}

#[test]
fn coupling_preserves_marginals() {
    let a = logcosh(3);
    let b = System::dirichlet(4, 2, Potential::quadratic(1.0).unwrap(), vec![0.3, 0.0], Convention::Paired).unwrap();
    let opts = CouplingOptions { dt: 0.02, ..Default::default() };
    let (coupled, alone) = marginal_check(&a, &b, 500, 400, &opts).unwrap();
    let z = (coupled.value - alone.value).abs() / coupled.stderr.hypot(alone.stderr);
    assert!(z < 3.0, "z = {z}");
}

#[test]
fn inner_gradient_bias_decays() {
    // exact mean field of the tilted Gaussian box: A m = drift(0)
    let exact = |l: i64| {
        let s = quad(l, vec![0.3, 0.0]);
        let mut b = vec![0.0; s.num_vertices()];
        s.drift(&vec![0.0; s.num_vertices()], &mut b);
        let a: Vec<f64> = s.weights.clone();
        let (m, _) = conjugate_gradient(&s.graph, &a, 0.0, &b, 1e-12, 100_000).unwrap();
        let inner = Cube::centered(l / 2, 2).unwrap();
        let (mut sum, mut n) = (0.0, 0);
        for e in &s.graph.edges {
            let (t, h) = (s.domain.coords(e.tail), s.domain.coords(e.head));
            if e.dir == 0 && inner.contains(&t) && inner.contains(&h) {
                sum += m[e.head] - m[e.tail];
                n += 1;
            }
        }
        (sum / n as f64).abs()
    };
    let ls = [8i64, 16, 32];
    let x: Vec<f64> = ls.iter().map(|&l| (l as f64).ln()).collect();
    let y: Vec<f64> = ls.iter().map(|&l| exact(l).ln()).collect();
    let fit = linear_fit(&x, &y).unwrap();
    assert!(-fit.slope > 0.5, "alpha = {}", -fit.slope);

    let mc = inner_gradient_bias(&quad(8, vec![0.3, 0.0]), &lm(20_000, 10, 4)).unwrap();
    assert!(mc[0].z_score(exact(8)).abs() < 4.0, "{:?} vs {}", mc[0], exact(8));
}

#[test]
fn brascamp_lieb_is_tight_for_gaussian_point_evaluation() {
    let s = quad(4, vec![0.0, 0.0]);
    let mut c = vec![0.0; s.num_vertices()];
    c[s.domain.locate(&[1, 0]).unwrap()] = 1.0;
    let r = brascamp_lieb_check(&s, &LinearObservable { coeffs: c }, &lm(20_000, 10, 5)).unwrap();
    assert!(r.equality_z() < 3.0, "{r:?}");
}

#[test]
fn brascamp_lieb_holds_for_nonlinear_sums() {
    let s = logcosh(6);
    let sum = LinearObservable { coeffs: (0..s.num_vertices()).map(|x| if s.graph.active[x] { 1.0 } else { 0.0 }).collect() };
    let r = brascamp_lieb_check(&s, &sum, &lm(4000, 20, 6)).unwrap();
    assert_ne!(r.verdict, Verdict::Fail);
    let r = brascamp_lieb_check(&s, &GradientSum { sine: false }, &lm(2000, 20, 7)).unwrap();
    assert_ne!(r.verdict, Verdict::Fail);
}

#[test]
fn exponential_moments_of_a_point() {
    let s = logcosh(3);
    let mut psi = vec![0.0; s.num_vertices()];
    psi[s.domain.locate(&[0, 0]).unwrap()] = 1.0;
    let r = exp_moment_check(&s, &psi, &[-0.5, 0.0, 0.5], &lm(20_000, 5, 8)).unwrap();
    assert!(r.iter().all(|x| x.verdict != Verdict::Fail && !x.flagged), "{r:?}");
    assert_eq!(r[1].lhs.value, 0.0);

    // Gaussian: log-mgf is t² Var / 2
    let q = quad(3, vec![0.0, 0.0]);
    let var = DenseGaussian::new(&q).unwrap().linear_variance(&psi);
    let g = exp_moment_check(&q, &psi, &[0.5], &lm(20_000, 5, 9)).unwrap();
    assert!(g[0].lhs.z_score(0.125 * var).abs() < 4.0, "{:?} vs {}", g[0].lhs, 0.125 * var);
}

#[test]
fn spectral_gap_constant_is_stable_across_sizes() {
    let fitted: Vec<f64> = [6i64, 9, 12]
        .iter()
        .map(|&l| {
            let s = quad(l, vec![0.0, 0.0]);
            let c: Vec<f64> = (0..s.num_vertices()).map(|x| if s.graph.active[x] { 1.0 } else { 0.0 }).collect();
            let var = DenseGaussian::new(&s).unwrap().linear_variance(&c);
            var / ((l * l) as f64 * c.iter().sum::<f64>())
        })
        .collect();
    let (lo, hi) = fitted.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &v| (a.min(v), b.max(v)));
    assert!(hi / lo < 2.0, "{fitted:?}");

    let s = logcosh(4);
    let r = spectral_gap_check(&s, &GradientSum { sine: true }, &lm(2000, 10, 10), None).unwrap();
    assert_ne!(r.report.verdict, Verdict::Fail);
    assert!(r.fitted.value > 0.0);
}
