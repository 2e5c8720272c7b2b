use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use probsens::analysis::{finite_diff_gradient, fhn_robustness, gwf_robustness, wasserstein2_gaussian};
use probsens::experiment::{calibrate_hyperparameters, calibration_likelihood, fhn_calibration_design, Benchmark};
use probsens::fhn::{fhn_forward_oracle, FhnConfig, FhnProblem, PRIOR_MEDIAN, P_STAR};
use probsens::gwf::{assemble, build_mesh, flow_dirichlet, param_cells, solve_system, DirichletNodes, DofMap, GwfConfig, GwfProblem};
use probsens::kernels::KernelHyper;
use probsens::optim::{gd, PgdConfig};
use probsens::sensitivity::{SensitivityMode, SensitivityProblem};

fn dense(a: &probsens::linalg::BandedSpd) -> DMatrix<f64> {
    let n = a.dim();
    DMatrix::from_fn(n, n, |i, j| a.get(i, j))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn fhn_sensitivities_start_at_zero(f in prop::collection::vec(0.5f64..2.0, 4)) {
        let p: Vec<f64> = PRIOR_MEDIAN.iter().zip(&f).map(|(m, s)| m * s).collect();
        let cfg = FhnConfig::default();
        let sens = fhn_forward_oracle(&p, cfg.ic, cfg.t_end, cfg.oracle_tol).unwrap();
        let (_, s) = sens.at(0.0).unwrap();
        prop_assert!(s.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn fhn_objective_stable_under_tighter_tolerance(f in prop::collection::vec(0.7f64..1.4, 4)) {
        let prob = FhnProblem::standard(FhnConfig::default(), 1).unwrap();
        let p: Vec<f64> = PRIOR_MEDIAN.iter().zip(&f).map(|(m, s)| m * s).collect();
        let tol = prob.cfg.solve_tol;
        let a = prob.objective_at_tol(&p, tol).unwrap();
        let b = prob.objective_at_tol(&p, tol / 10.0).unwrap();
        prop_assert!((a - b).abs() <= 10.0 * tol * a.abs(), "{a} vs {b}");
    }

    #[test]
    fn gwf_stiffness_is_linear_in_conductivity(
        p in prop::collection::vec(0.2f64..10.0, 4),
        q in prop::collection::vec(0.2f64..10.0, 4),
        alpha in 0.1f64..10.0,
    ) {
        let mesh = build_mesh();
        let field = param_cells(&mesh, 2).unwrap();
        let dofs = DofMap::new(&mesh, DirichletNodes::TopBottom);
        let sys = |c: &[f64]| assemble(&mesh, &field, &dofs, c, flow_dirichlet).unwrap();
        let sum: Vec<f64> = p.iter().zip(&q).map(|(x, y)| x + y).collect();
        let scaled: Vec<f64> = p.iter().map(|x| alpha * x).collect();
        let (ap, aq, asum, ascaled) = (dense(&sys(&p).a), dense(&sys(&q).a), dense(&sys(&sum).a), dense(&sys(&scaled).a));
        let scale = asum.amax();
        prop_assert!((&asum - &ap - &aq).amax() <= 1e-13 * scale);
        prop_assert!((&ascaled - &ap * alpha).amax() <= 1e-13 * ascaled.amax());
        let bsum = DVector::from_vec(sys(&sum).b);
        let bparts = DVector::from_vec(sys(&p).b) + DVector::from_vec(sys(&q).b);
        prop_assert!((&bsum - &bparts).amax() <= 1e-13 * bsum.amax().max(1.0));
    }

    #[test]
    fn gwf_solution_obeys_maximum_principle_and_solves_system(p in prop::collection::vec(0.1f64..10.0, 16)) {
        let mesh = build_mesh();
        let field = param_cells(&mesh, 4).unwrap();
        let dofs = DofMap::new(&mesh, DirichletNodes::TopBottom);
        let sys = assemble(&mesh, &field, &dofs, &p, flow_dirichlet).unwrap();
        let u = solve_system(&sys, &dofs).unwrap();
        prop_assert!(u.iter().all(|&v| (-1e-10..=1.0 + 1e-10).contains(&v)));
        let free: Vec<f64> = dofs.node_of_free.iter().map(|&k| u[k]).collect();
        let r: Vec<f64> = sys.a.matvec(&free).iter().zip(&sys.b).map(|(x, y)| x - y).collect();
        let rn = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        let bn = sys.b.iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!(rn <= 1e-10 * bn.max(1.0));
    }

    #[test]
    fn gwf_transpose_identity(
        p in prop::collection::vec(0.5f64..8.0, 4),
        seed in 0u64..1000,
    ) {
        use rand::{Rng, SeedableRng};
        let mesh = build_mesh();
        let field = param_cells(&mesh, 2).unwrap();
        let dofs = DofMap::new(&mesh, DirichletNodes::TopBottom);
        let a = assemble(&mesh, &field, &dofs, &p, flow_dirichlet).unwrap().a;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = a.dim();
        let lam: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let s: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
        let lhs = dot(&lam, &a.matvec(&s));
        let rhs = dot(&a.matvec(&lam), &s);
        prop_assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0));
    }
}

fn gaussian() -> impl Strategy<Value = (DVector<f64>, DMatrix<f64>)> {
    (prop::collection::vec(-2.0f64..2.0, 3), prop::collection::vec(-1.0f64..1.0, 9)).prop_map(|(m, b)| {
        let b = DMatrix::from_vec(3, 3, b);
        (DVector::from_vec(m), &b * b.transpose())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn wasserstein_is_a_metric(x in gaussian(), y in gaussian(), z in gaussian()) {
        let d = |a: &(DVector<f64>, DMatrix<f64>), b: &(DVector<f64>, DMatrix<f64>)| {
            wasserstein2_gaussian(&a.0, &a.1, &b.0, &b.1).unwrap()
        };
        prop_assert!(d(&x, &x) <= 1e-6);
        prop_assert!((d(&x, &y) - d(&y, &x)).abs() <= 1e-8);
        prop_assert!(d(&x, &y) >= 0.0);
        prop_assert!(d(&x, &z) <= d(&x, &y) + d(&y, &z) + 1e-8);
    }
}

#[test]
fn fhn_gradient_matches_differences_along_descent_path() {
    let prob = FhnProblem::standard(FhnConfig::default(), 1).unwrap();
    let out = gd(&prob, &PRIOR_MEDIAN, &PgdConfig { max_iters: 40, ..PgdConfig::default() }).unwrap();
    for r in out.trace.records.iter().step_by(5) {
        let exact = prob.exact_gradient_forward(&r.p).unwrap().grad;
        let fd = finite_diff_gradient(|q| prob.objective_at_tol(q, prob.cfg.oracle_tol), &r.p, 1e-5).unwrap();
        let e = (&exact - &fd).norm() / exact.norm();
        assert!(e <= 1e-4, "iteration {}: {e:e}", r.iter);
    }
}

#[test]
fn robustness_is_first_order_on_both_benchmarks() {
    let fhn = FhnProblem::standard(FhnConfig::default(), 1).unwrap();
    let hyp = KernelHyper::new(0.17, 1.7, 4.6, 0.5, 1).unwrap();
    let locations: Vec<Vec<f64>> = (1..=50).map(|i| vec![0.4 * i as f64]).collect();
    let eps = [1e-4, 1e-3, 1e-2];
    let r = fhn_robustness(&fhn, &P_STAR, hyp, &locations, &eps).unwrap();
    assert!(r.nondecreasing(0.1) && (0.8..=1.3).contains(&r.slope), "fhn {r:?}");

    let gwf = GwfProblem::generate(GwfConfig::default(), 2, 1).unwrap();
    let ghyp = KernelHyper::new(1.0, 0.2, 1.0, 0.0, 2).unwrap();
    let p: Vec<f64> = gwf.prior_mean().iter().copied().collect();
    let r = gwf_robustness(&gwf, &p, ghyp, gwf.candidates(), &eps, 9).unwrap();
    assert!(r.nondecreasing(0.1) && (0.8..=1.3).contains(&r.slope), "gwf {r:?}");
    let zero = gwf_robustness(&gwf, &p, ghyp, &gwf.candidates()[..50], &[0.0], 9).unwrap();
    assert_eq!(zero.rows[0].w2, 0.0);
}

#[test]
fn calibration_returns_a_grid_maximum() {
    let prob = FhnProblem::standard(FhnConfig::default(), 1).unwrap();
    let bench = Benchmark::Fhn(Box::new(prob.clone()));
    let cal = calibrate_hyperparameters(&bench, 3).unwrap();
    let (f, v, _) = fhn_calibration_design(&prob, 5, 3);
    let best = calibration_likelihood(&prob, SensitivityMode::Forward, cal.hyp, &f, &v);
    assert!((best - cal.log_likelihood).abs() <= 1e-9 * best.abs());
    let step = 10f64.powf(cal.final_step);
    for axis in 0..3 {
        for factor in [step, 1.0 / step] {
            let mut h = cal.hyp;
            match axis {
                0 => h.sigma *= factor,
                1 => h.ell_x *= factor,
                _ => h.ell_p *= factor,
            }
            let neighbour = calibration_likelihood(&prob, SensitivityMode::Forward, h, &f, &v);
            assert!(neighbour <= best + 1e-9 * best.abs(), "axis {axis}: {neighbour} > {best}");
        }
    }
}

#[test]
fn gwf_calibration_keeps_spatial_length_fixed() {
    let prob = GwfProblem::generate(GwfConfig::default(), 2, 1).unwrap();
    let cal = calibrate_hyperparameters(&Benchmark::Gwf(Box::new(prob)), 3).unwrap();
    assert_eq!(cal.hyp.ell_x, 0.2);
}
