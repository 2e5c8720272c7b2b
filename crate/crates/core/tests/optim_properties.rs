mod common;

use nalgebra::DVector;
use proptest::prelude::*;

use probsens::fhn::{FhnConfig, FhnProblem, PRIOR_MEDIAN};
use probsens::kernels::KernelHyper;
use probsens::optim::{descent_direction, gd, pgd, PgdConfig, Termination};
use probsens::sensitivity::SensitivityMode;

use common::Decay;

fn decay_hyper() -> KernelHyper {
    KernelHyper::new(1.0, 4.0, 1.0, 0.0, 1).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn direction_ignores_positive_scaling(
        m in prop::collection::vec(-1e3f64..1e3, 1..8),
        c in 1e-6f64..1e6,
    ) {
        let m = DVector::from_vec(m);
        prop_assume!(m.norm() > 1e-9);
        let a = descent_direction(&m).unwrap();
        let b = descent_direction(&(&m * c)).unwrap();
        prop_assert!((&a - &b).amax() <= 1e-12);
        prop_assert!((a.norm() - 1.0).abs() <= 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn accepted_steps_never_increase_objective(
        a in 0.5f64..2.5,
        b in 0.5f64..2.5,
        delta in prop::sample::select(vec![1.0, 0.1, 0.01]),
    ) {
        let prob = Decay::new([1.0, 2.0]);
        let cfg = PgdConfig { delta0: delta, max_iters: 25, ..PgdConfig::default() };
        let out = pgd(&prob, &[a, b], decay_hyper(), SensitivityMode::Forward, &cfg).unwrap();
        for w in out.trace.records.windows(2) {
            prop_assert!(w[1].g <= w[0].g, "g rose from {} to {}", w[0].g, w[1].g);
        }
    }
}

#[test]
fn tight_threshold_tracks_classical_descent() {
    let prob = Decay::new([1.0, 2.0]);
    let p0 = [2.0, 1.0];
    let cfg = PgdConfig { delta0: 1e-6, delta_min: 1e-8, max_iters: 10, ..PgdConfig::default() };
    let prob_run = pgd(&prob, &p0, decay_hyper(), SensitivityMode::Forward, &cfg).unwrap();
    let classical = gd(&prob, &p0, &cfg).unwrap();
    assert_eq!(prob_run.trace.switch_iter, None);
    for (x, y) in prob_run.trace.records.iter().zip(&classical.trace.records).take(11) {
        let d = x.p.iter().zip(&y.p).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt();
        assert!(d <= 1e-3, "iteration {}: {d:e}", x.iter);
    }
}

#[test]
fn decay_pgd_converges_to_classical_minimum() {
    let prob = Decay::new([1.0, 2.0]);
    let p0 = [2.0, 1.0];
    let cfg = PgdConfig { delta0: 1e-3, ..PgdConfig::default() };
    let classical = gd(&prob, &p0, &cfg).unwrap();
    let prob_run = pgd(&prob, &p0, decay_hyper(), SensitivityMode::Forward, &cfg).unwrap();
    assert_eq!(prob_run.termination, Termination::Converged);
    assert!((prob_run.g - classical.g).abs() <= 1e-2 * classical.g.abs().max(1e-12));
}

#[test]
fn decay_information_grows_as_threshold_shrinks() {
    let prob = Decay::new([1.0, 2.0]);
    let mut last = 0;
    for delta in [1.0, 0.5, 0.1, 0.01, 0.001] {
        let cfg = PgdConfig { delta0: delta, max_iters: 40, ..PgdConfig::default() };
        let out = pgd(&prob, &[2.0, 1.0], decay_hyper(), SensitivityMode::Forward, &cfg).unwrap();
        let total = out.trace.total_dfdp_evals();
        assert!(total >= last, "delta {delta}: {total} < {last}");
        last = total;
    }
}

#[test]
fn fhn_information_grows_as_threshold_shrinks() {
    let prob = FhnProblem::standard(FhnConfig::default(), 1).unwrap();
    let hyp = KernelHyper::new(0.17, 1.7, 4.6, 0.5, 1).unwrap();
    let mut last = 0;
    for delta in [1.0, 0.5, 0.1, 0.01, 0.001] {
        let cfg = PgdConfig { delta0: delta, max_iters: 2, ..PgdConfig::default() };
        let out = pgd(&prob, &PRIOR_MEDIAN, hyp, SensitivityMode::Forward, &cfg).unwrap();
        let total = out.trace.total_dfdp_evals();
        assert!(total >= last, "delta {delta}: {total} < {last}");
        last = total;
    }
}
