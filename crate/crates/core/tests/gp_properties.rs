use proptest::prelude::*;

use probsens::gp::{GaussianState, LinearFunctional};
use probsens::kernels::{DerivOrder, JointKernel, KernelHyper, Warp};
use probsens::sensitivity::param_vec;

fn kernel(ell: f64) -> JointKernel {
    JointKernel::scalar(KernelHyper::new(1.0, ell, 1.0, 0.0, 1).unwrap(), Warp::None)
}

/// Point or slope observation at `x`.
fn obs(x: f64, slope: bool) -> LinearFunctional {
    let p = param_vec(&[]);
    if slope {
        LinearFunctional::new().with(&[x], p, 0, &[DerivOrder::new(0, 1)], 1.0)
    } else {
        LinearFunctional::point(&[x], p, 0)
    }
}

/// Sorted, well-separated locations in `[0, 1]`.
fn separated(n: std::ops::RangeInclusive<usize>) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, n).prop_filter("locations too close", |xs| {
        let mut s = xs.clone();
        s.sort_by(f64::total_cmp);
        s.windows(2).all(|w| w[1] - w[0] > 0.05)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn posterior_interpolates_observations(
        xs in separated(1..=8),
        vals in prop::collection::vec(-2.0f64..2.0, 8),
        slopes in prop::collection::vec(prop::bool::ANY, 8),
    ) {
        let f: Vec<LinearFunctional> = xs.iter().zip(&slopes).map(|(&x, &s)| obs(x, s)).collect();
        let y = &vals[..f.len()];
        let state = GaussianState::new(kernel(0.05), 1).unwrap().condition(&f, y).unwrap();
        let mean = state.posterior_mean(&f).unwrap();
        for (i, v) in y.iter().enumerate() {
            prop_assert!((mean[(i, 0)] - v).abs() <= 1e-6, "row {i}: {} vs {v}", mean[(i, 0)]);
        }
    }

    #[test]
    fn posterior_variance_never_increases(
        xs in prop::collection::vec(0.0f64..1.0, 1..12),
        slopes in prop::collection::vec(prop::bool::ANY, 12),
        q in 0.0f64..1.0,
        q_slope in prop::bool::ANY,
    ) {
        let query = [obs(q, q_slope)];
        let mut state = GaussianState::new(kernel(0.1), 1).unwrap();
        let mut prev = state.posterior(&query).unwrap().cov[(0, 0)];
        for (&x, &s) in xs.iter().zip(&slopes) {
            state = state.condition(&[obs(x, s)], &[0.3]).unwrap();
            let var = state.posterior(&query).unwrap().cov[(0, 0)];
            prop_assert!(var <= prev + 1e-10 * prev.abs().max(1.0), "variance rose from {prev} to {var}");
            prev = var;
        }
    }

    #[test]
    fn sequential_conditioning_matches_batch(
        xs in separated(2..=10),
        vals in prop::collection::vec(-1.0f64..1.0, 10),
        slopes in prop::collection::vec(prop::bool::ANY, 10),
        split in 1usize..9,
        tests in prop::collection::vec(0.0f64..1.0, 20),
    ) {
        let f: Vec<LinearFunctional> = xs.iter().zip(&slopes).map(|(&x, &s)| obs(x, s)).collect();
        let y = &vals[..f.len()];
        let k = split.min(f.len() - 1);
        let prior = GaussianState::new(kernel(0.05), 1).unwrap();
        let batch = prior.condition(&f, y).unwrap();
        let seq = prior.condition(&f[..k], &y[..k]).unwrap().condition(&f[k..], &y[k..]).unwrap();
        let queries: Vec<LinearFunctional> = tests.iter().enumerate().map(|(i, &t)| obs(t, i % 2 == 1)).collect();
        let a = batch.posterior(&queries).unwrap();
        let b = seq.posterior(&queries).unwrap();
        prop_assert!((&a.mean - &b.mean).amax() <= 1e-8);
        prop_assert!((&a.cov - &b.cov).amax() <= 1e-8);
    }

    #[test]
    fn multi_column_values_share_one_factor(
        xs in separated(1..=6),
        a in prop::collection::vec(-1.0f64..1.0, 6),
        b in prop::collection::vec(-1.0f64..1.0, 6),
        q in 0.0f64..1.0,
    ) {
        let f: Vec<LinearFunctional> = xs.iter().map(|&x| obs(x, false)).collect();
        let n = f.len();
        let interleaved: Vec<f64> = (0..n).flat_map(|i| [a[i], b[i]]).collect();
        let both = GaussianState::new(kernel(0.1), 2).unwrap().condition(&f, &interleaved).unwrap();
        let only_a = GaussianState::new(kernel(0.1), 1).unwrap().condition(&f, &a[..n]).unwrap();
        let only_b = GaussianState::new(kernel(0.1), 1).unwrap().condition(&f, &b[..n]).unwrap();
        let query = [obs(q, false)];
        let m = both.posterior_mean(&query).unwrap();
        prop_assert!((m[(0, 0)] - only_a.posterior_mean(&query).unwrap()[(0, 0)]).abs() <= 1e-10);
        prop_assert!((m[(0, 1)] - only_b.posterior_mean(&query).unwrap()[(0, 0)]).abs() <= 1e-10);
    }
}
