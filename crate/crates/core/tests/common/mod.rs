//! A two-parameter decay model `u' = -a u + b`, `u(0) = 0`, with a closed-form
//! solution, used where the benchmarks would be too slow.
#![allow(dead_code)]

use nalgebra::DVector;

use probsens::gp::{AugPoint, LinearFunctional, ParamVec};
use probsens::kernels::{DerivOrder, JointKernel, KernelHyper, Warp};
use probsens::sensitivity::{GradientEval, InfoBatch, SensitivityMode, SensitivityProblem};
use probsens::{Error, Result};

pub struct Decay {
    pub times: Vec<f64>,
    pub data: Vec<f64>,
    pub prior_weight: f64,
    pub prior_mean: [f64; 2],
    candidates: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy)]
pub struct DecaySolution {
    a: f64,
    b: f64,
}

impl DecaySolution {
    pub fn u(&self, t: f64) -> f64 {
        self.b / self.a * (1.0 - (-self.a * t).exp())
    }

    /// `(du/da, du/db)` at `t`.
    pub fn sens(&self, t: f64) -> [f64; 2] {
        let (a, b) = (self.a, self.b);
        let e = (-a * t).exp();
        [-b / (a * a) * (1.0 - e) + b / a * t * e, (1.0 - e) / a]
    }
}

impl Decay {
    pub fn new(truth: [f64; 2]) -> Self {
        let times: Vec<f64> = (1..=5).map(f64::from).collect();
        let sol = DecaySolution { a: truth[0], b: truth[1] };
        let data = times.iter().map(|&t| sol.u(t)).collect();
        let candidates = (1..=200).map(|k| vec![5.0 * k as f64 / 200.0]).collect();
        Self { times, data, prior_weight: 0.1, prior_mean: [1.5, 1.5], candidates }
    }
}

impl SensitivityProblem for Decay {
    type Solution = DecaySolution;

    fn dim_p(&self) -> usize {
        2
    }

    fn spatial_dims(&self) -> usize {
        1
    }

    fn check_params(&self, p: &[f64]) -> Result<()> {
        if p.len() != 2 || !(p[0] > 0.0) {
            return Err(Error::Domain(format!("bad parameters {p:?}")));
        }
        Ok(())
    }

    fn solve(&self, p: &[f64]) -> Result<DecaySolution> {
        self.check_params(p)?;
        Ok(DecaySolution { a: p[0], b: p[1] })
    }

    fn objective(&self, p: &[f64], sol: &DecaySolution) -> Result<f64> {
        let misfit: f64 = self.times.iter().zip(&self.data).map(|(&t, y)| (sol.u(t) - y).powi(2)).sum();
        let prior: f64 = p.iter().zip(&self.prior_mean).map(|(v, m)| (v - m).powi(2)).sum();
        Ok(misfit + self.prior_weight * prior)
    }

    fn dgdp(&self, p: &[f64]) -> Result<DVector<f64>> {
        Ok(DVector::from_fn(2, |i, _| 2.0 * self.prior_weight * (p[i] - self.prior_mean[i])))
    }

    fn candidates(&self) -> &[Vec<f64>] {
        &self.candidates
    }

    fn kernel(&self, hyp: KernelHyper, mode: SensitivityMode) -> Result<JointKernel> {
        if mode == SensitivityMode::Adjoint {
            return Err(Error::Unsupported("adjoint mode".into()));
        }
        Ok(JointKernel::scalar(KernelHyper { spatial_dims: 1, rho: 0.0, ..hyp }, Warp::Linear { axis: 0 }))
    }

    fn forward_info(&self, sol: &DecaySolution, p: &ParamVec, locations: &[Vec<f64>]) -> Result<InfoBatch> {
        let mut batch = InfoBatch::default();
        for loc in locations {
            let t = loc[0];
            let l = LinearFunctional::new()
                .with(&[t], p.clone(), 0, &[DerivOrder::new(0, 1)], 1.0)
                .with(&[t], p.clone(), 0, &[], sol.a);
            batch.functionals.push(l);
            batch.values.extend_from_slice(&[-sol.u(t), 1.0]);
            batch.points.push(AugPoint { x: vec![t], p: p.clone() });
            batch.dfdp_evals += 1;
        }
        Ok(batch)
    }

    fn dgdu_functional(&self, sol: &DecaySolution, p: &ParamVec) -> Result<LinearFunctional> {
        let mut l = LinearFunctional::new();
        for (&t, y) in self.times.iter().zip(&self.data) {
            l.push(&[t], p.clone(), 0, &[], 2.0 * (sol.u(t) - y));
        }
        Ok(l)
    }

    fn exact_gradient_forward(&self, p: &[f64]) -> Result<GradientEval> {
        let sol = self.solve(p)?;
        let mut grad = self.dgdp(p)?;
        for (&t, y) in self.times.iter().zip(&self.data) {
            let s = sol.sens(t);
            for c in 0..2 {
                grad[c] += 2.0 * (sol.u(t) - y) * s[c];
            }
        }
        Ok(GradientEval { grad, jac_evals: self.times.len() })
    }

    fn exact_gradient_adjoint(&self, p: &[f64]) -> Result<GradientEval> {
        self.exact_gradient_forward(p)
    }
}
