//! FitzHugh–Nagumo parameter estimation benchmark.
//!
//! The model is `v' = v − v³/3 − w + I`, `w' = (v + a − b w)/τ` with parameters
//! `p = [I, a, b, τ]`, written as the constraint `F(u, p) = u' − f(u, p) = 0`.
//! The objective is a Gaussian misfit of `v` at integer times plus a log-normal
//! prior on `p`.

use std::cell::Cell;
use std::sync::Arc;

use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::gp::{AugPoint, LinearFunctional, ParamVec};
use crate::kernels::{DerivOrder, JointKernel, KernelHyper};
use crate::ode::{dopri5, euler, DenseSolution, StepLimits, Tolerance};
use crate::sensitivity::{GradientEval, InfoBatch, SensitivityMode, SensitivityProblem};
use crate::{Error, Result};

/// Parameters used to generate the synthetic data.
pub const P_STAR: [f64; 4] = [0.5, 0.8, 0.7, 12.5];
/// Median of the log-normal parameter prior.
pub const PRIOR_MEDIAN: [f64; 4] = [1.0, 1.0, 1.0, 10.0];

/// Named view of a packed parameter vector.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FhnParams {
    pub i: f64,
    pub a: f64,
    pub b: f64,
    pub tau: f64,
}

impl FhnParams {
    pub fn from_slice(p: &[f64]) -> Result<Self> {
        if p.len() != 4 {
            return Err(Error::InvalidInput(format!("expected 4 parameters, got {}", p.len())));
        }
        Ok(Self { i: p[0], a: p[1], b: p[2], tau: p[3] })
    }

    pub fn to_vec(self) -> Vec<f64> {
        vec![self.i, self.a, self.b, self.tau]
    }
}

/// Right-hand side `f(v, w; p)`.
#[inline]
pub fn fhn_rhs(v: f64, w: f64, p: &[f64]) -> (f64, f64) {
    (v - v * v * v / 3.0 + p[0] - w, (v + p[1] - p[2] * w) / p[3])
}

/// Jacobians of the right-hand side with respect to the state and the parameters.
#[inline]
pub fn fhn_jacobians(v: f64, w: f64, p: &[f64]) -> ([[f64; 2]; 2], [[f64; 4]; 2]) {
    let (a, b, tau) = (p[1], p[2], p[3]);
    let ju = [[1.0 - v * v, -1.0], [1.0 / tau, -b / tau]];
    let jp = [[1.0, 0.0, 0.0, 0.0], [0.0, 1.0 / tau, -w / tau, -(v + a - b * w) / (tau * tau)]];
    (ju, jp)
}

/// How the stated noise level is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NoiseReading {
    /// The level is a standard deviation.
    #[default]
    StdDev,
    /// The level is a variance.
    Variance,
}

impl NoiseReading {
    /// Noise variance implied by `level`.
    pub fn variance(self, level: f64) -> f64 {
        match self {
            NoiseReading::StdDev => level * level,
            NoiseReading::Variance => level,
        }
    }
}

/// Numerical solution of the model on `[0, T]`.
#[derive(Debug, Clone)]
pub struct Trajectory {
    sol: DenseSolution,
}

impl Trajectory {
    pub fn from_dense(sol: DenseSolution) -> Self {
        Self { sol }
    }

    /// `(v, w)` at time `t`.
    pub fn at(&self, t: f64) -> Result<[f64; 2]> {
        let mut out = [0.0; 2];
        self.sol.eval_into(t, &mut out)?;
        Ok(out)
    }

    pub fn t_end(&self) -> f64 {
        self.sol.t_end()
    }

    pub fn dense(&self) -> &DenseSolution {
        &self.sol
    }
}

/// Adaptive solve from `ic` over `[0, t_end]`.
pub fn fhn_solve(p: &[f64], ic: [f64; 2], t_end: f64, tol: f64) -> Result<Trajectory> {
    FhnParams::from_slice(p)?;
    if !(tol > 0.0) {
        return Err(Error::InvalidInput("tolerance must be positive".into()));
    }
    let sol = dopri5(
        |_, y, dy| {
            let (a, b) = fhn_rhs(y[0], y[1], p);
            dy[0] = a;
            dy[1] = b;
        },
        0.0,
        &ic,
        t_end,
        Tolerance::uniform(tol),
        StepLimits::default(),
    )?;
    Ok(Trajectory { sol })
}

/// Fixed-step Euler solve with step `h`.
pub fn fhn_solve_euler(p: &[f64], ic: [f64; 2], t_end: f64, h: f64) -> Result<Trajectory> {
    FhnParams::from_slice(p)?;
    let sol = euler(
        |_, y, dy| {
            let (a, b) = fhn_rhs(y[0], y[1], p);
            dy[0] = a;
            dy[1] = b;
        },
        0.0,
        &ic,
        t_end,
        h,
    )?;
    Ok(Trajectory { sol })
}

/// Observations of `v` at fixed times.
#[derive(Debug, Clone, PartialEq)]
pub struct FhnData {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    pub seed: u64,
    pub noise_std: f64,
}

/// Problem setup.
#[derive(Debug, Clone, PartialEq)]
pub struct FhnConfig {
    pub ic: [f64; 2],
    pub t_end: f64,
    pub data_times: Vec<f64>,
    /// Noise level `γ` (see [`NoiseReading`]).
    pub noise: f64,
    pub noise_reading: NoiseReading,
    pub prior_median: [f64; 4],
    /// Tolerance for the solves that feed the optimizer and information functionals.
    pub solve_tol: f64,
    /// Tolerance for classical oracles and data generation.
    pub oracle_tol: f64,
    pub n_candidates: usize,
    /// Coupling between the two sensitivity blocks in the prior.
    pub rho: f64,
}

impl Default for FhnConfig {
    fn default() -> Self {
        Self {
            ic: [-1.0, 1.0],
            t_end: 20.0,
            data_times: (1..=20).map(f64::from).collect(),
            noise: 1e-2,
            noise_reading: NoiseReading::StdDev,
            prior_median: PRIOR_MEDIAN,
            solve_tol: 1e-8,
            oracle_tol: 1e-10,
            n_candidates: 1000,
            rho: 0.5,
        }
    }
}

/// Synthetic observations `y_i = v(t_i; p*) + ξ_i`.
pub fn fhn_generate_data(p_star: &[f64], cfg: &FhnConfig, seed: u64) -> Result<FhnData> {
    let traj = fhn_solve(p_star, cfg.ic, cfg.t_end, cfg.oracle_tol)?;
    let std = cfg.noise_reading.variance(cfg.noise).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(cfg.data_times.len());
    for &t in &cfg.data_times {
        let v = traj.at(t)?[0];
        let xi = if std > 0.0 {
            Normal::new(0.0, std).map_err(|e| Error::InvalidInput(e.to_string()))?.sample(&mut rng)
        } else {
            0.0
        };
        values.push(v + xi);
    }
    Ok(FhnData { times: cfg.data_times.clone(), values, seed, noise_std: std })
}

/// Forward sensitivities `S = dU/dp` (2 × 4) along a trajectory.
#[derive(Debug, Clone)]
pub struct ForwardSensitivity {
    sol: DenseSolution,
    pub jac_evals: usize,
}

impl ForwardSensitivity {
    /// `(v, w)` and the row-major 2 × 4 sensitivity at `t`.
    pub fn at(&self, t: f64) -> Result<([f64; 2], [[f64; 4]; 2])> {
        let y = self.sol.eval(t)?;
        let mut s = [[0.0; 4]; 2];
        for r in 0..2 {
            for c in 0..4 {
                s[r][c] = y[2 + 4 * r + c];
            }
        }
        Ok(([y[0], y[1]], s))
    }
}

/// Integrates the augmented system `u' = f`, `S' = J_u S + J_p`, `S(0) = 0`.
pub fn fhn_forward_oracle(p: &[f64], ic: [f64; 2], t_end: f64, tol: f64) -> Result<ForwardSensitivity> {
    FhnParams::from_slice(p)?;
    let evals = Cell::new(0usize);
    let mut y0 = vec![0.0; 10];
    y0[..2].copy_from_slice(&ic);
    let sol = dopri5(
        |_, y, dy| {
            let (v, w) = (y[0], y[1]);
            let (f0, f1) = fhn_rhs(v, w, p);
            dy[0] = f0;
            dy[1] = f1;
            let (ju, jp) = fhn_jacobians(v, w, p);
            evals.set(evals.get() + 1);
            for r in 0..2 {
                for c in 0..4 {
                    dy[2 + 4 * r + c] = ju[r][0] * y[2 + c] + ju[r][1] * y[6 + c] + jp[r][c];
                }
            }
        },
        0.0,
        &y0,
        t_end,
        Tolerance::uniform(tol),
        StepLimits::default(),
    )?;
    Ok(ForwardSensitivity { sol, jac_evals: evals.get() })
}

/// The benchmark problem: data, objective and derivatives.
#[derive(Debug, Clone)]
pub struct FhnProblem {
    pub cfg: FhnConfig,
    pub data: FhnData,
    candidates: Vec<Vec<f64>>,
    log_median: [f64; 4],
}

impl FhnProblem {
    pub fn new(cfg: FhnConfig, data: FhnData) -> Result<Self> {
        if data.times.len() != data.values.len() {
            return Err(Error::InvalidInput("data times and values differ in length".into()));
        }
        if data.times.iter().any(|&t| !(0.0..=cfg.t_end).contains(&t)) {
            return Err(Error::InvalidInput("data time outside the integration window".into()));
        }
        if cfg.noise <= 0.0 {
            return Err(Error::InvalidInput("noise level must be positive".into()));
        }
        let n = cfg.n_candidates.max(1);
        let candidates = (1..=n).map(|k| vec![cfg.t_end * k as f64 / n as f64]).collect();
        let log_median = cfg.prior_median.map(f64::ln);
        Ok(Self { cfg, data, candidates, log_median })
    }

    /// Standard setup: data from `P_STAR` with the given seed.
    pub fn standard(cfg: FhnConfig, seed: u64) -> Result<Self> {
        let data = fhn_generate_data(&P_STAR, &cfg, seed)?;
        Self::new(cfg, data)
    }

    fn misfit_weight(&self) -> f64 {
        1.0 / self.cfg.noise_reading.variance(self.cfg.noise)
    }

    pub fn log_median(&self) -> [f64; 4] {
        self.log_median
    }

    fn prior_term(&self, p: &[f64]) -> f64 {
        p.iter().zip(&self.log_median).map(|(v, m)| (v.ln() - m).powi(2)).sum()
    }

    /// Objective evaluated from a trajectory.
    pub fn objective_from(&self, p: &[f64], traj: &Trajectory) -> Result<f64> {
        self.check_params(p)?;
        let mut misfit = 0.0;
        for (&t, &y) in self.data.times.iter().zip(&self.data.values) {
            misfit += (traj.at(t)?[0] - y).powi(2);
        }
        Ok(self.misfit_weight() * misfit + self.prior_term(p))
    }

    /// Objective with a solve at tolerance `tol`.
    pub fn objective_at_tol(&self, p: &[f64], tol: f64) -> Result<f64> {
        self.check_params(p)?;
        let traj = fhn_solve(p, self.cfg.ic, self.cfg.t_end, tol)?;
        self.objective_from(p, &traj)
    }

    /// Functional `(2/σ²) Σ (v(t_i) − y_i) δ[t_i]` on the `v` block.
    pub fn dgdu_weights(&self, traj: &Trajectory) -> Result<Vec<(f64, f64)>> {
        let w = 2.0 * self.misfit_weight();
        self.data
            .times
            .iter()
            .zip(&self.data.values)
            .map(|(&t, &y)| Ok((t, w * (traj.at(t)?[0] - y))))
            .collect()
    }

    /// Forward information at a single time, written as two functionals.
    fn info_at(&self, traj: &Trajectory, p: &ParamVec, t: f64, batch: &mut InfoBatch) -> Result<()> {
        if !(0.0..=self.cfg.t_end).contains(&t) {
            return Err(Error::Interpolation(t));
        }
        let [v, w] = traj.at(t)?;
        let (ju, jp) = fhn_jacobians(v, w, p);
        let dt = [DerivOrder::new(0, 1)];
        for i in 0..2 {
            let mut l = LinearFunctional::new().with(&[t], p.clone(), i, &dt, 1.0);
            for (k, &j) in ju[i].iter().enumerate() {
                if j != 0.0 {
                    l.push(&[t], p.clone(), k, &[], -j);
                }
            }
            batch.functionals.push(l);
            batch.values.extend_from_slice(&jp[i]);
        }
        batch.points.push(AugPoint { x: vec![t], p: p.clone() });
        batch.dfdp_evals += 1;
        Ok(())
    }
}

impl SensitivityProblem for FhnProblem {
    type Solution = Trajectory;

    fn dim_p(&self) -> usize {
        4
    }

    fn spatial_dims(&self) -> usize {
        1
    }

    fn check_params(&self, p: &[f64]) -> Result<()> {
        FhnParams::from_slice(p)?;
        if p.iter().any(|&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::Domain(format!("parameters must be positive, got {p:?}")));
        }
        Ok(())
    }

    fn solve(&self, p: &[f64]) -> Result<Trajectory> {
        self.check_params(p)?;
        fhn_solve(p, self.cfg.ic, self.cfg.t_end, self.cfg.solve_tol)
    }

    fn objective(&self, p: &[f64], sol: &Trajectory) -> Result<f64> {
        self.objective_from(p, sol)
    }

    fn dgdp(&self, p: &[f64]) -> Result<DVector<f64>> {
        self.check_params(p)?;
        Ok(DVector::from_fn(4, |i, _| 2.0 * (p[i].ln() - self.log_median[i]) / p[i]))
    }

    fn candidates(&self) -> &[Vec<f64>] {
        &self.candidates
    }

    fn kernel(&self, hyp: KernelHyper, mode: SensitivityMode) -> Result<JointKernel> {
        if mode == SensitivityMode::Adjoint {
            return Err(Error::Unsupported("probabilistic adjoint mode for the ODE benchmark".into()));
        }
        let hyp = KernelHyper { spatial_dims: 1, rho: self.cfg.rho, ..hyp };
        hyp.validate()?;
        Ok(JointKernel::fhn(hyp))
    }

    fn forward_info(&self, sol: &Trajectory, p: &ParamVec, locations: &[Vec<f64>]) -> Result<InfoBatch> {
        self.check_params(p)?;
        let mut batch = InfoBatch::default();
        for loc in locations {
            if loc.len() != 1 {
                return Err(Error::InvalidInput("time locations are one-dimensional".into()));
            }
            self.info_at(sol, p, loc[0], &mut batch)?;
        }
        Ok(batch)
    }

    fn dgdu_functional(&self, sol: &Trajectory, p: &ParamVec) -> Result<LinearFunctional> {
        let mut l = LinearFunctional::new();
        for (t, w) in self.dgdu_weights(sol)? {
            l.push(&[t], p.clone(), 0, &[], w);
        }
        Ok(l)
    }

    fn exact_gradient_forward(&self, p: &[f64]) -> Result<GradientEval> {
        self.check_params(p)?;
        let sens = fhn_forward_oracle(p, self.cfg.ic, self.cfg.t_end, self.cfg.oracle_tol)?;
        let w = 2.0 * self.misfit_weight();
        let mut grad = self.dgdp(p)?;
        for (&t, &y) in self.data.times.iter().zip(&self.data.values) {
            let ([v, _], s) = sens.at(t)?;
            for c in 0..4 {
                grad[c] += w * (v - y) * s[0][c];
            }
        }
        Ok(GradientEval { grad, jac_evals: sens.jac_evals })
    }

    fn exact_gradient_adjoint(&self, p: &[f64]) -> Result<GradientEval> {
        self.check_params(p)?;
        let tol = self.cfg.oracle_tol;
        let traj = fhn_solve(p, self.cfg.ic, self.cfg.t_end, tol)?;
        let w = 2.0 * self.misfit_weight();
        // Data times in decreasing order, with their misfit jumps.
        let mut jumps: Vec<(f64, f64)> = self
            .data
            .times
            .iter()
            .zip(&self.data.values)
            .map(|(&t, &y)| Ok((t, w * (traj.at(t)?[0] - y))))
            .collect::<Result<_>>()?;
        jumps.sort_by(|a, b| b.0.total_cmp(&a.0));

        let evals = Cell::new(0usize);
        let mut state = [0.0f64; 6]; // λ_v, λ_w, then −∫ λᵀ J_p
        let mut t = self.cfg.t_end;
        let mut ji = 0;
        loop {
            while ji < jumps.len() && jumps[ji].0 >= t - 1e-12 {
                state[0] += jumps[ji].1;
                ji += 1;
            }
            let next = if ji < jumps.len() { jumps[ji].0 } else { 0.0 };
            if t <= 0.0 {
                break;
            }
            let sol = dopri5(
                |s, y, dy| {
                    let uv = traj.at(s).unwrap_or([f64::NAN; 2]);
                    let (ju, jp) = fhn_jacobians(uv[0], uv[1], p);
                    evals.set(evals.get() + 1);
                    dy[0] = -(ju[0][0] * y[0] + ju[1][0] * y[1]);
                    dy[1] = -(ju[0][1] * y[0] + ju[1][1] * y[1]);
                    for c in 0..4 {
                        dy[2 + c] = y[0] * jp[0][c] + y[1] * jp[1][c];
                    }
                },
                t,
                &state,
                next,
                Tolerance::uniform(tol),
                StepLimits::default(),
            )?;
            state.copy_from_slice(sol.final_state());
            t = next;
        }
        let mut grad = self.dgdp(p)?;
        for c in 0..4 {
            grad[c] -= state[2 + c];
        }
        Ok(GradientEval { grad, jac_evals: evals.get() })
    }
}

/// Shared parameter vector from a slice.
pub fn params(p: &[f64]) -> ParamVec {
    Arc::from(p.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rhs_at_origin() {
        let (dv, dw) = fhn_rhs(0.0, 0.0, &P_STAR);
        assert_eq!(dv, 0.5);
        assert!((dw - 0.064).abs() < 1e-15);
    }

    #[test]
    fn rhs_vanishes_at_equilibrium() {
        let p = P_STAR;
        // Reduced cubic along the w-nullcline w = (v + a)/b.
        let h = |v: f64| v - v.powi(3) / 3.0 + p[0] - (v + p[1]) / p[2];
        let (mut lo, mut hi) = (-3.0, 3.0);
        assert!(h(lo) * h(hi) < 0.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if h(lo) * h(mid) <= 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let v = 0.5 * (lo + hi);
        let w = (v + p[1]) / p[2];
        let (dv, dw) = fhn_rhs(v, w, &p);
        assert!(dv.abs() < 1e-10 && dw.abs() < 1e-10);
    }

    #[test]
    fn w_equation_is_affine_in_w() {
        let p = P_STAR;
        let f = |w: f64| fhn_rhs(0.3, w, &p).1;
        let (w1, w2) = (0.7, -1.1);
        assert!((f(w1 + w2) - (f(w1) + f(w2) - f(0.0))).abs() < 1e-15);
    }

    #[test]
    fn jacobians_match_central_differences() {
        let p = [0.6, 0.9, 0.8, 11.0];
        let (v, w) = (0.37, -0.52);
        let (ju, jp) = fhn_jacobians(v, w, &p);
        let h = 1e-6;
        let f = |v: f64, w: f64, p: &[f64]| {
            let (a, b) = fhn_rhs(v, w, p);
            [a, b]
        };
        for r in 0..2 {
            let dv = (f(v + h, w, &p)[r] - f(v - h, w, &p)[r]) / (2.0 * h);
            let dw = (f(v, w + h, &p)[r] - f(v, w - h, &p)[r]) / (2.0 * h);
            assert!((dv - ju[r][0]).abs() < 1e-6 && (dw - ju[r][1]).abs() < 1e-6);
            for c in 0..4 {
                let (mut pp, mut pm) = (p, p);
                pp[c] += h;
                pm[c] -= h;
                let d = (f(v, w, &pp)[r] - f(v, w, &pm)[r]) / (2.0 * h);
                assert!((d - jp[r][c]).abs() < 1e-6, "({r},{c})");
            }
        }
        let (ju0, _) = fhn_jacobians(0.0, 0.3, &p);
        assert_eq!(ju0[0][0], 1.0);
        let (_, jp_star) = fhn_jacobians(0.0, 0.0, &P_STAR);
        assert!((jp_star[1][3] + 0.00512).abs() < 1e-15);
    }

    #[test]
    fn constant_at_equilibrium_initial_condition() {
        // I = 0 and a = 0 make the origin an equilibrium.
        let p = [0.0, 0.0, 0.7, 12.5];
        let traj = fhn_solve(&p, [0.0, 0.0], 20.0, 1e-8).unwrap();
        assert_eq!(traj.at(13.3).unwrap(), [0.0, 0.0]);
    }

    #[test]
    fn tighter_tolerance_changes_little() {
        let a = fhn_solve(&P_STAR, [-1.0, 1.0], 20.0, 1e-8).unwrap();
        let b = fhn_solve(&P_STAR, [-1.0, 1.0], 20.0, 1e-10).unwrap();
        for t in 1..=20 {
            let t = t as f64;
            assert!((a.at(t).unwrap()[0] - b.at(t).unwrap()[0]).abs() < 1e-6);
        }
    }

    #[test]
    fn noiseless_data_equals_solution() {
        let cfg = FhnConfig { noise: 0.0, ..Default::default() };
        let d = fhn_generate_data(&P_STAR, &cfg, 1).unwrap();
        let traj = fhn_solve(&P_STAR, cfg.ic, cfg.t_end, cfg.oracle_tol).unwrap();
        for (t, y) in d.times.iter().zip(&d.values) {
            assert_eq!(*y, traj.at(*t).unwrap()[0]);
        }
    }

    #[test]
    fn data_is_reproducible() {
        let cfg = FhnConfig::default();
        assert_eq!(fhn_generate_data(&P_STAR, &cfg, 9).unwrap(), fhn_generate_data(&P_STAR, &cfg, 9).unwrap());
    }

    #[test]
    fn prior_gradient_vanishes_at_median() {
        let prob = FhnProblem::standard(FhnConfig::default(), 1).unwrap();
        assert!(prob.dgdp(&PRIOR_MEDIAN).unwrap().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn noiseless_objective_at_truth_is_prior_term() {
        let cfg = FhnConfig { noise: 0.0, ..Default::default() };
        let data = fhn_generate_data(&P_STAR, &cfg, 0).unwrap();
        let prob = FhnProblem::new(FhnConfig::default(), data).unwrap();
        let g = prob.objective_at_tol(&P_STAR, 1e-10).unwrap();
        let prior: f64 = P_STAR.iter().zip(&PRIOR_MEDIAN).map(|(p, m)| (p.ln() - m.ln()).powi(2)).sum();
        assert!((g - prior).abs() < 1e-9);
    }

    #[test]
    fn nonpositive_parameters_are_rejected() {
        let prob = FhnProblem::standard(FhnConfig::default(), 1).unwrap();
        assert!(matches!(prob.dgdp(&[0.5, -0.1, 0.7, 12.5]), Err(Error::Domain(_))));
    }

    #[test]
    fn sensitivities_start_at_zero() {
        let s = fhn_forward_oracle(&P_STAR, [-1.0, 1.0], 20.0, 1e-10).unwrap();
        let (_, s0) = s.at(0.0).unwrap();
        assert!(s0.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn sensitivity_matches_solver_differences() {
        let s = fhn_forward_oracle(&P_STAR, [-1.0, 1.0], 20.0, 1e-11).unwrap();
        let (_, s5) = s.at(5.0).unwrap();
        for c in 0..4 {
            let h = 1e-5;
            let (mut pp, mut pm) = (P_STAR, P_STAR);
            pp[c] += h;
            pm[c] -= h;
            let up = fhn_solve(&pp, [-1.0, 1.0], 20.0, 1e-12).unwrap().at(5.0).unwrap();
            let um = fhn_solve(&pm, [-1.0, 1.0], 20.0, 1e-12).unwrap().at(5.0).unwrap();
            for r in 0..2 {
                let fd = (up[r] - um[r]) / (2.0 * h);
                assert!((fd - s5[r][c]).abs() < 1e-4, "({r},{c}): {fd} vs {}", s5[r][c]);
            }
        }
    }

    #[test]
    fn forward_info_value_is_parameter_jacobian() {
        let prob = FhnProblem::standard(FhnConfig::default(), 3).unwrap();
        let p = params(&P_STAR);
        let traj = prob.solve(&P_STAR).unwrap();
        let batch = prob.forward_info(&traj, &p, &[vec![4.0]]).unwrap();
        let [v, w] = traj.at(4.0).unwrap();
        let (_, jp) = fhn_jacobians(v, w, &P_STAR);
        assert_eq!(batch.len(), 2);
        assert_eq!(&batch.values[..4], &jp[0]);
        assert_eq!(&batch.values[4..], &jp[1]);
        assert!(prob.forward_info(&traj, &p, &[vec![25.0]]).is_err());
    }
}
