//! Probabilistic gradient descent, its line search, and the classical baseline.

use std::time::Instant;

use nalgebra::DVector;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::gp::{FiniteGaussian, GaussianState, JitterPolicy};
use crate::kernels::KernelHyper;
use crate::sensitivity::{
    condition_on, gradient_metric, info, param_vec, prior_state, select_info, AdjointCovariance, Pushforward,
    SensitivityMode, SensitivityProblem,
};
use crate::{Error, Result};

/// Optimizer settings.
#[derive(Debug, Clone, PartialEq)]
pub struct PgdConfig {
    /// Step sizes below this signal convergence.
    pub eps: f64,
    pub delta0: f64,
    pub delta_min: f64,
    /// Shrink factor for `δ` after a failed line search.
    pub tau1: f64,
    /// Shrink factor for `γ` on every rejected step.
    pub tau2: f64,
    /// Armijo constant.
    pub c: f64,
    pub p_crit: f64,
    pub gamma0: f64,
    pub gamma_min: f64,
    pub gram_limit: usize,
    pub max_iters: usize,
    /// Locations requested per conditioning round.
    pub info_batch: usize,
    pub jitter: JitterPolicy,
    /// Use the acceptance test exactly as printed in the original pseudocode
    /// (accept on low probability).
    pub literal_pls: bool,
}

impl Default for PgdConfig {
    fn default() -> Self {
        Self {
            eps: 1e-6,
            delta0: 1e-3,
            delta_min: 1e-6,
            tau1: 0.1,
            tau2: 0.5,
            c: 0.5,
            p_crit: 0.8,
            gamma0: 1.0,
            gamma_min: 1e-10,
            gram_limit: 10_000,
            max_iters: 2000,
            info_batch: 10,
            jitter: JitterPolicy::Escalate,
            literal_pls: false,
        }
    }
}

impl PgdConfig {
    pub fn validate(&self) -> Result<()> {
        let frac = |v: f64| v > 0.0 && v < 1.0;
        let ok = self.eps > 0.0
            && self.delta_min > 0.0
            && self.delta_min < self.delta0
            && self.gamma_min > 0.0
            && self.gamma_min < self.gamma0
            && frac(self.tau1)
            && frac(self.tau2)
            && frac(self.c)
            && frac(self.p_crit)
            && self.info_batch > 0
            && self.gram_limit > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings: {self:?}")))
        }
    }
}

/// One row of an optimizer trace.
#[derive(Debug, Clone, PartialEq)]
pub struct IterRecord {
    pub iter: usize,
    pub p: Vec<f64>,
    pub g: f64,
    pub gamma: f64,
    pub delta: f64,
    /// Information functionals requested so far.
    pub info_dim: usize,
    /// Functionals kept in the factorization.
    pub gram_dim: usize,
    /// Cumulative `∂F/∂p` (or Jacobian) evaluations.
    pub dfdp_evals: usize,
    /// Conditioning calls made during this iteration.
    pub conditioning_calls: usize,
    pub wall_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Termination {
    Converged,
    MaxIters,
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct OptTrace {
    pub records: Vec<IterRecord>,
    /// Iteration at which the run fell back to exact gradients.
    pub switch_iter: Option<usize>,
}

impl OptTrace {
    pub fn last(&self) -> Option<&IterRecord> {
        self.records.last()
    }

    /// Total evaluations charged over the run.
    pub fn total_dfdp_evals(&self) -> usize {
        self.last().map_or(0, |r| r.dfdp_evals)
    }

    /// Number of steps taken (the initial point is record 0).
    pub fn iterations(&self) -> usize {
        self.records.len().saturating_sub(1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptOutcome {
    pub p: Vec<f64>,
    pub g: f64,
    pub trace: OptTrace,
    pub termination: Termination,
}

/// Result of a line search.
#[derive(Debug, Clone, PartialEq)]
pub struct LineSearch {
    pub gamma: f64,
    pub accepted: bool,
    /// Objective at the accepted point (the start value if none was accepted).
    pub g: f64,
    pub p: Vec<f64>,
    pub evaluations: usize,
}

/// Unit descent direction `−m/‖m‖`, or `None` for a vanishing mean.
pub fn descent_direction(mean: &DVector<f64>) -> Option<DVector<f64>> {
    let n = mean.norm();
    (n > 0.0 && n.is_finite()).then(|| -mean / n)
}

/// `ℙ(Z ≥ Δg)` for `Z = c γ Xᵀs`, `X ~ dist`: the probability that the Armijo
/// condition holds under the gradient posterior.
pub fn acceptance_probability(dist: &FiniteGaussian, s: &DVector<f64>, c: f64, gamma: f64, dg: f64) -> f64 {
    let mean = c * gamma * dist.mean.dot(s);
    let var = (c * gamma).powi(2) * (s.transpose() * &dist.cov * s)[(0, 0)];
    if !(var > 0.0) || !var.is_finite() {
        return if mean >= dg { 1.0 } else { 0.0 };
    }
    let z = Normal::new(mean, var.sqrt()).expect("positive finite variance");
    z.sf(dg)
}

/// Backtracking line search along `s` from `p` with a probabilistic Armijo test.
///
/// `objective` returns `None` for points where `g` cannot be evaluated; those
/// count as rejections.
pub fn pls(
    p: &[f64],
    g_p: f64,
    dist: &FiniteGaussian,
    s: &DVector<f64>,
    cfg: &PgdConfig,
    mut objective: impl FnMut(&[f64]) -> Option<f64>,
) -> LineSearch {
    let mut gamma = cfg.gamma0;
    let mut evaluations = 0;
    while gamma >= cfg.gamma_min {
        let cand: Vec<f64> = p.iter().zip(s.iter()).map(|(a, b)| a + gamma * b).collect();
        evaluations += 1;
        if let Some(g) = objective(&cand).filter(|g| g.is_finite()) {
            if g <= g_p {
                let prob = acceptance_probability(dist, s, cfg.c, gamma, g - g_p);
                let pass = if cfg.literal_pls { prob < cfg.p_crit } else { prob >= cfg.p_crit };
                if pass {
                    return LineSearch { gamma, accepted: true, g, p: cand, evaluations };
                }
            }
        }
        gamma *= cfg.tau2;
    }
    LineSearch { gamma, accepted: false, g: g_p, p: p.to_vec(), evaluations }
}

fn objective_at<P: SensitivityProblem>(problem: &P, p: &[f64]) -> Option<f64> {
    problem.solve(p).and_then(|sol| problem.objective(p, &sol)).ok()
}

/// Outcome of one gradient request.
enum JacStep {
    Step(LineSearch),
    Converged,
    GramLimit,
}

/// Mutable bookkeeping shared by the probabilistic iterations.
struct ProbState<'a> {
    state: GaussianState,
    mode: SensitivityMode,
    info_dim: usize,
    dfdp_evals: usize,
    cfg: &'a PgdConfig,
}

impl ProbState<'_> {
    /// Gather information until the gradient metric at `p` is at most `δ` (or no
    /// informative location is left), then line search; shrink `δ` on failure.
    fn informed_step<P: SensitivityProblem>(&mut self, problem: &P, p: &[f64], g_p: f64, calls: &mut usize) -> Result<(JacStep, f64)> {
        let pv = param_vec(p);
        let sol = problem.solve(p)?;
        let mut delta = self.cfg.delta0;
        let mut push = Pushforward::new(problem, &sol, &pv, self.mode, AdjointCovariance::Posterior)?;
        if self.mode == SensitivityMode::Adjoint {
            // Building the projection evaluates `∂F/∂p` once at `p`.
            self.dfdp_evals += 1;
        }
        loop {
            let dist = loop {
                let dist = push.eval(&self.state)?;
                if gradient_metric(&dist) <= delta {
                    break dist;
                }
                let sel = select_info(
                    &self.state,
                    p,
                    problem.candidates(),
                    self.cfg.info_batch,
                    problem.priority_candidates(self.mode),
                );
                let picks = sel.informative();
                if picks.is_empty() {
                    break dist;
                }
                let locs: Vec<Vec<f64>> = picks.iter().map(|&i| problem.candidates()[i].clone()).collect();
                let batch = info(problem, &sol, &pv, &locs, self.mode)?;
                if self.state.dim() + batch.len() > self.cfg.gram_limit {
                    return Ok((JacStep::GramLimit, delta));
                }
                let (next, dropped) = match condition_on(&self.state, &batch, self.cfg.jitter) {
                    Err(Error::SingularInformation(msg)) if self.cfg.jitter == JitterPolicy::Escalate => {
                        log::warn!("{msg}; retrying without dependent functionals");
                        condition_on(&self.state, &batch, JitterPolicy::DropDependent)?
                    }
                    r => r?,
                };
                self.state = next;
                self.info_dim += batch.len() - dropped;
                self.dfdp_evals += batch.dfdp_evals;
                *calls += 1;
            };
            let Some(s) = descent_direction(&dist.mean) else {
                return Ok((JacStep::Converged, delta));
            };
            let ls = pls(p, g_p, &dist, &s, self.cfg, |q| objective_at(problem, q));
            if ls.accepted && ls.gamma >= self.cfg.eps {
                return Ok((JacStep::Step(ls), delta));
            }
            if delta <= self.cfg.delta_min {
                return Ok((JacStep::Converged, delta));
            }
            delta = (delta * self.cfg.tau1).max(self.cfg.delta_min);
        }
    }
}

/// Probabilistic gradient descent from `p0`.
///
/// Falls back to exact gradients once the Gram matrix would exceed
/// `cfg.gram_limit`.
pub fn pgd<P: SensitivityProblem>(
    problem: &P,
    p0: &[f64],
    hyp: KernelHyper,
    mode: SensitivityMode,
    cfg: &PgdConfig,
) -> Result<OptOutcome> {
    cfg.validate()?;
    problem.check_params(p0)?;
    let start = Instant::now();
    let state = prior_state(problem, hyp, mode)?;
    let mut ps = ProbState { state, mode, info_dim: 0, dfdp_evals: 0, cfg };
    let mut p = p0.to_vec();
    let mut g = objective_at(problem, &p).ok_or_else(|| Error::Numerical("objective undefined at start".into()))?;
    let mut trace = OptTrace::default();
    let record = |trace: &mut OptTrace, iter, p: &[f64], g, gamma, delta, ps: &ProbState, calls| {
        trace.records.push(IterRecord {
            iter,
            p: p.to_vec(),
            g,
            gamma,
            delta,
            info_dim: ps.info_dim,
            gram_dim: ps.state.dim(),
            dfdp_evals: ps.dfdp_evals,
            conditioning_calls: calls,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        })
    };
    record(&mut trace, 0, &p, g, 0.0, cfg.delta0, &ps, 0);
    for iter in 1..=cfg.max_iters {
        let mut calls = 0;
        let step = match ps.informed_step(problem, &p, g, &mut calls) {
            Ok(s) => s,
            Err(e) => return Ok(OptOutcome { p, g, trace, termination: Termination::Failed(e.to_string()) }),
        };
        match step {
            (JacStep::Step(ls), delta) => {
                p = ls.p;
                g = ls.g;
                record(&mut trace, iter, &p, g, ls.gamma, delta, &ps, calls);
            }
            (JacStep::Converged, _) => return Ok(OptOutcome { p, g, trace, termination: Termination::Converged }),
            (JacStep::GramLimit, _) => {
                log::info!("gram limit reached at iteration {iter}; switching to exact gradients");
                trace.switch_iter = Some(iter);
                let counters = Counters { info_dim: ps.info_dim, gram_dim: ps.state.dim(), dfdp_evals: ps.dfdp_evals };
                return Ok(classical_loop(problem, p, g, iter, cfg, trace, counters, start));
            }
        }
    }
    Ok(OptOutcome { p, g, trace, termination: Termination::MaxIters })
}

/// Classical gradient descent with exact gradients and backtracking.
pub fn gd<P: SensitivityProblem>(problem: &P, p0: &[f64], cfg: &PgdConfig) -> Result<OptOutcome> {
    cfg.validate()?;
    problem.check_params(p0)?;
    let start = Instant::now();
    let g = objective_at(problem, p0).ok_or_else(|| Error::Numerical("objective undefined at start".into()))?;
    let mut trace = OptTrace::default();
    trace.records.push(IterRecord {
        iter: 0,
        p: p0.to_vec(),
        g,
        gamma: 0.0,
        delta: 0.0,
        info_dim: 0,
        gram_dim: 0,
        dfdp_evals: 0,
        conditioning_calls: 0,
        wall_ms: 0.0,
    });
    Ok(classical_loop(problem, p0.to_vec(), g, 1, cfg, trace, Counters::default(), start))
}

#[derive(Debug, Clone, Copy, Default)]
struct Counters {
    info_dim: usize,
    gram_dim: usize,
    dfdp_evals: usize,
}

#[allow(clippy::too_many_arguments)]
fn classical_loop<P: SensitivityProblem>(
    problem: &P,
    mut p: Vec<f64>,
    mut g: f64,
    first_iter: usize,
    cfg: &PgdConfig,
    mut trace: OptTrace,
    counters: Counters,
    start: Instant,
) -> OptOutcome {
    let Counters { info_dim, gram_dim, dfdp_evals: mut evals } = counters;
    let delta = trace.last().map_or(0.0, |r| r.delta);
    for iter in first_iter..=cfg.max_iters {
        let grad = match problem.classical_gradient(&p) {
            Ok(ge) => ge,
            Err(e) => return OptOutcome { p, g, trace, termination: Termination::Failed(e.to_string()) },
        };
        evals += grad.jac_evals;
        let Some(s) = descent_direction(&grad.grad) else {
            return OptOutcome { p, g, trace, termination: Termination::Converged };
        };
        let n = grad.grad.len();
        let exact = FiniteGaussian { mean: grad.grad, cov: nalgebra::DMatrix::zeros(n, n) };
        let ls = pls(&p, g, &exact, &s, cfg, |q| objective_at(problem, q));
        if !ls.accepted || ls.gamma < cfg.eps {
            return OptOutcome { p, g, trace, termination: Termination::Converged };
        }
        p = ls.p;
        g = ls.g;
        trace.records.push(IterRecord {
            iter,
            p: p.clone(),
            g,
            gamma: ls.gamma,
            delta,
            info_dim,
            gram_dim,
            dfdp_evals: evals,
            conditioning_calls: 0,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }
    OptOutcome { p, g, trace, termination: Termination::MaxIters }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    fn exact(mean: &[f64]) -> FiniteGaussian {
        let n = mean.len();
        FiniteGaussian { mean: DVector::from_column_slice(mean), cov: DMatrix::zeros(n, n) }
    }

    #[test]
    fn quadratic_step_is_accepted_at_one() {
        let cfg = PgdConfig::default();
        let s = DVector::from_vec(vec![-1.0]);
        let ls = pls(&[1.0], 1.0, &exact(&[2.0]), &s, &cfg, |q| Some(q[0] * q[0]));
        assert!(ls.accepted);
        assert_eq!(ls.gamma, 1.0);
        assert_eq!(ls.p, vec![0.0]);
    }

    #[test]
    fn ascent_direction_backtracks_to_floor() {
        let cfg = PgdConfig::default();
        let s = DVector::from_vec(vec![1.0]);
        let ls = pls(&[1.0], 1.0, &exact(&[2.0]), &s, &cfg, |q| Some(q[0] * q[0]));
        assert!(!ls.accepted);
        assert!(ls.gamma < cfg.gamma_min);
        assert!(ls.gamma < cfg.eps);
    }

    #[test]
    fn unevaluable_points_are_rejected() {
        let cfg = PgdConfig::default();
        let s = DVector::from_vec(vec![-1.0]);
        let ls = pls(&[1.0], 1.0, &exact(&[2.0]), &s, &cfg, |q| (q[0] > 0.2).then(|| q[0] * q[0]));
        assert!(ls.accepted);
        assert_eq!(ls.gamma, 0.5);
    }

    #[test]
    fn literal_mode_inverts_the_test() {
        let cfg = PgdConfig { literal_pls: true, ..Default::default() };
        let s = DVector::from_vec(vec![-1.0]);
        let ls = pls(&[1.0], 1.0, &exact(&[2.0]), &s, &cfg, |q| Some(q[0] * q[0]));
        assert!(!ls.accepted);
    }

    #[test]
    fn acceptance_probability_matches_sampling() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mean = DVector::from_vec(vec![1.0, -0.5]);
        let cov = DMatrix::from_row_slice(2, 2, &[0.8, 0.3, 0.3, 0.5]);
        let dist = FiniteGaussian { mean: mean.clone(), cov: cov.clone() };
        let s = descent_direction(&mean).unwrap();
        let (c, gamma, dg) = (0.5, 0.7, -0.3);
        let prob = acceptance_probability(&dist, &s, c, gamma, dg);
        let l = cov.cholesky().unwrap().l();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let hits = (0..n)
            .filter(|_| {
                let xi = DVector::from_fn(2, |_, _| StandardNormal.sample(&mut rng));
                let x = &mean + &l * xi;
                c * gamma * x.dot(&s) >= dg
            })
            .count();
        assert!((prob - hits as f64 / n as f64).abs() < 1e-2);
    }

    #[test]
    fn direction_is_scale_invariant() {
        let m = DVector::from_vec(vec![3.0, -4.0]);
        let a = descent_direction(&m).unwrap();
        let b = descent_direction(&(m * 17.0)).unwrap();
        assert!((a - b).norm() < 1e-15);
        assert!(descent_direction(&DVector::zeros(2)).is_none());
    }

    #[test]
    fn config_validation() {
        assert!(PgdConfig::default().validate().is_ok());
        assert!(PgdConfig { tau1: 1.0, ..Default::default() }.validate().is_err());
        assert!(PgdConfig { delta_min: 1.0, delta0: 0.5, ..Default::default() }.validate().is_err());
    }
}
