//! Probabilistic forward and adjoint sensitivity analysis.
//!
//! A [`SensitivityProblem`] supplies the constraint derivatives, the quantity of
//! interest and a numerical solver. From these, the functions here build
//! information functionals, condition a [`GaussianState`] on them and push the
//! posterior through the chain rule to obtain a Gaussian over `dg/dp`.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::gp::{AugPoint, FiniteGaussian, GaussianState, JitterPolicy, LinearFunctional, ParamVec, QueryCache};
use crate::kernels::{JointKernel, KernelHyper};
use crate::{Error, Result};

/// Which sensitivity object the GP models.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SensitivityMode {
    /// The solution derivative `dU/dp`, one GP column per parameter.
    Forward,
    /// The adjoint variable `λ`, a single GP column.
    Adjoint,
}

impl std::str::FromStr for SensitivityMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forward" => Ok(Self::Forward),
            "adjoint" => Ok(Self::Adjoint),
            other => Err(Error::Config(format!("unknown sensitivity mode '{other}'"))),
        }
    }
}

/// Covariance used when pushing the adjoint posterior forward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AdjointCovariance {
    /// Posterior covariance of the adjoint GP.
    #[default]
    Posterior,
    /// Prior covariance, as the pushforward formula is literally printed.
    Prior,
}

/// Information functionals with their observed values.
#[derive(Debug, Clone, Default)]
pub struct InfoBatch {
    pub functionals: Vec<LinearFunctional>,
    /// Row-major `functionals.len() × ncols`.
    pub values: Vec<f64>,
    /// Augmented points the batch was built at.
    pub points: Vec<AugPoint>,
    /// Number of `∂F/∂p` evaluations spent building the batch.
    pub dfdp_evals: usize,
}

impl InfoBatch {
    pub fn len(&self) -> usize {
        self.functionals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.functionals.is_empty()
    }
}

/// A classical gradient with its cost.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientEval {
    pub grad: DVector<f64>,
    /// Jacobian (`∂f/∂u`, `∂f/∂p`) evaluations spent.
    pub jac_evals: usize,
}

/// A differential-equation constrained objective together with its derivatives.
pub trait SensitivityProblem {
    /// Numerical solution `Û(p)`.
    type Solution;

    fn dim_p(&self) -> usize;

    /// Number of domain coordinates of an information location.
    fn spatial_dims(&self) -> usize;

    /// Checks that `p` lies in the admissible parameter region.
    fn check_params(&self, p: &[f64]) -> Result<()>;

    fn solve(&self, p: &[f64]) -> Result<Self::Solution>;

    /// Objective `g(Û(p), p)`.
    fn objective(&self, p: &[f64], sol: &Self::Solution) -> Result<f64>;

    /// `∂g/∂p` at fixed solution.
    fn dgdp(&self, p: &[f64]) -> Result<DVector<f64>>;

    /// Admissible information locations.
    fn candidates(&self) -> &[Vec<f64>];

    /// Candidates that must be conditioned on first at every new parameter.
    fn priority_candidates(&self, _mode: SensitivityMode) -> &[usize] {
        &[]
    }

    /// Prior kernel for the modelled sensitivity object.
    fn kernel(&self, hyp: KernelHyper, mode: SensitivityMode) -> Result<JointKernel>;

    /// Forward information functionals: the linearized constraint applied to `dU/dp`
    /// at each location, with one value per parameter column.
    fn forward_info(&self, sol: &Self::Solution, p: &ParamVec, locations: &[Vec<f64>]) -> Result<InfoBatch>;

    /// `∂g/∂u` as a functional on one column of the forward sensitivity.
    fn dgdu_functional(&self, sol: &Self::Solution, p: &ParamVec) -> Result<LinearFunctional>;

    /// Adjoint information functionals at the given locations.
    fn adjoint_info(&self, _sol: &Self::Solution, _p: &ParamVec, _locations: &[Vec<f64>]) -> Result<InfoBatch> {
        Err(Error::Unsupported("adjoint information for this problem".into()))
    }

    /// The projections `β ↦ ⟨∂F/∂p_i, β⟩`, one per parameter.
    fn adjoint_projection(&self, _sol: &Self::Solution, _p: &ParamVec) -> Result<Vec<LinearFunctional>> {
        Err(Error::Unsupported("adjoint projection for this problem".into()))
    }

    /// Classical gradient via the forward sensitivity equations.
    fn exact_gradient_forward(&self, p: &[f64]) -> Result<GradientEval>;

    /// Classical gradient via one adjoint solve.
    fn exact_gradient_adjoint(&self, p: &[f64]) -> Result<GradientEval>;

    /// Cost of one classical gradient in the same currency as
    /// [`InfoBatch::dfdp_evals`]; defaults to the forward oracle's count.
    fn classical_gradient(&self, p: &[f64]) -> Result<GradientEval> {
        self.exact_gradient_forward(p)
    }
}

/// Unconditioned GP over the sensitivity object of `problem`.
pub fn prior_state<P: SensitivityProblem>(problem: &P, hyp: KernelHyper, mode: SensitivityMode) -> Result<GaussianState> {
    let kernel = problem.kernel(hyp, mode)?;
    let ncols = match mode {
        SensitivityMode::Forward => problem.dim_p(),
        SensitivityMode::Adjoint => 1,
    };
    GaussianState::new(kernel, ncols)
}

/// Forward information batch at `locations`.
pub fn forward_info<P: SensitivityProblem>(
    problem: &P,
    sol: &P::Solution,
    p: &ParamVec,
    locations: &[Vec<f64>],
) -> Result<InfoBatch> {
    problem.forward_info(sol, p, locations)
}

/// Adjoint information batch at `locations`.
pub fn adjoint_info<P: SensitivityProblem>(
    problem: &P,
    sol: &P::Solution,
    p: &ParamVec,
    locations: &[Vec<f64>],
) -> Result<InfoBatch> {
    problem.adjoint_info(sol, p, locations)
}

/// Information batch for `mode`.
pub fn info<P: SensitivityProblem>(
    problem: &P,
    sol: &P::Solution,
    p: &ParamVec,
    locations: &[Vec<f64>],
    mode: SensitivityMode,
) -> Result<InfoBatch> {
    match mode {
        SensitivityMode::Forward => problem.forward_info(sol, p, locations),
        SensitivityMode::Adjoint => problem.adjoint_info(sol, p, locations),
    }
}

/// Condition a state on a batch, recording its augmented points.
pub fn condition_on(state: &GaussianState, batch: &InfoBatch, policy: JitterPolicy) -> Result<(GaussianState, usize)> {
    let (s, dropped) = state.condition_with(&batch.functionals, &batch.values, &batch.points, policy)?;
    Ok((s, dropped.len()))
}

/// Gradient pushforward at a fixed `p`, reusable across a growing state.
#[derive(Debug, Clone)]
pub struct Pushforward {
    mode: SensitivityMode,
    covariance: AdjointCovariance,
    queries: Vec<LinearFunctional>,
    dgdp: DVector<f64>,
    cache: Option<QueryCache>,
}

impl Pushforward {
    pub fn new<P: SensitivityProblem>(
        problem: &P,
        sol: &P::Solution,
        p: &ParamVec,
        mode: SensitivityMode,
        covariance: AdjointCovariance,
    ) -> Result<Self> {
        let dgdp = problem.dgdp(p)?;
        let queries = match mode {
            SensitivityMode::Forward => {
                let l = problem.dgdu_functional(sol, p)?;
                if l.terms.is_empty() {
                    Vec::new()
                } else {
                    vec![l]
                }
            }
            SensitivityMode::Adjoint => problem.adjoint_projection(sol, p)?,
        };
        Ok(Self { mode, covariance, queries, dgdp, cache: None })
    }

    /// Gradient distribution under `state`.
    pub fn eval(&mut self, state: &GaussianState) -> Result<FiniteGaussian> {
        let dim = self.dgdp.len();
        match self.mode {
            SensitivityMode::Forward if state.ncols() != dim => {
                return Err(Error::InvalidInput("state does not model forward sensitivities".into()))
            }
            SensitivityMode::Adjoint if state.ncols() != 1 => {
                return Err(Error::InvalidInput("state does not model an adjoint variable".into()))
            }
            _ => {}
        }
        if self.queries.is_empty() {
            return FiniteGaussian::new(self.dgdp.clone(), DMatrix::zeros(dim, dim));
        }
        if self.cache.is_none() {
            self.cache = Some(state.query_cache(&self.queries)?);
        }
        let post = state.posterior_cached(self.cache.as_mut().expect("cache initialized"))?;
        match self.mode {
            SensitivityMode::Forward => {
                let mean = DVector::from_fn(dim, |c, _| post.mean[(0, c)] + self.dgdp[c]);
                let var = post.cov[(0, 0)].max(0.0);
                FiniteGaussian::new(mean, DMatrix::identity(dim, dim) * var)
            }
            SensitivityMode::Adjoint => {
                let mean = DVector::from_fn(dim, |i, _| self.dgdp[i] - post.mean[(i, 0)]);
                let cov = match self.covariance {
                    AdjointCovariance::Posterior => post.cov,
                    AdjointCovariance::Prior => post.prior_cov,
                };
                FiniteGaussian::new(mean, cov)
            }
        }
    }
}

/// Forward-mode gradient distribution: mean `∂g/∂u·E[∂U/∂p] + ∂g/∂p`, with the
/// shared column variance of `∂g/∂u·∂U/∂p` on the diagonal.
pub fn pushforward_forward<P: SensitivityProblem>(
    state: &GaussianState,
    problem: &P,
    sol: &P::Solution,
    p: &ParamVec,
) -> Result<FiniteGaussian> {
    Pushforward::new(problem, sol, p, SensitivityMode::Forward, AdjointCovariance::Posterior)?.eval(state)
}

/// Adjoint-mode gradient distribution: mean `∂g/∂p − 𝒥 E[λ]`.
pub fn pushforward_adjoint<P: SensitivityProblem>(
    state: &GaussianState,
    problem: &P,
    sol: &P::Solution,
    p: &ParamVec,
    covariance: AdjointCovariance,
) -> Result<FiniteGaussian> {
    Pushforward::new(problem, sol, p, SensitivityMode::Adjoint, covariance)?.eval(state)
}

pub fn pushforward<P: SensitivityProblem>(
    state: &GaussianState,
    problem: &P,
    sol: &P::Solution,
    p: &ParamVec,
    mode: SensitivityMode,
) -> Result<FiniteGaussian> {
    match mode {
        SensitivityMode::Forward => pushforward_forward(state, problem, sol, p),
        SensitivityMode::Adjoint => pushforward_adjoint(state, problem, sol, p, AdjointCovariance::Posterior),
    }
}

/// Root trace of a pushforward covariance.
pub fn gradient_metric(dist: &FiniteGaussian) -> f64 {
    dist.cov.diagonal().iter().map(|v| v.max(0.0)).sum::<f64>().sqrt()
}

/// Result of a space-filling selection.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Selection {
    /// Selected candidate indices, in selection order.
    pub indices: Vec<usize>,
    /// Joint-space distance of each selection to everything chosen before it.
    pub min_dist: Vec<f64>,
    /// Set when the best available candidate already coincides with a used point.
    pub saturated: bool,
}

impl Selection {
    /// Indices with positive distance to all previous information.
    pub fn informative(&self) -> Vec<usize> {
        self.indices
            .iter()
            .zip(&self.min_dist)
            .filter(|(_, &d)| d > 0.0)
            .map(|(&i, _)| i)
            .collect()
    }
}

/// Greedy maximin selection of `batch_size` candidates at parameter `p`.
///
/// Each pick maximizes the minimum Euclidean distance in joint (location,
/// parameter) space to the state's recorded points and to earlier picks; ties go
/// to the lowest index. Priority candidates that are not yet used at `p` are
/// taken first, in order.
pub fn select_info(
    state: &GaussianState,
    p: &[f64],
    candidates: &[Vec<f64>],
    batch_size: usize,
    priority: &[usize],
) -> Selection {
    let mut sel = Selection::default();
    if candidates.is_empty() || batch_size == 0 {
        return sel;
    }
    let mut d2 = state.history_min_dist2(candidates, p);
    let mut taken = vec![false; candidates.len()];
    while sel.indices.len() < batch_size.min(candidates.len()) {
        let pick = priority
            .iter()
            .copied()
            .find(|&i| i < candidates.len() && !taken[i] && d2[i] > 0.0)
            .or_else(|| {
                let mut best: Option<usize> = None;
                for i in 0..candidates.len() {
                    if taken[i] {
                        continue;
                    }
                    if best.is_none_or(|b| d2[i] > d2[b]) {
                        best = Some(i);
                    }
                }
                best
            });
        let Some(i) = pick else { break };
        let d = d2[i].sqrt();
        if d == 0.0 {
            sel.saturated = true;
        }
        sel.indices.push(i);
        sel.min_dist.push(d);
        taken[i] = true;
        let xi = &candidates[i];
        for (j, c) in candidates.iter().enumerate() {
            let dd: f64 = c.iter().zip(xi).map(|(a, b)| (a - b) * (a - b)).sum();
            if dd < d2[j] {
                d2[j] = dd;
            }
        }
    }
    sel
}

/// Classical forward-mode gradient.
pub fn exact_gradient_forward<P: SensitivityProblem>(problem: &P, p: &[f64]) -> Result<DVector<f64>> {
    problem.exact_gradient_forward(p).map(|g| g.grad)
}

/// Classical adjoint-mode gradient.
pub fn exact_gradient_adjoint<P: SensitivityProblem>(problem: &P, p: &[f64]) -> Result<DVector<f64>> {
    problem.exact_gradient_adjoint(p).map(|g| g.grad)
}

/// Convert a slice into a shared parameter vector.
pub fn param_vec(p: &[f64]) -> ParamVec {
    Arc::from(p.to_vec())
}
