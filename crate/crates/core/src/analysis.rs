//! Numerical checks of the error theory: local error bounds, Gaussian
//! Wasserstein distances, robustness to inexact solves, and finite differences.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::gp::{apply_pair, FiniteGaussian, GaussianState, LinearFunctional};
use crate::kernels::{JointKernel, KernelHyper, Warp};
use crate::sensitivity::{condition_on, info, param_vec, prior_state, pushforward, SensitivityMode, SensitivityProblem};
use crate::gp::JitterPolicy;
use crate::{Error, Result};

/// Central differences with per-component step `h·(1 + |p_i|)`.
pub fn finite_diff_gradient(mut g: impl FnMut(&[f64]) -> Result<f64>, p: &[f64], h: f64) -> Result<DVector<f64>> {
    let mut out = DVector::zeros(p.len());
    let mut q = p.to_vec();
    for i in 0..p.len() {
        let step = h * (1.0 + p[i].abs());
        q[i] = p[i] + step;
        let up = g(&q)?;
        q[i] = p[i] - step;
        let down = g(&q)?;
        q[i] = p[i];
        let d = (up - down) / (2.0 * step);
        if !d.is_finite() {
            return Err(Error::Numerical(format!("non-finite difference in component {i}")));
        }
        out[i] = d;
    }
    Ok(out)
}

/// Both sides of the local error bound for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundReport {
    /// `|𝓛ā − 𝓛u†|`.
    pub lhs: f64,
    /// Posterior standard deviation of `𝓛u`.
    pub power: f64,
    /// Native-space norm of `u† − a` (the prior mean is zero).
    pub native_norm: f64,
    pub satisfied: bool,
}

impl BoundReport {
    pub fn rhs(&self) -> f64 {
        self.power * self.native_norm
    }
}

pub const BOUND_TOL: f64 = 1e-8;

/// Check `|𝓛ā − 𝓛u†| ≤ (𝓛C̄𝓛*)^{1/2} ‖u†‖` for the in-space truth
/// `u† = Σ_k c_k C ℓ_k*` after conditioning a zero-mean prior on `𝓘u†`.
pub fn local_error_bound_check(
    kernel: &JointKernel,
    info: &[LinearFunctional],
    query: &LinearFunctional,
    centers: &[LinearFunctional],
    coeffs: &[f64],
) -> Result<BoundReport> {
    if centers.len() != coeffs.len() {
        return Err(Error::InvalidInput("one coefficient per center required".into()));
    }
    let apply_truth = |l: &LinearFunctional| -> Result<f64> {
        centers.iter().zip(coeffs).try_fold(0.0, |acc, (z, &c)| Ok(acc + c * apply_pair(kernel, l, z)?))
    };
    let mut norm2 = 0.0;
    for (a, ca) in centers.iter().zip(coeffs) {
        for (b, cb) in centers.iter().zip(coeffs) {
            norm2 += ca * cb * apply_pair(kernel, a, b)?;
        }
    }
    let native_norm = norm2.max(0.0).sqrt();
    let truth_query = apply_truth(query)?;
    let (mean, var) = if info.is_empty() {
        (0.0, apply_pair(kernel, query, query)?)
    } else {
        let values = info.iter().map(&apply_truth).collect::<Result<Vec<_>>>()?;
        let state = GaussianState::new(kernel.clone(), 1)?.condition(info, &values)?;
        let post = state.posterior(std::slice::from_ref(query))?;
        (post.mean[(0, 0)], post.cov[(0, 0)])
    };
    let lhs = (mean - truth_query).abs();
    let power = var.max(0.0).sqrt();
    Ok(BoundReport { lhs, power, native_norm, satisfied: lhs <= power * native_norm + BOUND_TOL })
}

/// A randomized bound configuration on a 1-D Matérn prior.
#[derive(Debug, Clone)]
pub struct BoundConfig {
    pub kernel: JointKernel,
    pub info: Vec<LinearFunctional>,
    pub query: LinearFunctional,
    pub centers: Vec<LinearFunctional>,
    pub coeffs: Vec<f64>,
}

/// Random point-evaluation configuration on `[0, 1]`: 3 to 12 observations,
/// 1 to 6 kernel centers, one query.
pub fn random_bound_config(seed: u64) -> Result<BoundConfig> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ell = 10f64.powf(rng.random_range(-1.5..0.0));
    let sigma = 10f64.powf(rng.random_range(-0.5..0.5));
    let kernel = JointKernel::scalar(KernelHyper::new(sigma, ell, 1.0, 0.0, 1)?, Warp::None);
    let p = param_vec(&[]);
    let point = |x: f64| LinearFunctional::point(&[x], p.clone(), 0);
    let n_info = rng.random_range(3..=12);
    let n_centers = rng.random_range(1..=6);
    let info = (0..n_info).map(|_| point(rng.random_range(0.0..1.0))).collect();
    let centers = (0..n_centers).map(|_| point(rng.random_range(0.0..1.0))).collect();
    let coeffs = (0..n_centers).map(|_| rng.random_range(-1.0..1.0)).collect();
    let query = point(rng.random_range(0.0..1.0));
    Ok(BoundConfig { kernel, info, query, centers, coeffs })
}

impl BoundConfig {
    pub fn check(&self) -> Result<BoundReport> {
        local_error_bound_check(&self.kernel, &self.info, &self.query, &self.centers, &self.coeffs)
    }
}

/// Symmetric PSD square root with eigenvalues clipped at zero.
fn psd_sqrt(c: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = c.nrows();
    if c.ncols() != n {
        return Err(Error::InvalidInput("covariance must be square".into()));
    }
    let scale = c.amax().max(1.0);
    if (c - c.transpose()).amax() > 1e-10 * scale {
        return Err(Error::Domain("covariance is not symmetric".into()));
    }
    let eig = SymmetricEigen::new(c.clone());
    if eig.eigenvalues.iter().any(|&v| v < -1e-10 * scale) {
        return Err(Error::Domain("covariance is not positive semidefinite".into()));
    }
    let d = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose())
}

/// 2-Wasserstein distance between two Gaussians (Bures form).
pub fn wasserstein2_gaussian(m1: &DVector<f64>, c1: &DMatrix<f64>, m2: &DVector<f64>, c2: &DMatrix<f64>) -> Result<f64> {
    if m1.len() != m2.len() || c1.shape() != c2.shape() || c1.nrows() != m1.len() {
        return Err(Error::InvalidInput("dimension mismatch".into()));
    }
    // tr((C1^½ C2 C1^½)^½) is the nuclear norm of C2^½ C1^½; taking singular
    // values directly avoids squaring small eigenvalues.
    let s1 = psd_sqrt(c1)?;
    let s2 = psd_sqrt(c2)?;
    let nuclear: f64 = (&s2 * &s1).singular_values().sum();
    let bures = c1.trace() + c2.trace() - 2.0 * nuclear;
    Ok(((m1 - m2).norm_squared() + bures.max(0.0)).sqrt())
}

pub fn wasserstein2(a: &FiniteGaussian, b: &FiniteGaussian) -> Result<f64> {
    wasserstein2_gaussian(&a.mean, &a.cov, &b.mean, &b.cov)
}

/// One row of a robustness table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RobustnessRow {
    pub epsilon: f64,
    pub w2: f64,
}

/// `(ε, W2)` curve plus the least-squares log-log slope over rows with `ε, W2 > 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct RobustnessReport {
    pub rows: Vec<RobustnessRow>,
    pub slope: f64,
}

impl RobustnessReport {
    /// Whether `W2` grows with `ε` up to a relative slack.
    pub fn nondecreasing(&self, slack: f64) -> bool {
        self.rows.windows(2).all(|w| w[1].w2 >= (1.0 - slack) * w[0].w2)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epsilon,w2,slope\n");
        for r in &self.rows {
            s.push_str(&format!("{:.16e},{:.16e},{:.16e}\n", r.epsilon, r.w2, self.slope));
        }
        s
    }
}

/// Least-squares slope of `log y` against `log x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    let pts: Vec<(f64, f64)> = points.iter().filter(|(x, y)| *x > 0.0 && *y > 0.0).map(|(x, y)| (x.ln(), y.ln())).collect();
    let n = pts.len() as f64;
    if pts.len() < 2 {
        return f64::NAN;
    }
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

/// Gradient pushforward built from a fixed set of locations using the given solution.
pub fn pushforward_from<P: SensitivityProblem>(
    problem: &P,
    sol: &P::Solution,
    p: &[f64],
    hyp: KernelHyper,
    mode: SensitivityMode,
    locations: &[Vec<f64>],
) -> Result<FiniteGaussian> {
    let pv = param_vec(p);
    let state = prior_state(problem, hyp, mode)?;
    let batch = info(problem, sol, &pv, locations, mode)?;
    let (state, _) = condition_on(&state, &batch, JitterPolicy::Escalate)?;
    pushforward(&state, problem, sol, &pv, mode)
}

/// Compare gradient posteriors built from the reference solution and from
/// `perturbed(ε)` over a fixed location set.
pub fn robustness_check<P: SensitivityProblem>(
    problem: &P,
    p: &[f64],
    hyp: KernelHyper,
    mode: SensitivityMode,
    locations: &[Vec<f64>],
    epsilons: &[f64],
    mut perturbed: impl FnMut(f64) -> Result<P::Solution>,
) -> Result<RobustnessReport> {
    let reference = problem.solve(p)?;
    let base = pushforward_from(problem, &reference, p, hyp, mode, locations)?;
    let mut rows = Vec::with_capacity(epsilons.len());
    for &epsilon in epsilons {
        let w2 = if epsilon == 0.0 {
            0.0
        } else {
            let sol = perturbed(epsilon)?;
            wasserstein2(&base, &pushforward_from(problem, &sol, p, hyp, mode, locations)?)?
        };
        rows.push(RobustnessRow { epsilon, w2 });
    }
    let slope = loglog_slope(&rows.iter().map(|r| (r.epsilon, r.w2)).collect::<Vec<_>>());
    Ok(RobustnessReport { rows, slope })
}

/// FHN robustness: the perturbed solution is explicit Euler with step `ε`.
pub fn fhn_robustness(
    problem: &crate::fhn::FhnProblem,
    p: &[f64],
    hyp: KernelHyper,
    locations: &[Vec<f64>],
    epsilons: &[f64],
) -> Result<RobustnessReport> {
    let cfg = &problem.cfg;
    robustness_check(problem, p, hyp, SensitivityMode::Forward, locations, epsilons, |eps| {
        crate::fhn::fhn_solve_euler(p, cfg.ic, cfg.t_end, eps)
    })
}

/// GWF robustness: nodal free values perturbed by `ε` times a fixed seeded
/// unit-sup-norm field.
pub fn gwf_robustness(
    problem: &crate::gwf::GwfProblem,
    p: &[f64],
    hyp: KernelHyper,
    locations: &[Vec<f64>],
    epsilons: &[f64],
    seed: u64,
) -> Result<RobustnessReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let field: Vec<f64> = (0..problem.mesh.n_nodes()).map(|_| rng.random_range(-1.0..1.0)).collect();
    robustness_check(problem, p, hyp, SensitivityMode::Adjoint, locations, epsilons, |eps| {
        let mut sol = problem.solve(p)?;
        for &k in &problem.dofs.node_of_free {
            sol.u[k] += eps * field[k];
        }
        Ok(sol)
    })
}
