//! Experiment harness: configuration, hyperparameter calibration and the
//! optimizer sweeps that produce per-iteration CSV traces.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::fhn::{fhn_forward_oracle, FhnConfig, FhnProblem};
use crate::gp::{GaussianState, JitterPolicy, LinearFunctional};
use crate::gwf::{GwfConfig, GwfProblem};
use crate::kernels::KernelHyper;
use crate::optim::{gd, pgd, OptOutcome, PgdConfig, Termination};
use crate::sensitivity::{param_vec, SensitivityMode, SensitivityProblem};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProblemKind {
    Fhn,
    Gwf,
}

impl FromStr for ProblemKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "fhn" => Ok(Self::Fhn),
            "gwf" => Ok(Self::Gwf),
            other => Err(Error::Config(format!("unknown problem '{other}'"))),
        }
    }
}

impl std::fmt::Display for ProblemKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Fhn => "fhn",
            Self::Gwf => "gwf",
        })
    }
}

/// Which gradient the optimizer uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    Forward,
    Adjoint,
    Classical,
}

impl FromStr for RunMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "forward" => Ok(Self::Forward),
            "adjoint" => Ok(Self::Adjoint),
            "classical" => Ok(Self::Classical),
            other => Err(Error::Config(format!("unknown mode '{other}'"))),
        }
    }
}

impl std::fmt::Display for RunMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Forward => "forward",
            Self::Adjoint => "adjoint",
            Self::Classical => "classical",
        })
    }
}

impl RunMode {
    pub fn sensitivity(self) -> Option<SensitivityMode> {
        match self {
            Self::Forward => Some(SensitivityMode::Forward),
            Self::Adjoint => Some(SensitivityMode::Adjoint),
            Self::Classical => None,
        }
    }
}

/// Everything needed to reproduce one experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub problem: ProblemKind,
    pub mode: RunMode,
    /// Thresholds to sweep, largest first.
    pub deltas: Vec<f64>,
    /// Observation-noise seed.
    pub seed: u64,
    /// Seed for the GWF true conductivity draw.
    pub prior_seed: u64,
    pub calib_seed: u64,
    /// GWF conductivity cells per axis.
    pub n: usize,
    pub out: PathBuf,
    pub opt: PgdConfig,
    /// Fixed hyperparameters; calibrated when absent.
    pub sigma: Option<f64>,
    pub ell_x: Option<f64>,
    pub ell_p: Option<f64>,
}

impl ExperimentConfig {
    pub fn defaults(problem: ProblemKind) -> Self {
        let (mode, max_iters) = match problem {
            ProblemKind::Fhn => (RunMode::Forward, 2000),
            ProblemKind::Gwf => (RunMode::Adjoint, 500),
        };
        Self {
            problem,
            mode,
            deltas: vec![1.0, 0.1, 0.001],
            seed: 1,
            prior_seed: 2,
            calib_seed: 3,
            n: 2,
            out: PathBuf::from("out"),
            opt: PgdConfig { max_iters, ..PgdConfig::default() },
            sigma: None,
            ell_x: None,
            ell_p: None,
        }
    }

    /// Parse flat `key = value` text; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", lineno + 1)))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let problem = kv.get("problem").map(|s| s.parse()).transpose()?.unwrap_or(ProblemKind::Fhn);
        let mut cfg = Self::defaults(problem);
        for (k, v) in &kv {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    /// Set one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("invalid value '{v}' for {key}")))
        }
        let o = &mut self.opt;
        match key {
            "problem" => {
                let p: ProblemKind = value.parse()?;
                if p != self.problem {
                    let mut fresh = Self::defaults(p);
                    fresh.out = self.out.clone();
                    *self = fresh;
                }
            }
            "mode" => self.mode = value.parse()?,
            "deltas" | "delta" => self.deltas = parse_list(value)?,
            "seed" => self.seed = num(key, value)?,
            "prior_seed" => self.prior_seed = num(key, value)?,
            "calib_seed" => self.calib_seed = num(key, value)?,
            "n" => self.n = num(key, value)?,
            "out" => self.out = PathBuf::from(value),
            "sigma" => self.sigma = Some(num(key, value)?),
            "ell_x" => self.ell_x = Some(num(key, value)?),
            "ell_p" => self.ell_p = Some(num(key, value)?),
            "eps" => o.eps = num(key, value)?,
            "delta_min" => o.delta_min = num(key, value)?,
            "tau1" => o.tau1 = num(key, value)?,
            "tau2" => o.tau2 = num(key, value)?,
            "c" => o.c = num(key, value)?,
            "p_crit" => o.p_crit = num(key, value)?,
            "gamma0" => o.gamma0 = num(key, value)?,
            "gamma_min" => o.gamma_min = num(key, value)?,
            "gram_limit" => o.gram_limit = num(key, value)?,
            "max_iters" => o.max_iters = num(key, value)?,
            "info_batch" => o.info_batch = num(key, value)?,
            "literal_pls" => o.literal_pls = num(key, value)?,
            "jitter" => {
                o.jitter = match value {
                    "escalate" => JitterPolicy::Escalate,
                    "drop" => JitterPolicy::DropDependent,
                    _ => return Err(Error::Config(format!("unknown jitter policy '{value}'"))),
                }
            }
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.deltas.is_empty() && self.mode != RunMode::Classical {
            return Err(Error::Config("no threshold values given".into()));
        }
        if self.deltas.iter().any(|d| !(*d > 0.0) || !d.is_finite()) {
            return Err(Error::Config("thresholds must be positive".into()));
        }
        if self.deltas.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Config("thresholds must be strictly decreasing".into()));
        }
        if self.n == 0 {
            return Err(Error::Config("n must be positive".into()));
        }
        for v in [self.sigma, self.ell_x, self.ell_p].into_iter().flatten() {
            if !(v > 0.0) {
                return Err(Error::Config("hyperparameters must be positive".into()));
            }
        }
        if self.problem == ProblemKind::Fhn && self.mode == RunMode::Adjoint {
            return Err(Error::Config("the fhn benchmark supports forward or classical mode".into()));
        }
        Ok(())
    }

    /// Resolved configuration in the same format [`Self::parse`] reads.
    pub fn snapshot(&self) -> String {
        let o = &self.opt;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("problem", self.problem.to_string());
        kv("mode", self.mode.to_string());
        kv("deltas", self.deltas.iter().map(|d| format!("{d:e}")).collect::<Vec<_>>().join(","));
        kv("seed", self.seed.to_string());
        kv("prior_seed", self.prior_seed.to_string());
        kv("calib_seed", self.calib_seed.to_string());
        kv("n", self.n.to_string());
        kv("out", self.out.display().to_string());
        for (k, v) in [("sigma", self.sigma), ("ell_x", self.ell_x), ("ell_p", self.ell_p)] {
            if let Some(v) = v {
                kv(k, format!("{v:e}"));
            }
        }
        kv("eps", format!("{:e}", o.eps));
        kv("delta_min", format!("{:e}", o.delta_min));
        kv("tau1", format!("{:e}", o.tau1));
        kv("tau2", format!("{:e}", o.tau2));
        kv("c", format!("{:e}", o.c));
        kv("p_crit", format!("{:e}", o.p_crit));
        kv("gamma0", format!("{:e}", o.gamma0));
        kv("gamma_min", format!("{:e}", o.gamma_min));
        kv("gram_limit", o.gram_limit.to_string());
        kv("max_iters", o.max_iters.to_string());
        kv("info_batch", o.info_batch.to_string());
        kv("literal_pls", o.literal_pls.to_string());
        kv(
            "jitter",
            match o.jitter {
                JitterPolicy::Escalate => "escalate",
                JitterPolicy::DropDependent => "drop",
            }
            .into(),
        );
        s
    }
}

/// Comma-separated list of reals.
pub fn parse_list(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().map_err(|_| Error::Config(format!("invalid number '{t}'"))))
        .collect()
}

/// Outcome of a hyperparameter search.
#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub hyp: KernelHyper,
    pub log_likelihood: f64,
    /// Log-grid spacing (decades) of the final round.
    pub final_step: f64,
    pub evaluations: usize,
    pub dropped_candidates: usize,
}

/// Coordinate search over `log10` coordinates: `rounds` rounds of `points`
/// points per axis, the spacing shrinking threefold each round, starting from
/// one decade. Returns the best point, its value and the final spacing.
pub fn coordinate_search(
    start: &[f64],
    rounds: usize,
    points: usize,
    mut f: impl FnMut(&[f64]) -> f64,
) -> (Vec<f64>, f64, f64, usize) {
    let mut memo: HashMap<Vec<i64>, f64> = HashMap::new();
    let mut evals = 0;
    let mut eval = |x: &[f64]| -> f64 {
        let key: Vec<i64> = x.iter().map(|v| (v * 1e9).round() as i64).collect();
        *memo.entry(key).or_insert_with(|| {
            evals += 1;
            let v = f(x);
            if v.is_nan() {
                f64::NEG_INFINITY
            } else {
                v
            }
        })
    };
    let mut x = start.to_vec();
    let mut best = eval(&x);
    let half = (points / 2) as i64;
    let mut step = 1.0;
    for round in 0..rounds {
        step = 3f64.powi(-(round as i32));
        for _sweep in 0..50 {
            let mut moved = false;
            for axis in 0..x.len() {
                let center = x[axis];
                for k in -half..=half {
                    if k == 0 {
                        continue;
                    }
                    let mut y = x.clone();
                    y[axis] = center + k as f64 * step;
                    let v = eval(&y);
                    if v > best {
                        best = v;
                        x = y;
                        moved = true;
                    }
                }
            }
            if !moved {
                break;
            }
        }
    }
    (x, best, step, evals)
}

/// Hyperparameters with `log10` coordinates applied to the named axes.
fn hyper_from(base: KernelHyper, axes: &[HyperAxis], x: &[f64]) -> KernelHyper {
    let mut h = base;
    for (a, v) in axes.iter().zip(x) {
        let val = 10f64.powf(*v);
        match a {
            HyperAxis::Sigma => h.sigma = val,
            HyperAxis::EllX => h.ell_x = val,
            HyperAxis::EllP => h.ell_p = val,
        }
    }
    h
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HyperAxis {
    Sigma,
    EllX,
    EllP,
}

/// Log marginal likelihood of observed functionals for a problem's kernel.
pub fn calibration_likelihood<P: SensitivityProblem>(
    problem: &P,
    mode: SensitivityMode,
    hyp: KernelHyper,
    functionals: &[LinearFunctional],
    values: &[f64],
) -> f64 {
    let run = || -> Result<f64> {
        let kernel = problem.kernel(hyp, mode)?;
        let ncols = values.len() / functionals.len().max(1);
        GaussianState::new(kernel, ncols)?.condition(functionals, values)?.log_marginal_likelihood()
    };
    run().unwrap_or(f64::NEG_INFINITY)
}

/// Maximize the marginal likelihood over `axes` starting from `base`.
pub fn calibrate_on<P: SensitivityProblem>(
    problem: &P,
    mode: SensitivityMode,
    base: KernelHyper,
    axes: &[HyperAxis],
    functionals: &[LinearFunctional],
    values: &[f64],
) -> Result<Calibration> {
    if functionals.is_empty() {
        return Err(Error::InvalidInput("calibration needs at least one observation".into()));
    }
    let start: Vec<f64> = axes
        .iter()
        .map(|a| match a {
            HyperAxis::Sigma => base.sigma.log10(),
            HyperAxis::EllX => base.ell_x.log10(),
            HyperAxis::EllP => base.ell_p.log10(),
        })
        .collect();
    let (x, lml, step, evaluations) = coordinate_search(&start, 3, 7, |x| {
        calibration_likelihood(problem, mode, hyper_from(base, axes, x), functionals, values)
    });
    if !lml.is_finite() {
        return Err(Error::SingularInformation("no hyperparameter setting gave a finite likelihood".into()));
    }
    Ok(Calibration { hyp: hyper_from(base, axes, &x), log_likelihood: lml, final_step: step, evaluations, dropped_candidates: 0 })
}

/// Calibration design for FHN: exact forward sensitivities at `t = 1..20` for
/// `n_candidates` log-normal prior draws.
pub fn fhn_calibration_design(
    problem: &FhnProblem,
    n_candidates: usize,
    seed: u64,
) -> (Vec<LinearFunctional>, Vec<f64>, usize) {
    let cfg = &problem.cfg;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut funcs = Vec::new();
    let mut values = Vec::new();
    let mut dropped = 0;
    for _ in 0..n_candidates {
        let p: Vec<f64> = cfg
            .prior_median
            .iter()
            .map(|m| { let z: f64 = StandardNormal.sample(&mut rng); (m.ln() + z).exp() })
            .collect();
        let sens = match fhn_forward_oracle(&p, cfg.ic, cfg.t_end, cfg.oracle_tol) {
            Ok(s) => s,
            Err(e) => {
                log::warn!("dropping calibration candidate {p:?}: {e}");
                dropped += 1;
                continue;
            }
        };
        let pv = param_vec(&p);
        let mut fs = Vec::new();
        let mut vs = Vec::new();
        let mut ok = true;
        for t in 1..=20 {
            let t = t as f64;
            match sens.at(t) {
                Ok((_, s)) => {
                    for (b, row) in s.iter().enumerate() {
                        fs.push(LinearFunctional::point(&[t], pv.clone(), b));
                        vs.extend_from_slice(row);
                    }
                }
                Err(_) => ok = false,
            }
        }
        if ok {
            funcs.extend(fs);
            values.extend(vs);
        } else {
            dropped += 1;
        }
    }
    (funcs, values, dropped)
}

/// Calibration design for GWF: exact adjoint values at the nodes nearest a
/// regular 10 × 10 grid for `n_candidates` prior draws.
pub fn gwf_calibration_design(
    problem: &GwfProblem,
    n_candidates: usize,
    seed: u64,
) -> (Vec<LinearFunctional>, Vec<f64>, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nodes: Vec<usize> = (0..10)
        .flat_map(|j| (0..10).map(move |i| (i, j)))
        .map(|(i, j)| problem.mesh.nearest_node([(i as f64 + 0.5) / 10.0, (j as f64 + 0.5) / 10.0]))
        .filter(|&k| problem.dofs.free_of_node[k].is_some())
        .collect();
    let mut funcs = Vec::new();
    let mut values = Vec::new();
    let mut dropped = 0;
    for _ in 0..n_candidates {
        let p = problem.sample_prior(&mut rng);
        let sol = match problem.solve(&p) {
            Ok(s) => s,
            Err(e) => {
                log::warn!("dropping calibration candidate: {e}");
                dropped += 1;
                continue;
            }
        };
        let lam = problem.adjoint_oracle(&sol);
        let pv = param_vec(&p);
        for &k in &nodes {
            funcs.push(LinearFunctional::point(&problem.mesh.nodes[k], pv.clone(), 0));
            values.push(lam[k]);
        }
    }
    (funcs, values, dropped)
}

/// A constructed benchmark instance.
#[derive(Debug, Clone)]
pub enum Benchmark {
    Fhn(Box<FhnProblem>),
    Gwf(Box<GwfProblem>),
}

impl Benchmark {
    pub fn build(cfg: &ExperimentConfig) -> Result<Self> {
        Ok(match cfg.problem {
            ProblemKind::Fhn => Self::Fhn(Box::new(FhnProblem::standard(FhnConfig::default(), cfg.seed)?)),
            ProblemKind::Gwf => {
                let gcfg = GwfConfig { n: cfg.n, ..GwfConfig::default() };
                Self::Gwf(Box::new(GwfProblem::generate(gcfg, cfg.prior_seed, cfg.seed)?))
            }
        })
    }

    /// Starting point: the prior median (FHN) or prior mean (GWF).
    pub fn start(&self) -> Vec<f64> {
        match self {
            Self::Fhn(p) => p.cfg.prior_median.to_vec(),
            Self::Gwf(p) => p.prior_mean().iter().copied().collect(),
        }
    }

    /// Write observation data (and the mesh for GWF) into `dir`.
    pub fn export(&self, dir: &Path) -> Result<()> {
        match self {
            Self::Fhn(p) => {
                let mut s = String::from("t,y\n");
                for (t, y) in p.data.times.iter().zip(&p.data.values) {
                    let _ = writeln!(s, "{t:.16e},{y:.16e}");
                }
                fs::write(dir.join("data.csv"), s)?;
                fs::write(dir.join("data.seed"), format!("{}\n", p.data.seed))?;
            }
            Self::Gwf(p) => {
                let mut s = String::from("node,x1,x2,y\n");
                for (&k, y) in p.data.nodes.iter().zip(&p.data.values) {
                    let x = p.mesh.nodes[k];
                    let _ = writeln!(s, "{k},{:.16e},{:.16e},{y:.16e}", x[0], x[1]);
                }
                fs::write(dir.join("data.csv"), s)?;
                let mut t = String::from("cell,p_true\n");
                for (i, v) in p.data.p_star.iter().enumerate() {
                    let _ = writeln!(t, "{i},{v:.16e}");
                }
                fs::write(dir.join("truth.csv"), t)?;
                fs::write(
                    dir.join("data.seed"),
                    format!("prior_seed = {}\nnoise_seed = {}\n", p.data.prior_seed, p.data.noise_seed),
                )?;
                p.mesh.write_nodes(fs::File::create(dir.join("mesh_nodes.csv"))?)?;
                p.mesh.write_elements(fs::File::create(dir.join("mesh_elements.csv"))?)?;
            }
        }
        Ok(())
    }
}

/// Calibrate with the benchmark's standard design.
pub fn calibrate_hyperparameters(bench: &Benchmark, seed: u64) -> Result<Calibration> {
    match bench {
        Benchmark::Fhn(p) => {
            let (f, v, dropped) = fhn_calibration_design(p, 5, seed);
            let base = KernelHyper::new(1.0, 1.0, 1.0, p.cfg.rho, 1)?;
            let axes = [HyperAxis::Sigma, HyperAxis::EllX, HyperAxis::EllP];
            let mut c = calibrate_on(p.as_ref(), SensitivityMode::Forward, base, &axes, &f, &v)?;
            c.dropped_candidates = dropped;
            Ok(c)
        }
        Benchmark::Gwf(p) => {
            let (f, v, dropped) = gwf_calibration_design(p, 10, seed);
            let base = KernelHyper::new(1.0, 0.2, 1.0, 0.0, 2)?;
            let axes = [HyperAxis::Sigma, HyperAxis::EllP];
            let mut c = calibrate_on(p.as_ref(), SensitivityMode::Adjoint, base, &axes, &f, &v)?;
            c.dropped_candidates = dropped;
            Ok(c)
        }
    }
}

/// Per-run result of an experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub name: String,
    pub delta: Option<f64>,
    pub outcome: OptOutcome,
    pub final_dist: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSummary {
    pub hyp: KernelHyper,
    pub reference: Vec<f64>,
    pub classical: RunSummary,
    pub runs: Vec<RunSummary>,
    pub files: Vec<PathBuf>,
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Per-iteration trace as CSV (deterministic: no timings).
pub fn trace_csv(outcome: &OptOutcome, reference: &[f64]) -> String {
    let mut s = String::from("iter,g,dist_to_reference,info_dim,gram_dim,gamma,delta,dFdp_evals\n");
    for r in &outcome.trace.records {
        let _ = writeln!(
            s,
            "{},{:.16e},{:.16e},{},{},{:.16e},{:.16e},{}",
            r.iter,
            r.g,
            dist(&r.p, reference),
            r.info_dim,
            r.gram_dim,
            r.gamma,
            r.delta,
            r.dfdp_evals
        );
    }
    s
}

/// Wall-clock times per iteration.
pub fn timing_csv(outcome: &OptOutcome) -> String {
    let mut s = String::from("iter,wall_ms\n");
    for r in &outcome.trace.records {
        let _ = writeln!(s, "{},{:.3}", r.iter, r.wall_ms);
    }
    s
}

fn termination_label(t: &Termination) -> String {
    match t {
        Termination::Converged => "converged".into(),
        Termination::MaxIters => "max_iters".into(),
        Termination::Failed(e) => format!("failed: {}", e.replace(',', ";")),
    }
}

fn summary_csv(runs: &[&RunSummary]) -> String {
    let mut s = String::from(
        "run,delta,iterations,final_g,final_dist,info_dim,gram_dim,dFdp_evals,switch_iter,termination\n",
    );
    for r in runs {
        let last = r.outcome.trace.last();
        let _ = writeln!(
            s,
            "{},{},{},{:.16e},{:.16e},{},{},{},{},{}",
            r.name,
            r.delta.map_or(String::new(), |d| format!("{d:e}")),
            r.outcome.trace.iterations(),
            r.outcome.g,
            r.final_dist,
            last.map_or(0, |l| l.info_dim),
            last.map_or(0, |l| l.gram_dim),
            last.map_or(0, |l| l.dfdp_evals),
            r.outcome.trace.switch_iter.map_or(String::new(), |i| i.to_string()),
            termination_label(&r.outcome.termination)
        );
    }
    s
}

/// File name for a threshold value, e.g. `pgd_delta_1e-3`.
pub fn run_name(delta: f64) -> String {
    format!("pgd_delta_{delta:e}")
}

fn run_problem<P: SensitivityProblem>(
    problem: &P,
    p0: &[f64],
    hyp: KernelHyper,
    cfg: &ExperimentConfig,
    out: &Path,
    files: &mut Vec<PathBuf>,
) -> Result<(RunSummary, Vec<RunSummary>, Vec<f64>)> {
    let mut write = |name: &str, body: String| -> Result<()> {
        let path = out.join(name);
        fs::write(&path, body)?;
        files.push(path);
        Ok(())
    };
    let base = gd(problem, p0, &cfg.opt)?;
    let reference = base.p.clone();
    write("classical.csv", trace_csv(&base, &reference))?;
    write("classical_timing.csv", timing_csv(&base))?;
    let classical = RunSummary { name: "classical".into(), delta: None, final_dist: 0.0, outcome: base };
    let mut runs = Vec::new();
    if let Some(mode) = cfg.mode.sensitivity() {
        for &delta in &cfg.deltas {
            let opt = PgdConfig { delta0: delta, delta_min: cfg.opt.delta_min.min(delta * 0.5), ..cfg.opt.clone() };
            let outcome = pgd(problem, p0, hyp, mode, &opt)?;
            let name = run_name(delta);
            write(&format!("{name}.csv"), trace_csv(&outcome, &reference))?;
            write(&format!("{name}_timing.csv"), timing_csv(&outcome))?;
            let failed = matches!(outcome.termination, Termination::Failed(_));
            let final_dist = dist(&outcome.p, &reference);
            runs.push(RunSummary { name, delta: Some(delta), outcome, final_dist });
            if failed {
                let mut all: Vec<&RunSummary> = vec![&classical];
                all.extend(runs.iter());
                write("summary.csv", summary_csv(&all))?;
                let r = runs.last().expect("just pushed");
                return Err(Error::Numerical(format!("run {} failed: {}", r.name, termination_label(&r.outcome.termination))));
            }
        }
    }
    let mut all: Vec<&RunSummary> = vec![&classical];
    all.extend(runs.iter());
    write("summary.csv", summary_csv(&all))?;
    Ok((classical, runs, reference))
}

/// Resolve hyperparameters: fixed values from the config where given,
/// calibrated values otherwise.
pub fn resolve_hyper(bench: &Benchmark, cfg: &ExperimentConfig) -> Result<KernelHyper> {
    let (rho, dims, ell_x_default) = match bench {
        Benchmark::Fhn(p) => (p.cfg.rho, 1, None),
        Benchmark::Gwf(_) => (0.0, 2, Some(0.2)),
    };
    let ell_x = cfg.ell_x.or(ell_x_default);
    if let (Some(s), Some(lx), Some(lp)) = (cfg.sigma, ell_x, cfg.ell_p) {
        return KernelHyper::new(s, lx, lp, rho, dims);
    }
    let cal = calibrate_hyperparameters(bench, cfg.calib_seed)?;
    let h = cal.hyp;
    KernelHyper::new(cfg.sigma.unwrap_or(h.sigma), cfg.ell_x.unwrap_or(h.ell_x), cfg.ell_p.unwrap_or(h.ell_p), rho, dims)
}

/// Run the classical baseline and the threshold sweep, writing CSVs into
/// `cfg.out`. Partial outputs stay on disk if a run fails.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentSummary> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out)?;
    let mut files = Vec::new();
    let snap = cfg.out.join("config.resolved");
    fs::write(&snap, cfg.snapshot())?;
    files.push(snap);
    let bench = Benchmark::build(cfg)?;
    bench.export(&cfg.out)?;
    let hyp = resolve_hyper(&bench, cfg)?;
    let hyp_path = cfg.out.join("hyperparameters.txt");
    fs::write(
        &hyp_path,
        format!("sigma = {:e}\nell_x = {:e}\nell_p = {:e}\nrho = {:e}\n", hyp.sigma, hyp.ell_x, hyp.ell_p, hyp.rho),
    )?;
    files.push(hyp_path);
    let p0 = bench.start();
    let (classical, runs, reference) = match &bench {
        Benchmark::Fhn(p) => run_problem(p.as_ref(), &p0, hyp, cfg, &cfg.out, &mut files)?,
        Benchmark::Gwf(p) => run_problem(p.as_ref(), &p0, hyp, cfg, &cfg.out, &mut files)?,
    };
    Ok(ExperimentSummary { hyp, reference, classical, runs, files })
}
