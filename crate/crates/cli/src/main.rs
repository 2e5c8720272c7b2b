use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use probsens::analysis::{
    fhn_robustness, finite_diff_gradient, gwf_robustness, random_bound_config, wasserstein2_gaussian, BOUND_TOL,
};
use probsens::experiment::{calibrate_hyperparameters, resolve_hyper, run_experiment, Benchmark, ExperimentConfig, ProblemKind};
use probsens::fhn::{FhnConfig, FhnProblem, PRIOR_MEDIAN, P_STAR};
use probsens::gwf::{GwfConfig, GwfProblem};
use probsens::linalg::{chol_append, PackedChol};
use probsens::sensitivity::SensitivityProblem;

#[derive(Parser, Debug)]
#[command(name = "probsens", version, about = "Probabilistic sensitivity experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit kernel hyperparameters by marginal likelihood.
    Calibrate(Common),
    /// Run classical descent and the threshold sweep, writing CSV traces.
    Run(Common),
    /// Run the invariant suites; exits with 2 when any fails.
    Check(Common),
    /// Write error-bound and robustness reports.
    Bound(Common),
}

#[derive(Args, Debug, Clone, Default)]
struct Common {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_parser = ["fhn", "gwf"])]
    problem: Option<String>,
    #[arg(long, value_parser = ["forward", "adjoint", "classical"])]
    mode: Option<String>,
    /// Comma-separated thresholds, largest first.
    #[arg(long)]
    delta: Option<String>,
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path).with_context(|| format!("reading {}", path.display()))?,
            None => ExperimentConfig::defaults(ProblemKind::Fhn),
        };
        if let Some(p) = &self.problem {
            cfg.set("problem", p)?;
        }
        if let Some(m) = &self.mode {
            cfg.set("mode", m)?;
        }
        if let Some(d) = &self.delta {
            cfg.set("deltas", d)?;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn calibrate(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<()> {
    let bench = Benchmark::build(cfg)?;
    let cal = calibrate_hyperparameters(&bench, cfg.calib_seed)?;
    let text = format!(
        "problem = {}\nsigma = {:e}\nell_x = {:e}\nell_p = {:e}\nrho = {:e}\nlog_likelihood = {:.16e}\nevaluations = {}\ndropped_candidates = {}\n",
        cfg.problem,
        cal.hyp.sigma,
        cal.hyp.ell_x,
        cal.hyp.ell_p,
        cal.hyp.rho,
        cal.log_likelihood,
        cal.evaluations,
        cal.dropped_candidates
    );
    print!("{text}");
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("calibration.txt"), text)?;
    }
    Ok(())
}

fn run(cfg: &ExperimentConfig) -> Result<()> {
    let summary = run_experiment(cfg)?;
    println!(
        "hyperparameters: sigma = {:e}, ell_x = {:e}, ell_p = {:e}",
        summary.hyp.sigma, summary.hyp.ell_x, summary.hyp.ell_p
    );
    let c = &summary.classical.outcome;
    println!("classical: {} iterations, g = {:.10e}", c.trace.iterations(), c.g);
    for r in &summary.runs {
        let last = r.outcome.trace.last();
        println!(
            "{}: {} iterations, g = {:.10e}, distance {:.3e}, dF/dp evaluations {}, gram {}{}",
            r.name,
            r.outcome.trace.iterations(),
            r.outcome.g,
            r.final_dist,
            r.outcome.trace.total_dfdp_evals(),
            last.map_or(0, |l| l.gram_dim),
            r.outcome.trace.switch_iter.map_or(String::new(), |i| format!(", switched at {i}"))
        );
    }
    println!("wrote {} files to {}", summary.files.len(), cfg.out.display());
    Ok(())
}

struct Outcome {
    name: &'static str,
    ok: bool,
    detail: String,
}

fn rel(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    (a - b).norm() / a.norm().max(b.norm()).max(f64::MIN_POSITIVE)
}

fn check_oracles(seed: u64) -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let fhn = FhnProblem::standard(FhnConfig::default(), seed)?;
    let gwf = GwfProblem::generate(GwfConfig::default(), seed, seed + 1)?;
    let mut worst = 0.0f64;
    for _ in 0..3 {
        let p: Vec<f64> = PRIOR_MEDIAN.iter().map(|m| m * rng.random_range(0.7..1.4)).collect();
        let f = fhn.exact_gradient_forward(&p)?.grad;
        let a = fhn.exact_gradient_adjoint(&p)?.grad;
        let d = finite_diff_gradient(|q| fhn.objective_at_tol(q, fhn.cfg.oracle_tol), &p, 1e-5)?;
        worst = worst.max(rel(&f, &a)).max(rel(&f, &d));
        let q = gwf.sample_prior(&mut rng);
        let f = gwf.exact_gradient_forward(&q)?.grad;
        let a = gwf.exact_gradient_adjoint(&q)?.grad;
        let d = finite_diff_gradient(|x| gwf.objective_value(x), &q, 1e-5)?;
        worst = worst.max(rel(&f, &a)).max(rel(&f, &d));
    }
    Ok(Outcome { name: "gradient oracles", ok: worst <= 1e-4, detail: format!("worst relative error {worst:.2e}") })
}

fn check_cholesky(seed: u64) -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let n = rng.random_range(2..=120);
        let k = rng.random_range(1..n);
        let b = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        let a = &b * b.transpose() + DMatrix::identity(n, n) * 1e-2 * n as f64;
        let head = PackedChol::factor(&a.view((0, 0), (k, k)).into_owned())?;
        let grown = chol_append(&head, &a.view((0, k), (k, n - k)).into_owned(), &a.view((k, k), (n - k, n - k)).into_owned())?;
        let full = PackedChol::factor(&a)?.to_dense();
        worst = worst.max((grown.to_dense() - &full).norm() / full.norm());
    }
    Ok(Outcome { name: "incremental cholesky", ok: worst <= 1e-10, detail: format!("worst difference {worst:.2e}") })
}

fn check_bound(seed: u64) -> Result<Outcome> {
    let mut failed = 0;
    for s in 0..100 {
        let r = random_bound_config(seed.wrapping_mul(1000).wrapping_add(s))?.check()?;
        if !(r.lhs <= r.rhs() + BOUND_TOL) {
            failed += 1;
        }
    }
    Ok(Outcome { name: "local error bound", ok: failed == 0, detail: format!("{failed} of 100 violated") })
}

fn check_wasserstein(seed: u64) -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gaussian = |rng: &mut ChaCha8Rng| {
        let b = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-1.0..1.0));
        (DVector::from_fn(3, |_, _| rng.random_range(-1.0..1.0)), &b * b.transpose())
    };
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..50 {
        let (m1, c1) = gaussian(&mut rng);
        let (m2, c2) = gaussian(&mut rng);
        let (m3, c3) = gaussian(&mut rng);
        let d12 = wasserstein2_gaussian(&m1, &c1, &m2, &c2)?;
        let d23 = wasserstein2_gaussian(&m2, &c2, &m3, &c3)?;
        let d13 = wasserstein2_gaussian(&m1, &c1, &m3, &c3)?;
        worst = worst.max(d13 - d12 - d23);
    }
    Ok(Outcome { name: "wasserstein triangle", ok: worst <= 1e-8, detail: format!("largest excess {worst:.2e}") })
}

fn check_robustness(cfg: &ExperimentConfig) -> Result<Outcome> {
    let mut fcfg = cfg.clone();
    fcfg.problem = ProblemKind::Fhn;
    let bench = Benchmark::build(&fcfg)?;
    let Benchmark::Fhn(prob) = &bench else { bail!("expected the fhn benchmark") };
    let hyp = resolve_hyper(&bench, &fcfg)?;
    let locations: Vec<Vec<f64>> = (1..=100).map(|i| vec![0.2 * i as f64]).collect();
    let r = fhn_robustness(prob, &P_STAR, hyp, &locations, &[1e-4, 1e-3, 1e-2])?;
    let ok = r.nondecreasing(0.1) && (0.8..=1.3).contains(&r.slope);
    Ok(Outcome { name: "robustness slope", ok, detail: format!("slope {:.3}", r.slope) })
}

/// Runs every suite; returns whether all passed.
fn check(cfg: &ExperimentConfig) -> Result<bool> {
    let seed = cfg.seed;
    let outcomes = [
        check_oracles(seed)?,
        check_cholesky(seed)?,
        check_bound(seed)?,
        check_wasserstein(seed)?,
        check_robustness(cfg)?,
    ];
    for o in &outcomes {
        println!("{:<22} {} ({})", o.name, if o.ok { "ok" } else { "FAILED" }, o.detail);
    }
    Ok(outcomes.iter().all(|o| o.ok))
}

fn bound(cfg: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(&cfg.out)?;
    let mut s = String::from("seed,lhs,power,native_norm,rhs,satisfied\n");
    for k in 0..100 {
        let seed = cfg.seed.wrapping_mul(1000).wrapping_add(k);
        let r = random_bound_config(seed)?.check()?;
        s.push_str(&format!(
            "{seed},{:.16e},{:.16e},{:.16e},{:.16e},{}\n",
            r.lhs,
            r.power,
            r.native_norm,
            r.rhs(),
            r.satisfied
        ));
    }
    fs::write(cfg.out.join("bound.csv"), s)?;
    let bench = Benchmark::build(cfg)?;
    let hyp = resolve_hyper(&bench, cfg)?;
    let epsilons = [1e-4, 1e-3, 1e-2];
    let report = match &bench {
        Benchmark::Fhn(p) => {
            let locations: Vec<Vec<f64>> = (1..=100).map(|i| vec![0.2 * i as f64]).collect();
            fhn_robustness(p, &P_STAR, hyp, &locations, &epsilons)?
        }
        Benchmark::Gwf(p) => {
            let at = p.prior_mean().as_slice().to_vec();
            gwf_robustness(p, &at, hyp, p.candidates(), &epsilons, cfg.seed)?
        }
    };
    let name = format!("robustness_{}.csv", cfg.problem);
    fs::write(cfg.out.join(&name), report.to_csv())?;
    println!("robustness slope {:.3}; wrote bound.csv and {name} to {}", report.slope, cfg.out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Calibrate(c) => c.resolve().and_then(|cfg| calibrate(&cfg, c.out.as_deref())).map(|_| true),
        Command::Run(c) => c.resolve().and_then(|cfg| run(&cfg)).map(|_| true),
        Command::Check(c) => c.resolve().and_then(|cfg| check(&cfg)),
        Command::Bound(c) => c.resolve().and_then(|cfg| bound(&cfg)).map(|_| true),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
