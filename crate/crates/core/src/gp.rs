//! Gaussian-process conditioning on linear functionals.
//!
//! A [`GaussianState`] holds a zero-or-custom-mean GP prior over one or more
//! independent, identically distributed output columns that share a single
//! kernel. Every column is observed through the same functionals, so one
//! Cholesky factor of the Gram matrix serves all of them.
//!
//! Internally, functionals are stored as weighted sums of kernel "atoms"
//! `(x, p, derivative)`; atoms and parameter vectors are interned so that each
//! distinct atom pair is evaluated once per Gram border and each distinct
//! parameter pair has its squared distance computed once.

use std::collections::HashMap;
use std::fmt;
use std::sync::{Arc, OnceLock};

use nalgebra::{DMatrix, DVector};

use crate::kernels::{DerivKey, DerivOrder, JointKernel};
use crate::linalg::{dot, PackedChol};
use crate::{Error, Result};

/// Shared parameter vector.
pub type ParamVec = Arc<[f64]>;

/// Largest supported number of domain coordinates.
pub const MAX_SPATIAL_DIMS: usize = 3;

/// Initial diagonal nugget, relative to each row's prior variance.
pub const JITTER_START: f64 = 1e-10;
/// Largest nugget tried by strict conditioning, relative to each row's prior variance.
pub const JITTER_MAX: f64 = 1e-4;
/// Relative pivot below which [`JitterPolicy::DropDependent`] discards a functional.
pub const DROP_TOL: f64 = 1e-8;

/// One weighted kernel-section evaluation inside a [`LinearFunctional`].
#[derive(Debug, Clone, PartialEq)]
pub struct Term {
    pub x: Vec<f64>,
    pub p: ParamVec,
    pub block: usize,
    pub deriv: Vec<DerivOrder>,
    pub weight: f64,
}

/// Finite linear combination of (derivative) point evaluations.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LinearFunctional {
    pub terms: Vec<Term>,
}

impl LinearFunctional {
    pub fn new() -> Self {
        Self::default()
    }

    /// Point evaluation `u_block(x, p)`.
    pub fn point(x: &[f64], p: ParamVec, block: usize) -> Self {
        Self::new().with(x, p, block, &[], 1.0)
    }

    pub fn with(mut self, x: &[f64], p: ParamVec, block: usize, deriv: &[DerivOrder], weight: f64) -> Self {
        self.push(x, p, block, deriv, weight);
        self
    }

    pub fn push(&mut self, x: &[f64], p: ParamVec, block: usize, deriv: &[DerivOrder], weight: f64) {
        self.terms.push(Term { x: x.to_vec(), p, block, deriv: deriv.to_vec(), weight });
    }

    pub fn scaled(&self, a: f64) -> Self {
        let mut out = self.clone();
        out.terms.iter_mut().for_each(|t| t.weight *= a);
        out
    }

    fn validate(&self, kernel: &JointKernel) -> Result<()> {
        if self.terms.is_empty() {
            return Err(Error::InvalidInput("linear functional has no terms".into()));
        }
        let s = kernel.spatial_dims();
        let dim_p = self.terms[0].p.len();
        for t in &self.terms {
            if t.x.len() != s || t.p.len() != dim_p {
                return Err(Error::InvalidInput(format!(
                    "term location has dimensions ({}, {}), expected ({s}, {dim_p})",
                    t.x.len(),
                    t.p.len()
                )));
            }
            if t.block >= kernel.blocks() {
                return Err(Error::InvalidInput(format!("output block {} out of range", t.block)));
            }
            if !t.weight.is_finite() || t.x.iter().chain(t.p.iter()).any(|v| !v.is_finite()) {
                return Err(Error::InvalidInput("non-finite functional term".into()));
            }
            let key = DerivKey::from_orders(&t.deriv)?;
            if key.axes().any(|ax| ax >= s + dim_p) {
                return Err(Error::InvalidInput("derivative axis out of range".into()));
            }
        }
        Ok(())
    }
}

/// An augmented `(location, parameter)` point used for space-filling selection.
#[derive(Debug, Clone, PartialEq)]
pub struct AugPoint {
    pub x: Vec<f64>,
    pub p: ParamVec,
}

/// Multivariate normal with dense covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteGaussian {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl FiniteGaussian {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Result<Self> {
        if cov.nrows() != mean.len() || cov.ncols() != mean.len() {
            return Err(Error::InvalidInput("mean/covariance dimension mismatch".into()));
        }
        Ok(Self { mean, cov })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn trace(&self) -> f64 {
        self.cov.trace()
    }
}

/// Prior mean applied term-wise to functionals; shared by all output columns.
#[derive(Clone, Default)]
pub enum PriorMean {
    #[default]
    Zero,
    /// `m(x, p, block, derivative)`.
    Function(Arc<dyn Fn(&[f64], &[f64], usize, &[DerivOrder]) -> f64 + Send + Sync>),
}

impl fmt::Debug for PriorMean {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PriorMean::Zero => write!(f, "Zero"),
            PriorMean::Function(_) => write!(f, "Function(..)"),
        }
    }
}

impl PriorMean {
    pub fn apply(&self, l: &LinearFunctional) -> f64 {
        match self {
            PriorMean::Zero => 0.0,
            PriorMean::Function(m) => {
                l.terms.iter().map(|t| t.weight * m(&t.x, &t.p, t.block, &t.deriv)).sum()
            }
        }
    }
}

/// How [`GaussianState::condition_with`] reacts to (near-)dependent functionals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum JitterPolicy {
    /// Escalate a uniform nugget on the new rows until the factorization succeeds.
    #[default]
    Escalate,
    /// Drop every new functional whose conditional variance is below
    /// [`DROP_TOL`] times its prior variance.
    DropDependent,
}

/// Gram matrix `G_ij = L_i k L_j*` of a set of functionals.
pub fn gram(functionals: &[LinearFunctional], kernel: &JointKernel) -> Result<DMatrix<f64>> {
    let n = functionals.len();
    let mut g = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = apply_pair(kernel, &functionals[i], &functionals[j])?;
            if !v.is_finite() {
                return Err(Error::KernelEvaluation(format!("Gram entry ({i}, {j}) is {v}")));
            }
            g[(i, j)] = v;
            g[(j, i)] = v;
        }
    }
    Ok(g)
}

/// `L1 k L2*` by direct term-by-term kernel evaluation.
pub fn apply_pair(kernel: &JointKernel, l1: &LinearFunctional, l2: &LinearFunctional) -> Result<f64> {
    let mut acc = 0.0;
    for a in &l1.terms {
        for b in &l2.terms {
            acc += a.weight
                * b.weight
                * kernel.eval(&a.x, &a.p, a.block, &a.deriv, &b.x, &b.p, b.block, &b.deriv)?;
        }
    }
    Ok(acc)
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Atom {
    x: [f64; MAX_SPATIAL_DIMS],
    pid: u32,
    d: DerivKey,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
struct AtomKey {
    x: [u64; MAX_SPATIAL_DIMS],
    pid: u32,
    d: DerivKey,
}

impl Atom {
    fn key(&self) -> AtomKey {
        AtomKey { x: self.x.map(f64::to_bits), pid: self.pid, d: self.d }
    }
}

#[derive(Debug, Clone, Copy)]
struct ITerm {
    atom: u32,
    block: u8,
    w: f64,
}

#[derive(Debug, Clone)]
struct IFunc {
    terms: Box<[ITerm]>,
}

fn param_key(p: &[f64]) -> Box<[u64]> {
    p.iter().map(|v| v.to_bits()).collect()
}

fn sqdist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Interned parameter vectors with cached pairwise squared distances.
#[derive(Debug, Clone, Default)]
struct ParamTable {
    vals: Vec<ParamVec>,
    index: HashMap<Box<[u64]>, u32>,
    /// `dp2[i][j]` for `j <= i`.
    dp2: Vec<Arc<[f64]>>,
}

impl ParamTable {
    fn find(&self, p: &[f64]) -> Option<u32> {
        self.index.get(&param_key(p)).copied()
    }

    fn intern(&mut self, p: &ParamVec) -> u32 {
        if let Some(id) = self.find(p) {
            return id;
        }
        let id = self.vals.len() as u32;
        let row: Arc<[f64]> = self
            .vals
            .iter()
            .map(|q| sqdist(q, p))
            .chain(std::iter::once(0.0))
            .collect();
        self.vals.push(p.clone());
        self.dp2.push(row);
        self.index.insert(param_key(p), id);
        id
    }

    #[inline]
    fn dp2(&self, a: u32, b: u32) -> f64 {
        let (i, j) = if a >= b { (a, b) } else { (b, a) };
        self.dp2[i as usize][j as usize]
    }

    fn distances_to(&self, p: &[f64]) -> Vec<f64> {
        self.vals.iter().map(|q| sqdist(q, p)).collect()
    }
}

#[derive(Debug, Clone, Default)]
struct AtomTable {
    atoms: Vec<Atom>,
    index: HashMap<AtomKey, u32>,
}

impl AtomTable {
    fn intern(&mut self, atom: Atom) -> u32 {
        let key = atom.key();
        if let Some(&id) = self.index.get(&key) {
            return id;
        }
        let id = self.atoms.len() as u32;
        self.atoms.push(atom);
        self.index.insert(key, id);
        id
    }
}

/// Functionals expressed against a local atom table, prior to interning.
#[derive(Debug, Clone)]
struct LocalSet {
    params: Vec<ParamVec>,
    atoms: AtomTable,
    funcs: Vec<IFunc>,
    /// `to_state[local_pid][state_pid]`: squared parameter distances.
    to_state: Vec<Vec<f64>>,
    /// Squared distances between local parameter vectors.
    local_dp2: Vec<Vec<f64>>,
    prior_mean: Vec<f64>,
}

/// Posterior of a fixed query set, updated incrementally while the state grows
/// by conditioning. Only rows added since the last call cost kernel evaluations.
#[derive(Debug, Clone)]
pub struct QueryCache {
    set: LocalSet,
    prior: Vec<f64>,
    /// `w[q][i] = (L⁻¹ K(history, q))_i` for the first `rows` history rows.
    w: Vec<Vec<f64>>,
    rows: usize,
    blocks: Vec<usize>,
}

impl QueryCache {
    pub fn len(&self) -> usize {
        self.set.funcs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.set.funcs.is_empty()
    }

    /// History rows already folded in.
    pub fn rows(&self) -> usize {
        self.rows
    }
}

/// Posterior summary of a set of query functionals.
#[derive(Debug, Clone)]
pub struct QueryPosterior {
    /// `mean[(q, c)]`: posterior mean of query `q` on output column `c`.
    pub mean: DMatrix<f64>,
    /// Posterior covariance between queries (identical for every column).
    pub cov: DMatrix<f64>,
    /// Prior covariance between queries.
    pub prior_cov: DMatrix<f64>,
}

/// GP prior plus all conditioning bookkeeping.
///
/// Conditioning returns a new state and leaves `self` untouched; factor rows are
/// shared between the two.
#[derive(Debug, Clone)]
pub struct GaussianState {
    kernel: Arc<JointKernel>,
    mean: PriorMean,
    ncols: usize,
    params: Arc<ParamTable>,
    atoms: Arc<AtomTable>,
    funcs: Arc<Vec<IFunc>>,
    /// Observed values, row-major `n × ncols`.
    values: Arc<Vec<f64>>,
    /// `L⁻¹ (f − 𝓘a)`, one vector per column.
    z: Arc<Vec<Vec<f64>>>,
    nugget: Arc<Vec<f64>>,
    gram_diag: Arc<Vec<f64>>,
    chol: PackedChol,
    history: Arc<Vec<(u32, [f64; MAX_SPATIAL_DIMS])>>,
    alpha: OnceLock<Arc<Vec<Vec<f64>>>>,
}

impl GaussianState {
    /// Unconditioned prior with `ncols` independent output columns.
    pub fn new(kernel: JointKernel, ncols: usize) -> Result<Self> {
        kernel.hyp.validate()?;
        if kernel.spatial_dims() > MAX_SPATIAL_DIMS || ncols == 0 {
            return Err(Error::InvalidInput(format!(
                "unsupported layout: {} spatial dims, {ncols} columns",
                kernel.spatial_dims()
            )));
        }
        Ok(Self {
            kernel: Arc::new(kernel),
            mean: PriorMean::Zero,
            ncols,
            params: Arc::default(),
            atoms: Arc::default(),
            funcs: Arc::default(),
            values: Arc::default(),
            z: Arc::new(vec![Vec::new(); ncols]),
            nugget: Arc::default(),
            gram_diag: Arc::default(),
            chol: PackedChol::new(),
            history: Arc::default(),
            alpha: OnceLock::new(),
        })
    }

    pub fn with_mean(mut self, mean: PriorMean) -> Result<Self> {
        if self.dim() > 0 {
            return Err(Error::InvalidInput("prior mean must be set before conditioning".into()));
        }
        self.mean = mean;
        Ok(self)
    }

    pub fn kernel(&self) -> &JointKernel {
        &self.kernel
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    /// Number of functionals conditioned on (the Gram dimension).
    pub fn dim(&self) -> usize {
        self.funcs.len()
    }

    /// Number of distinct augmented points conditioned on.
    pub fn history_len(&self) -> usize {
        self.history.len()
    }

    pub fn chol(&self) -> &PackedChol {
        &self.chol
    }

    pub fn nugget(&self) -> &[f64] {
        &self.nugget
    }

    /// Observed value of functional `i` on column `c`.
    pub fn value(&self, i: usize, c: usize) -> f64 {
        self.values[i * self.ncols + c]
    }

    /// Dense Gram matrix of the stored functionals (without nugget).
    pub fn gram_matrix(&self) -> DMatrix<f64> {
        let n = self.dim();
        let atoms = &self.atoms.atoms;
        let mut kcache: HashMap<(u32, u32), f64> = HashMap::new();
        let mut g = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let mut acc = 0.0;
                for a in self.funcs[i].terms.iter() {
                    for b in self.funcs[j].terms.iter() {
                        let k = *kcache.entry((a.atom, b.atom)).or_insert_with(|| {
                            let (x, y) = (&atoms[a.atom as usize], &atoms[b.atom as usize]);
                            self.kernel.eval_scalar(
                                &x.x,
                                &self.params.vals[x.pid as usize],
                                x.d,
                                &y.x,
                                &self.params.vals[y.pid as usize],
                                y.d,
                                self.params.dp2(x.pid, y.pid),
                            )
                        });
                        acc += a.w * b.w * self.kernel.coupling[a.block as usize][b.block as usize] * k;
                    }
                }
                g[(i, j)] = acc;
                g[(j, i)] = acc;
            }
        }
        g
    }

    fn mean_diag(&self, extra: &[f64]) -> f64 {
        let total: f64 = self.gram_diag.iter().chain(extra).sum();
        let count = self.gram_diag.len() + extra.len();
        if count == 0 {
            1.0
        } else {
            (total / count as f64).max(f64::MIN_POSITIVE)
        }
    }

    fn localize(&self, functionals: &[LinearFunctional]) -> Result<LocalSet> {
        let s = self.kernel.spatial_dims();
        let mut params: Vec<ParamVec> = Vec::new();
        let mut pindex: HashMap<Box<[u64]>, u32> = HashMap::new();
        let mut atoms = AtomTable::default();
        let mut funcs = Vec::with_capacity(functionals.len());
        let mut prior_mean = Vec::with_capacity(functionals.len());
        for l in functionals {
            l.validate(&self.kernel)?;
            let mut terms = Vec::with_capacity(l.terms.len());
            for t in &l.terms {
                let key = param_key(&t.p);
                let pid = *pindex.entry(key).or_insert_with(|| {
                    params.push(t.p.clone());
                    (params.len() - 1) as u32
                });
                let mut x = [0.0; MAX_SPATIAL_DIMS];
                x[..s].copy_from_slice(&t.x);
                let atom = atoms.intern(Atom { x, pid, d: DerivKey::from_orders(&t.deriv)? });
                terms.push(ITerm { atom, block: t.block as u8, w: t.weight });
            }
            funcs.push(IFunc { terms: terms.into_boxed_slice() });
            prior_mean.push(self.mean.apply(l));
        }
        let to_state = params.iter().map(|p| self.params.distances_to(p)).collect();
        let local_dp2 = params
            .iter()
            .map(|p| params.iter().map(|q| sqdist(p, q)).collect())
            .collect();
        Ok(LocalSet { params, atoms, funcs, to_state, local_dp2, prior_mean })
    }

    /// Cross covariances between stored functionals and a local set,
    /// column-major `dim() × set.funcs.len()`.
    fn cross(&self, set: &LocalSet) -> Vec<f64> {
        let n = self.dim();
        let m = set.funcs.len();
        let mut out = vec![0.0; n * m];
        if n == 0 || m == 0 {
            return out;
        }
        let blocks = self.kernel.blocks();
        let natoms = self.atoms.atoms.len();
        // Which local functionals use each local atom.
        let mut users: Vec<Vec<(usize, u8, f64)>> = vec![Vec::new(); set.atoms.atoms.len()];
        for (j, f) in set.funcs.iter().enumerate() {
            for t in f.terms.iter() {
                users[t.atom as usize].push((j, t.block, t.w));
            }
        }
        // h[j][a * blocks + b] = Σ_{s ∈ f_j} w_s C[b][b_s] k(atom_a, atom_s)
        let mut h = vec![0.0; m * natoms * blocks];
        let mut col = vec![0.0; natoms];
        for (s_idx, s) in set.atoms.atoms.iter().enumerate() {
            let ps = &set.params[s.pid as usize];
            let dps = &set.to_state[s.pid as usize];
            for (a_idx, a) in self.atoms.atoms.iter().enumerate() {
                col[a_idx] = self.kernel.eval_scalar(
                    &a.x,
                    &self.params.vals[a.pid as usize],
                    a.d,
                    &s.x,
                    ps,
                    s.d,
                    dps[a.pid as usize],
                );
            }
            for &(j, bs, w) in &users[s_idx] {
                let hj = &mut h[j * natoms * blocks..(j + 1) * natoms * blocks];
                for b in 0..blocks {
                    let c = w * self.kernel.coupling[b][bs as usize];
                    if c == 0.0 {
                        continue;
                    }
                    for (a_idx, &k) in col.iter().enumerate() {
                        hj[a_idx * blocks + b] += c * k;
                    }
                }
            }
        }
        for j in 0..m {
            let hj = &h[j * natoms * blocks..(j + 1) * natoms * blocks];
            let oj = &mut out[j * n..(j + 1) * n];
            for (i, f) in self.funcs.iter().enumerate() {
                oj[i] = f
                    .terms
                    .iter()
                    .map(|t| t.w * hj[t.atom as usize * blocks + t.block as usize])
                    .sum();
            }
        }
        out
    }

    /// Prior covariance among the functionals of a local set (row-major `m × m`).
    fn local_block(&self, set: &LocalSet) -> Vec<f64> {
        let la = set.atoms.atoms.len();
        let mut k = vec![0.0; la * la];
        for i in 0..la {
            let a = &set.atoms.atoms[i];
            for j in 0..=i {
                let b = &set.atoms.atoms[j];
                let v = self.kernel.eval_scalar(
                    &a.x,
                    &set.params[a.pid as usize],
                    a.d,
                    &b.x,
                    &set.params[b.pid as usize],
                    b.d,
                    set.local_dp2[a.pid as usize][b.pid as usize],
                );
                k[i * la + j] = v;
                // The kernel is symmetric under swapping both arguments and their derivatives.
                if i != j {
                    k[j * la + i] = self.kernel.eval_scalar(
                        &b.x,
                        &set.params[b.pid as usize],
                        b.d,
                        &a.x,
                        &set.params[a.pid as usize],
                        a.d,
                        set.local_dp2[a.pid as usize][b.pid as usize],
                    );
                }
            }
        }
        let m = set.funcs.len();
        let mut out = vec![0.0; m * m];
        for i in 0..m {
            for j in 0..=i {
                let mut acc = 0.0;
                for a in set.funcs[i].terms.iter() {
                    for b in set.funcs[j].terms.iter() {
                        acc += a.w
                            * b.w
                            * self.kernel.coupling[a.block as usize][b.block as usize]
                            * k[a.atom as usize * la + b.atom as usize];
                    }
                }
                out[i * m + j] = acc;
                out[j * m + i] = acc;
            }
        }
        out
    }

    /// Condition on new functionals with observed values (row-major `m × ncols`),
    /// escalating the nugget if needed.
    pub fn condition(&self, functionals: &[LinearFunctional], values: &[f64]) -> Result<Self> {
        self.condition_with(functionals, values, &[], JitterPolicy::Escalate).map(|(s, _)| s)
    }

    /// Condition and additionally record augmented points for space-filling selection.
    ///
    /// Returns the new state and the indices of functionals that were dropped
    /// (only possible under [`JitterPolicy::DropDependent`]).
    pub fn condition_with(
        &self,
        functionals: &[LinearFunctional],
        values: &[f64],
        points: &[AugPoint],
        policy: JitterPolicy,
    ) -> Result<(Self, Vec<usize>)> {
        let m = functionals.len();
        let nc = self.ncols;
        if values.len() != m * nc {
            return Err(Error::InvalidInput(format!(
                "expected {} values for {m} functionals, got {}",
                m * nc,
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite observation".into()));
        }
        let s_dims = self.kernel.spatial_dims();
        if points.iter().any(|pt| pt.x.len() != s_dims) {
            return Err(Error::InvalidInput("augmented point has wrong dimension".into()));
        }
        if m == 0 && points.is_empty() {
            return Ok((self.clone(), Vec::new()));
        }

        let set = self.localize(functionals)?;
        let n = self.dim();
        let mut x = self.cross(&set);
        let block = self.local_block(&set);
        if block.iter().chain(&x).any(|v| !v.is_finite()) {
            return Err(Error::KernelEvaluation("non-finite Gram entry".into()));
        }
        self.chol.solve_lower_in_place(&mut x, m);
        let mut schur = vec![0.0; m * m];
        for r in 0..m {
            for c in 0..=r {
                let v = block[r * m + c] - dot(&x[r * n..(r + 1) * n], &x[c * n..(c + 1) * n]);
                schur[r * m + c] = v;
                schur[c * m + r] = v;
            }
        }
        let diag: Vec<f64> = (0..m).map(|r| block[r * m + r]).collect();
        // Rows with (near) zero prior variance get a floor tied to the overall scale.
        let floor = 1e-12 * self.mean_diag(&diag);
        let scale: Vec<f64> = diag.iter().map(|d| d.max(floor)).collect();

        let (kept, ls, nug) = match policy {
            JitterPolicy::Escalate => {
                let mut level = JITTER_START;
                loop {
                    let nu: Vec<f64> = scale.iter().map(|s| level * s).collect();
                    let mut a = schur.clone();
                    for r in 0..m {
                        a[r * m + r] += nu[r];
                    }
                    match crate::linalg::cholesky_relative(&mut a, m, &diag) {
                        Ok(()) => break ((0..m).collect::<Vec<_>>(), a, nu),
                        Err(row) if level * 10.0 <= JITTER_MAX * (1.0 + 1e-9) => {
                            log::debug!("relative nugget {level:e} failed at new row {row}; escalating");
                            level *= 10.0;
                        }
                        Err(row) => {
                            return Err(Error::SingularInformation(format!(
                                "factorization failed at new row {row} with relative nugget {level:e}"
                            )))
                        }
                    }
                }
            }
            JitterPolicy::DropDependent => {
                let nu: Vec<f64> = scale.iter().map(|s| JITTER_START * s).collect();
                let (kept, ls) = pivoted_drop(&schur, m, &diag, &nu);
                let nug = kept.iter().map(|&r| nu[r]).collect();
                (kept, ls, nug)
            }
        };
        let dropped: Vec<usize> = (0..m).filter(|r| !kept.contains(r)).collect();
        if !dropped.is_empty() {
            log::warn!(
                "dropped {} of {m} nearly dependent information functionals",
                dropped.len()
            );
        }
        let k = kept.len();

        // Gather the kept rows.
        let mut xk = vec![0.0; n * k];
        for (slot, &r) in kept.iter().enumerate() {
            xk[slot * n..(slot + 1) * n].copy_from_slice(&x[r * n..(r + 1) * n]);
        }
        let lsk = ls;
        debug_assert_eq!(lsk.len(), k * k);

        // New whitened residuals.
        let mut z = (*self.z).clone();
        for (c, zc) in z.iter_mut().enumerate() {
            let mut rhs: Vec<f64> = kept
                .iter()
                .enumerate()
                .map(|(slot, &r)| {
                    values[r * nc + c] - set.prior_mean[r] - dot(&xk[slot * n..(slot + 1) * n], zc)
                })
                .collect();
            for i in 0..k {
                let row = &lsk[i * k..i * k + i];
                rhs[i] = (rhs[i] - dot(row, &rhs[..i])) / lsk[i * k + i];
            }
            zc.extend_from_slice(&rhs);
        }

        // Intern the kept functionals into the persistent tables.
        let mut params = (*self.params).clone();
        let pid_map: Vec<u32> = set.params.iter().map(|p| params.intern(p)).collect();
        let mut atoms = (*self.atoms).clone();
        let atom_map: Vec<u32> = set
            .atoms
            .atoms
            .iter()
            .map(|a| atoms.intern(Atom { pid: pid_map[a.pid as usize], ..*a }))
            .collect();
        let mut funcs = (*self.funcs).clone();
        let mut vals = (*self.values).clone();
        let mut gdiag = (*self.gram_diag).clone();
        for &r in &kept {
            let terms = set.funcs[r]
                .terms
                .iter()
                .map(|t| ITerm { atom: atom_map[t.atom as usize], ..*t })
                .collect();
            funcs.push(IFunc { terms });
            vals.extend_from_slice(&values[r * nc..(r + 1) * nc]);
            gdiag.push(diag[r]);
        }
        let mut nugget = (*self.nugget).clone();
        nugget.extend_from_slice(&nug);
        let mut history = (*self.history).clone();
        for pt in points {
            let pid = params.intern(&pt.p);
            let mut xx = [0.0; MAX_SPATIAL_DIMS];
            xx[..s_dims].copy_from_slice(&pt.x);
            history.push((pid, xx));
        }

        let state = Self {
            kernel: self.kernel.clone(),
            mean: self.mean.clone(),
            ncols: nc,
            params: Arc::new(params),
            atoms: Arc::new(atoms),
            funcs: Arc::new(funcs),
            values: Arc::new(vals),
            z: Arc::new(z),
            nugget: Arc::new(nugget),
            gram_diag: Arc::new(gdiag),
            chol: self.chol.bordered(&xk, &lsk, k),
            history: Arc::new(history),
            alpha: OnceLock::new(),
        };
        Ok((state, dropped))
    }

    /// `G⁻¹ (f − 𝓘a)`, one vector per column (computed once per state).
    fn alpha(&self) -> Arc<Vec<Vec<f64>>> {
        self.alpha
            .get_or_init(|| {
                let n = self.dim();
                let mut buf: Vec<f64> = self.z.iter().flatten().copied().collect();
                self.chol.solve_upper_in_place(&mut buf, self.ncols);
                Arc::new(buf.chunks(n.max(1)).map(|c| c.to_vec()).take(self.ncols).collect())
            })
            .clone()
    }

    /// Posterior means of queries, `m × ncols`. Cheaper than [`Self::posterior`].
    pub fn posterior_mean(&self, queries: &[LinearFunctional]) -> Result<DMatrix<f64>> {
        let set = self.localize(queries)?;
        let m = queries.len();
        let n = self.dim();
        let mut out = DMatrix::zeros(m, self.ncols);
        let cross = self.cross(&set);
        let alpha = if n > 0 { Some(self.alpha()) } else { None };
        for q in 0..m {
            for c in 0..self.ncols {
                let mut v = set.prior_mean[q];
                if let Some(a) = &alpha {
                    v += dot(&cross[q * n..(q + 1) * n], &a[c]);
                }
                out[(q, c)] = v;
            }
        }
        Ok(out)
    }

    /// Start an incremental posterior for `queries`.
    pub fn query_cache(&self, queries: &[LinearFunctional]) -> Result<QueryCache> {
        let set = self.localize(queries)?;
        let prior = self.local_block(&set);
        let m = set.funcs.len();
        Ok(QueryCache { set, prior, w: vec![Vec::new(); m], rows: 0, blocks: Vec::new() })
    }

    /// Posterior of the cached queries under this state. The cache is reused if
    /// this state extends the one it was last used with, and rebuilt otherwise.
    pub fn posterior_cached(&self, cache: &mut QueryCache) -> Result<QueryPosterior> {
        let n = self.dim();
        let m = cache.len();
        let ids = self.chol.block_ids();
        if cache.rows > n || !ids.starts_with(&cache.blocks) {
            cache.w.iter_mut().for_each(Vec::clear);
            cache.rows = 0;
            cache.blocks.clear();
        }
        let r0 = cache.rows;
        if n > r0 {
            let k = self.cross_rows(&cache.set, r0);
            let fresh = n - r0;
            for (q, wq) in cache.w.iter_mut().enumerate() {
                wq.reserve(fresh);
                for i in r0..n {
                    let row = self.chol.row(i);
                    let v = (k[q * fresh + (i - r0)] - dot(&row[..i], &wq[..i])) / row[i];
                    wq.push(v);
                }
            }
            if cache.w.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::KernelEvaluation("non-finite cross covariance".into()));
            }
        }
        cache.rows = n;
        cache.blocks = ids;
        let prior_cov = DMatrix::from_row_slice(m, m, &cache.prior);
        let mut cov = prior_cov.clone();
        for i in 0..m {
            for j in 0..=i {
                let c = cache.prior[i * m + j] - dot(&cache.w[i], &cache.w[j]);
                cov[(i, j)] = c;
                cov[(j, i)] = c;
            }
        }
        let mut mean = DMatrix::zeros(m, self.ncols);
        for q in 0..m {
            for c in 0..self.ncols {
                mean[(q, c)] = cache.set.prior_mean[q] + dot(&cache.w[q], &self.z[c]);
            }
        }
        Ok(QueryPosterior { mean, cov, prior_cov })
    }

    /// Cross covariances between stored rows `r0..` and a local set,
    /// column-major `(dim() − r0) × set.funcs.len()`. Only atoms used by those
    /// rows are evaluated.
    fn cross_rows(&self, set: &LocalSet, r0: usize) -> Vec<f64> {
        let n = self.dim();
        let fresh = n - r0;
        let m = set.funcs.len();
        let blocks = self.kernel.blocks();
        let mut slot: HashMap<u32, usize> = HashMap::new();
        let mut used: Vec<u32> = Vec::new();
        for f in &self.funcs[r0..] {
            for t in f.terms.iter() {
                slot.entry(t.atom).or_insert_with(|| {
                    used.push(t.atom);
                    used.len() - 1
                });
            }
        }
        let na = used.len();
        let mut users: Vec<Vec<(usize, u8, f64)>> = vec![Vec::new(); set.atoms.atoms.len()];
        for (j, f) in set.funcs.iter().enumerate() {
            for t in f.terms.iter() {
                users[t.atom as usize].push((j, t.block, t.w));
            }
        }
        let mut h = vec![0.0; m * na * blocks];
        let mut col = vec![0.0; na];
        for (s_idx, s) in set.atoms.atoms.iter().enumerate() {
            if users[s_idx].is_empty() {
                continue;
            }
            let ps = &set.params[s.pid as usize];
            for (slot_idx, &a_id) in used.iter().enumerate() {
                let a = &self.atoms.atoms[a_id as usize];
                let pa = &self.params.vals[a.pid as usize];
                col[slot_idx] = self.kernel.eval_scalar(&a.x, pa, a.d, &s.x, ps, s.d, sqdist(pa, ps));
            }
            for &(j, bs, w) in &users[s_idx] {
                let hj = &mut h[j * na * blocks..(j + 1) * na * blocks];
                for b in 0..blocks {
                    let c = w * self.kernel.coupling[b][bs as usize];
                    if c == 0.0 {
                        continue;
                    }
                    for (a_idx, &k) in col.iter().enumerate() {
                        hj[a_idx * blocks + b] += c * k;
                    }
                }
            }
        }
        let mut out = vec![0.0; fresh * m];
        for j in 0..m {
            let hj = &h[j * na * blocks..(j + 1) * na * blocks];
            for (i, f) in self.funcs[r0..].iter().enumerate() {
                out[j * fresh + i] =
                    f.terms.iter().map(|t| t.w * hj[slot[&t.atom] * blocks + t.block as usize]).sum();
            }
        }
        out
    }

    /// Posterior means and covariance of a set of query functionals.
    pub fn posterior(&self, queries: &[LinearFunctional]) -> Result<QueryPosterior> {
        self.posterior_impl(queries, true)
    }

    fn posterior_impl(&self, queries: &[LinearFunctional], with_mean: bool) -> Result<QueryPosterior> {
        let set = self.localize(queries)?;
        let m = queries.len();
        let n = self.dim();
        let prior = self.local_block(&set);
        let prior_cov = DMatrix::from_row_slice(m, m, &prior);
        let mut v = self.cross(&set);
        self.chol.solve_lower_in_place(&mut v, m);
        let mut cov = prior_cov.clone();
        for i in 0..m {
            for j in 0..=i {
                let c = prior[i * m + j] - dot(&v[i * n..(i + 1) * n], &v[j * n..(j + 1) * n]);
                cov[(i, j)] = c;
                cov[(j, i)] = c;
            }
        }
        let mut mean = DMatrix::zeros(m, self.ncols);
        if with_mean {
            for q in 0..m {
                for c in 0..self.ncols {
                    mean[(q, c)] = set.prior_mean[q] + dot(&v[q * n..(q + 1) * n], &self.z[c]);
                }
            }
        }
        Ok(QueryPosterior { mean, cov, prior_cov })
    }

    /// Posterior mean of `l` (first column) and posterior covariance between `l` and `l2`.
    pub fn posterior_functional(&self, l: &LinearFunctional, l2: &LinearFunctional) -> Result<(f64, f64)> {
        let post = self.posterior(&[l.clone(), l2.clone()])?;
        Ok((post.mean[(0, 0)], post.cov[(0, 1)]))
    }

    /// `sqrt(Σ_i Σ_c L_i C̄ L_i*)`: the root trace of the posterior covariance of the
    /// query functionals applied to every output column.
    pub fn trace_metric(&self, queries: &[LinearFunctional]) -> Result<f64> {
        if queries.is_empty() {
            return Err(Error::InvalidInput("trace metric needs at least one query".into()));
        }
        let post = self.posterior_impl(queries, false)?;
        let tr: f64 = post.cov.diagonal().iter().map(|v| v.max(0.0)).sum();
        Ok((self.ncols as f64 * tr).sqrt())
    }

    /// Log marginal likelihood of all observed columns under the (jittered) prior.
    pub fn log_marginal_likelihood(&self) -> Result<f64> {
        let n = self.dim();
        if n == 0 {
            return Err(Error::InvalidInput("log marginal likelihood needs observations".into()));
        }
        let quad: f64 = self.z.iter().map(|zc| dot(zc, zc)).sum();
        let nc = self.ncols as f64;
        Ok(-0.5 * quad
            - 0.5 * nc * self.chol.log_det()
            - 0.5 * nc * n as f64 * (2.0 * std::f64::consts::PI).ln())
    }

    /// Minimum squared joint-space distance from each candidate `(x, p)` to the
    /// recorded history.
    pub fn history_min_dist2(&self, candidates: &[Vec<f64>], p: &[f64]) -> Vec<f64> {
        let s = self.kernel.spatial_dims();
        let dps = self.params.distances_to(p);
        candidates
            .iter()
            .map(|c| {
                self.history
                    .iter()
                    .map(|(pid, hx)| {
                        dps[*pid as usize]
                            + c.iter().zip(&hx[..s]).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    }
}

/// Sequential Cholesky of `schur + nu I` that skips rows whose pivot is below
/// `DROP_TOL · ref_diag`. Returns kept rows and their `k × k` row-major factor.
fn pivoted_drop(schur: &[f64], m: usize, ref_diag: &[f64], nu: &[f64]) -> (Vec<usize>, Vec<f64>) {
    let mut kept: Vec<usize> = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for r in 0..m {
        let mut l = Vec::with_capacity(kept.len() + 1);
        for (j, &kj) in kept.iter().enumerate() {
            let s = schur[r * m + kj] - dot(&l, &rows[j][..j]);
            l.push(s / rows[j][j]);
        }
        let piv = schur[r * m + r] - dot(&l, &l);
        if piv > DROP_TOL * ref_diag[r].abs() && piv.is_finite() {
            l.push((piv + nu[r]).sqrt());
            kept.push(r);
            rows.push(l);
        }
    }
    let k = kept.len();
    let mut out = vec![0.0; k * k];
    for (i, row) in rows.iter().enumerate() {
        out[i * k..i * k + row.len()].copy_from_slice(row);
    }
    (kept, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{KernelHyper, Warp};

    fn kernel1() -> JointKernel {
        JointKernel::scalar(KernelHyper::unit(1), Warp::None)
    }

    fn p0() -> ParamVec {
        Arc::from(vec![0.0])
    }

    fn pt(x: f64) -> LinearFunctional {
        LinearFunctional::point(&[x], p0(), 0)
    }

    #[test]
    fn duplicate_point_gram_is_rank_one() {
        let g = gram(&[pt(0.3), pt(0.3)], &kernel1()).unwrap();
        assert!(g.iter().all(|&v| (v - 1.0).abs() < 1e-15));
    }

    #[test]
    fn single_point_gram() {
        let g = gram(&[pt(0.7)], &kernel1()).unwrap();
        assert_eq!(g[(0, 0)], 1.0);
    }

    #[test]
    fn interpolates_observation() {
        let s = GaussianState::new(kernel1(), 1).unwrap().condition(&[pt(0.2)], &[1.5]).unwrap();
        let m = s.posterior_mean(&[pt(0.2)]).unwrap();
        assert!((m[(0, 0)] - 1.5).abs() < 1e-8);
    }

    #[test]
    fn empty_conditioning_is_identity() {
        let s = GaussianState::new(kernel1(), 1).unwrap().condition(&[pt(0.2)], &[1.5]).unwrap();
        let t = s.condition(&[], &[]).unwrap();
        assert_eq!(t.dim(), 1);
        assert_eq!(
            s.posterior(&[pt(0.9)]).unwrap().cov,
            t.posterior(&[pt(0.9)]).unwrap().cov
        );
    }

    #[test]
    fn two_point_posterior_matches_explicit_inverse() {
        let k = |a: f64, b: f64| crate::kernels::matern52(&[a], &[b], &KernelHyper::unit(1)).unwrap();
        let (x1, x2, xq, y1, y2) = (0.0, 0.8, 0.5, 1.0, -0.5);
        let (a, b, d) = (k(x1, x1), k(x1, x2), k(x2, x2));
        let det = a * d - b * b;
        let inv = [[d / det, -b / det], [-b / det, a / det]];
        let kq = [k(xq, x1), k(xq, x2)];
        let w0 = inv[0][0] * kq[0] + inv[0][1] * kq[1];
        let w1 = inv[1][0] * kq[0] + inv[1][1] * kq[1];
        let mean = w0 * y1 + w1 * y2;
        let var = k(xq, xq) - (w0 * kq[0] + w1 * kq[1]);

        let s = GaussianState::new(kernel1(), 1)
            .unwrap()
            .condition(&[pt(x1), pt(x2)], &[y1, y2])
            .unwrap();
        let post = s.posterior(&[pt(xq)]).unwrap();
        assert!((post.mean[(0, 0)] - mean).abs() < 1e-9);
        assert!((post.cov[(0, 0)] - var).abs() < 1e-9);
    }

    #[test]
    fn unconditioned_query_returns_prior() {
        let s = GaussianState::new(kernel1(), 1).unwrap();
        let (m, c) = s.posterior_functional(&pt(0.1), &pt(0.4)).unwrap();
        assert_eq!(m, 0.0);
        assert!((c - crate::kernels::matern52(&[0.1], &[0.4], &KernelHyper::unit(1)).unwrap()).abs() < 1e-15);
        assert!((s.trace_metric(&[pt(0.3)]).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn log_likelihood_single_zero_observation() {
        let s = GaussianState::new(kernel1(), 1).unwrap().condition(&[pt(0.0)], &[0.0]).unwrap();
        let nu = s.nugget()[0];
        let expect = -0.5 * (1.0 + nu).ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((s.log_marginal_likelihood().unwrap() - expect).abs() < 1e-14);
    }

    #[test]
    fn drop_policy_discards_duplicates() {
        let s = GaussianState::new(kernel1(), 1).unwrap();
        let (t, dropped) = s
            .condition_with(&[pt(0.1), pt(0.1), pt(0.9)], &[1.0, 1.0, 2.0], &[], JitterPolicy::DropDependent)
            .unwrap();
        assert_eq!(dropped, vec![1]);
        assert_eq!(t.dim(), 2);
    }

    #[test]
    fn nonfinite_values_are_rejected() {
        let s = GaussianState::new(kernel1(), 1).unwrap();
        assert!(s.condition(&[pt(0.1)], &[f64::NAN]).is_err());
        assert!(s.condition(&[pt(0.1)], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn multi_column_shares_factor() {
        let s = GaussianState::new(kernel1(), 2)
            .unwrap()
            .condition(&[pt(0.0), pt(1.0)], &[1.0, 2.0, 3.0, 4.0])
            .unwrap();
        let m = s.posterior_mean(&[pt(0.0), pt(1.0)]).unwrap();
        assert!((m[(0, 0)] - 1.0).abs() < 1e-8 && (m[(0, 1)] - 2.0).abs() < 1e-8);
        assert!((m[(1, 0)] - 3.0).abs() < 1e-8 && (m[(1, 1)] - 4.0).abs() < 1e-8);
    }

    #[test]
    fn history_distances() {
        let p: ParamVec = Arc::from(vec![0.0]);
        let s = GaussianState::new(kernel1(), 1)
            .unwrap()
            .condition_with(&[], &[], &[AugPoint { x: vec![0.5], p: p.clone() }], JitterPolicy::Escalate)
            .unwrap()
            .0;
        let d = s.history_min_dist2(&[vec![1.0], vec![0.5]], &[0.0]);
        assert!((d[0] - 0.25).abs() < 1e-15 && d[1] == 0.0);
    }

    #[test]
    fn cached_posterior_tracks_conditioning() {
        let k = JointKernel::fhn(KernelHyper::new(1.3, 0.8, 1.1, 0.5, 1).unwrap());
        let pa: ParamVec = Arc::from(vec![0.4, 1.0]);
        let pb: ParamVec = Arc::from(vec![0.5, 0.9]);
        let d = [DerivOrder::new(0, 1)];
        let q = vec![
            LinearFunctional::new().with(&[2.5], pa.clone(), 0, &[], 0.7).with(&[3.5], pa.clone(), 1, &[], -1.2),
            LinearFunctional::point(&[1.0], pb.clone(), 1),
        ];
        let mut s = GaussianState::new(k.clone(), 2).unwrap();
        let mut cache = s.query_cache(&q).unwrap();
        for step in 0..4 {
            let x = 0.5 + step as f64;
            let funcs = vec![
                LinearFunctional::new().with(&[x], pa.clone(), 0, &d, 1.0).with(&[x], pa.clone(), 1, &[], 0.3),
                LinearFunctional::point(&[x + 0.25], pb.clone(), 1),
            ];
            let vals = [0.1 * x, -0.2, 0.3, 0.05 * x];
            s = s.condition(&funcs, &vals).unwrap();
            let direct = s.posterior(&q).unwrap();
            let cached = s.posterior_cached(&mut cache).unwrap();
            assert_eq!(cache.rows(), s.dim());
            assert!((direct.mean.clone() - cached.mean).amax() < 1e-10);
            assert!((direct.cov.clone() - cached.cov).amax() < 1e-10);
        }
        // An unrelated state forces a rebuild.
        let other = GaussianState::new(k, 2).unwrap().condition(&[LinearFunctional::point(&[0.3], pa, 0)], &[1.0, 2.0]).unwrap();
        let direct = other.posterior(&q).unwrap();
        let cached = other.posterior_cached(&mut cache).unwrap();
        assert_eq!(cache.rows(), 1);
        assert!((direct.cov - cached.cov).amax() < 1e-12);
    }
}
