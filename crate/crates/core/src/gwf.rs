//! Steady groundwater flow `−∇·(p ∇u) = 0` on the unit square.
//!
//! Piecewise-linear finite elements on a structured triangulation, Dirichlet data
//! `u = x₁` on the bottom edge and `u = 1 − x₁` on the top edge, natural (zero
//! flux) conditions on the sides. The conductivity is piecewise constant over an
//! `N × N` grid of cells.

use std::io::Write;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::gp::{AugPoint, LinearFunctional, ParamVec};
use crate::kernels::{matern52, JointKernel, KernelHyper};
use crate::linalg::BandedSpd;
use crate::sensitivity::{GradientEval, InfoBatch, SensitivityMode, SensitivityProblem};
use crate::{Error, Result};

/// Grid intervals per axis of the default mesh (33 × 33 nodes).
pub const DEFAULT_INTERVALS: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundaryTag {
    Interior,
    Bottom,
    Top,
    Left,
    Right,
}

/// Structured triangulation of `[0, 1]²`; every grid square is split along its
/// bottom-left to top-right diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct Mesh {
    pub intervals: usize,
    pub nodes: Vec<[f64; 2]>,
    pub elements: Vec<[usize; 3]>,
    pub tags: Vec<BoundaryTag>,
}

/// Default 33 × 33 node mesh.
pub fn build_mesh() -> Mesh {
    build_mesh_with(DEFAULT_INTERVALS)
}

pub fn build_mesh_with(intervals: usize) -> Mesh {
    let m = intervals;
    let side = m + 1;
    let h = 1.0 / m as f64;
    let mut nodes = Vec::with_capacity(side * side);
    let mut tags = Vec::with_capacity(side * side);
    for j in 0..side {
        for i in 0..side {
            nodes.push([i as f64 * h, j as f64 * h]);
            tags.push(if j == 0 {
                BoundaryTag::Bottom
            } else if j == m {
                BoundaryTag::Top
            } else if i == 0 {
                BoundaryTag::Left
            } else if i == m {
                BoundaryTag::Right
            } else {
                BoundaryTag::Interior
            });
        }
    }
    let mut elements = Vec::with_capacity(2 * m * m);
    for j in 0..m {
        for i in 0..m {
            let bl = j * side + i;
            let (br, tl) = (bl + 1, bl + side);
            let tr = tl + 1;
            elements.push([bl, br, tr]);
            elements.push([bl, tr, tl]);
        }
    }
    Mesh { intervals: m, nodes, elements, tags }
}

impl Mesh {
    pub fn n_nodes(&self) -> usize {
        self.nodes.len()
    }

    /// Node at grid position `(i, j)`.
    pub fn node(&self, i: usize, j: usize) -> usize {
        j * (self.intervals + 1) + i
    }

    /// Node closest to `x`.
    pub fn nearest_node(&self, x: [f64; 2]) -> usize {
        let m = self.intervals as f64;
        let i = (x[0] * m).round().clamp(0.0, m) as usize;
        let j = (x[1] * m).round().clamp(0.0, m) as usize;
        self.node(i, j)
    }

    /// Node exactly at `x`, if any.
    pub fn node_at(&self, x: &[f64]) -> Option<usize> {
        if x.len() != 2 {
            return None;
        }
        let k = self.nearest_node([x[0], x[1]]);
        let y = self.nodes[k];
        ((y[0] - x[0]).abs() < 1e-12 && (y[1] - x[1]).abs() < 1e-12).then_some(k)
    }

    pub fn area(&self, e: usize) -> f64 {
        let [a, b, c] = self.elements[e].map(|k| self.nodes[k]);
        0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
    }

    pub fn centroid(&self, e: usize) -> [f64; 2] {
        let [a, b, c] = self.elements[e].map(|k| self.nodes[k]);
        [(a[0] + b[0] + c[0]) / 3.0, (a[1] + b[1] + c[1]) / 3.0]
    }

    /// Unit-conductivity P1 stiffness of element `e`.
    pub fn element_stiffness(&self, e: usize) -> [[f64; 3]; 3] {
        let [a, b, c] = self.elements[e].map(|k| self.nodes[k]);
        let area = self.area(e);
        let bx = [b[1] - c[1], c[1] - a[1], a[1] - b[1]];
        let cy = [c[0] - b[0], a[0] - c[0], b[0] - a[0]];
        let mut k = [[0.0; 3]; 3];
        for r in 0..3 {
            for s in 0..3 {
                k[r][s] = (bx[r] * bx[s] + cy[r] * cy[s]) / (4.0 * area);
            }
        }
        k
    }

    /// Plain-text node list: `index x1 x2 tag`.
    pub fn write_nodes<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "node,x1,x2,tag")?;
        for (k, (x, t)) in self.nodes.iter().zip(&self.tags).enumerate() {
            writeln!(w, "{k},{:.17e},{:.17e},{t:?}", x[0], x[1])?;
        }
        Ok(())
    }

    /// Plain-text element list: `index n0 n1 n2`.
    pub fn write_elements<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "element,n0,n1,n2")?;
        for (k, e) in self.elements.iter().enumerate() {
            writeln!(w, "{k},{},{},{}", e[0], e[1], e[2])?;
        }
        Ok(())
    }
}

/// Assignment of mesh elements to the `N × N` conductivity cells.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamField {
    pub n: usize,
    pub cell_of_element: Vec<usize>,
    pub elements_of_cell: Vec<Vec<usize>>,
}

/// Cells by centroid containment; cell index is `row · N + column`.
pub fn param_cells(mesh: &Mesh, n: usize) -> Result<ParamField> {
    if n == 0 {
        return Err(Error::InvalidInput("need at least one parameter cell".into()));
    }
    let nf = n as f64;
    let mut elements_of_cell = vec![Vec::new(); n * n];
    let cell_of_element: Vec<usize> = (0..mesh.elements.len())
        .map(|e| {
            let c = mesh.centroid(e);
            let ix = ((c[0] * nf).floor() as usize).min(n - 1);
            let iy = ((c[1] * nf).floor() as usize).min(n - 1);
            let cell = iy * n + ix;
            elements_of_cell[cell].push(e);
            cell
        })
        .collect();
    Ok(ParamField { n, cell_of_element, elements_of_cell })
}

impl ParamField {
    pub fn n_cells(&self) -> usize {
        self.n * self.n
    }

    pub fn centroids(&self) -> Vec<[f64; 2]> {
        let nf = self.n as f64;
        (0..self.n_cells())
            .map(|c| [((c % self.n) as f64 + 0.5) / nf, ((c / self.n) as f64 + 0.5) / nf])
            .collect()
    }
}

/// Which nodes carry Dirichlet conditions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DirichletNodes {
    /// Top and bottom edges (the flow problem).
    TopBottom,
    /// Every boundary node (for patch tests).
    AllBoundary,
}

/// Free/constrained node bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct DofMap {
    pub free_of_node: Vec<Option<usize>>,
    pub node_of_free: Vec<usize>,
    pub bandwidth: usize,
}

impl DofMap {
    pub fn new(mesh: &Mesh, which: DirichletNodes) -> Self {
        let constrained = |t: BoundaryTag| match which {
            DirichletNodes::TopBottom => matches!(t, BoundaryTag::Top | BoundaryTag::Bottom),
            DirichletNodes::AllBoundary => t != BoundaryTag::Interior,
        };
        let mut free_of_node = vec![None; mesh.n_nodes()];
        let mut node_of_free = Vec::new();
        for (k, &t) in mesh.tags.iter().enumerate() {
            if !constrained(t) {
                free_of_node[k] = Some(node_of_free.len());
                node_of_free.push(k);
            }
        }
        let mut bandwidth = 0;
        for e in &mesh.elements {
            for &a in e {
                for &b in e {
                    if let (Some(fa), Some(fb)) = (free_of_node[a], free_of_node[b]) {
                        bandwidth = bandwidth.max(fa.abs_diff(fb));
                    }
                }
            }
        }
        Self { free_of_node, node_of_free, bandwidth }
    }

    pub fn n_free(&self) -> usize {
        self.node_of_free.len()
    }
}

/// Boundary data of the flow problem: `x₁` at the bottom, `1 − x₁` at the top.
pub fn flow_dirichlet(x: [f64; 2]) -> f64 {
    if x[1] < 0.5 {
        x[0]
    } else {
        1.0 - x[0]
    }
}

/// Assembled system `A u_f = b` for one conductivity field.
#[derive(Debug, Clone)]
pub struct DiscreteSystem {
    /// Stiffness restricted to free nodes (not factored).
    pub a: BandedSpd,
    pub b: Vec<f64>,
    /// Dirichlet lift: prescribed values on constrained nodes, zero elsewhere.
    pub lift: Vec<f64>,
}

/// Assemble `A(p) = Σ p_i A_i` and the lifted load.
pub fn assemble(
    mesh: &Mesh,
    field: &ParamField,
    dofs: &DofMap,
    p: &[f64],
    dirichlet: impl Fn([f64; 2]) -> f64,
) -> Result<DiscreteSystem> {
    if p.len() != field.n_cells() {
        return Err(Error::InvalidInput(format!(
            "expected {} conductivities, got {}",
            field.n_cells(),
            p.len()
        )));
    }
    if let Some(v) = p.iter().find(|&&v| !(v > 0.0) || !v.is_finite()) {
        return Err(Error::Domain(format!("conductivity must be positive, got {v}")));
    }
    let lift: Vec<f64> = (0..mesh.n_nodes())
        .map(|k| if dofs.free_of_node[k].is_none() { dirichlet(mesh.nodes[k]) } else { 0.0 })
        .collect();
    let mut a = BandedSpd::zeros(dofs.n_free(), dofs.bandwidth);
    let mut b = vec![0.0; dofs.n_free()];
    for (e, nodes) in mesh.elements.iter().enumerate() {
        let ke = mesh.element_stiffness(e);
        let pe = p[field.cell_of_element[e]];
        for r in 0..3 {
            let Some(fr) = dofs.free_of_node[nodes[r]] else { continue };
            for s in 0..3 {
                let v = pe * ke[r][s];
                match dofs.free_of_node[nodes[s]] {
                    Some(fs) if fs <= fr => a.add(fr, fs, v),
                    Some(_) => {}
                    None => b[fr] -= v * lift[nodes[s]],
                }
            }
        }
    }
    Ok(DiscreteSystem { a, b, lift })
}

/// Nodal solution for a given assembled system.
pub fn solve_system(sys: &DiscreteSystem, dofs: &DofMap) -> Result<Vec<f64>> {
    let mut f = sys.a.clone();
    f.factor().map_err(|e| Error::Numerical(format!("singular stiffness: {e}")))?;
    let uf = f.solve(&sys.b);
    let mut u = sys.lift.clone();
    for (fi, &k) in dofs.node_of_free.iter().enumerate() {
        u[k] = uf[fi];
    }
    Ok(u)
}

/// Solve the flow problem on the default mesh for conductivities `p` over `N × N` cells.
pub fn gwf_solve(p: &[f64]) -> Result<Vec<f64>> {
    let n = (p.len() as f64).sqrt().round() as usize;
    if n * n != p.len() {
        return Err(Error::InvalidInput("conductivity count must be a perfect square".into()));
    }
    let mesh = build_mesh();
    let field = param_cells(&mesh, n)?;
    let dofs = DofMap::new(&mesh, DirichletNodes::TopBottom);
    let sys = assemble(&mesh, &field, &dofs, p, flow_dirichlet)?;
    solve_system(&sys, &dofs)
}

/// Observations at mesh nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct GwfData {
    pub nodes: Vec<usize>,
    pub values: Vec<f64>,
    pub p_star: Vec<f64>,
    pub prior_seed: u64,
    pub noise_seed: u64,
    pub noise_std: f64,
}

/// Problem setup.
#[derive(Debug, Clone, PartialEq)]
pub struct GwfConfig {
    /// Conductivity cells per axis.
    pub n: usize,
    pub intervals: usize,
    pub noise: f64,
    pub noise_reading: crate::fhn::NoiseReading,
    pub prior_mean: f64,
    pub prior_sigma: f64,
    pub prior_ell: f64,
    /// Lower clamp for sampled true conductivities.
    pub min_conductivity: f64,
    /// Data sites along each axis (`0.1, 0.3, …, 0.9` by default).
    pub data_sites: Vec<f64>,
}

impl Default for GwfConfig {
    fn default() -> Self {
        Self {
            n: 2,
            intervals: DEFAULT_INTERVALS,
            noise: 1e-2,
            noise_reading: crate::fhn::NoiseReading::StdDev,
            prior_mean: 5.0,
            prior_sigma: 1.0,
            prior_ell: 1.0,
            min_conductivity: 0.1,
            data_sites: vec![0.1, 0.3, 0.5, 0.7, 0.9],
        }
    }
}

/// Prior covariance of the cell conductivities: Matérn 5/2 over cell centroids.
pub fn prior_covariance(field: &ParamField, sigma: f64, ell: f64) -> Result<DMatrix<f64>> {
    let hyp = KernelHyper::new(sigma, ell, ell, 0.0, 2)?;
    let c = field.centroids();
    let n = c.len();
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            m[(i, j)] = matern52(&c[i], &c[j], &hyp)?;
        }
    }
    Ok(m)
}

/// The benchmark problem.
#[derive(Debug, Clone)]
pub struct GwfProblem {
    pub cfg: GwfConfig,
    pub mesh: Mesh,
    pub field: ParamField,
    pub dofs: DofMap,
    pub data: GwfData,
    prior_mean: DVector<f64>,
    prior_cov: DMatrix<f64>,
    prior_chol: nalgebra::Cholesky<f64, nalgebra::Dyn>,
    candidates: Vec<Vec<f64>>,
    priority: Vec<usize>,
}

/// Nodal solution plus the assembled operator it came from.
#[derive(Debug, Clone)]
pub struct GwfSolution {
    pub u: Vec<f64>,
    pub system: DiscreteSystem,
    factor: Arc<BandedSpd>,
}

impl GwfSolution {
    /// Solve `A x = b` on free nodes with the stored factorization.
    pub fn solve_free(&self, b: &[f64]) -> Vec<f64> {
        self.factor.solve(b)
    }
}

impl GwfProblem {
    fn layout(cfg: &GwfConfig) -> Result<(Mesh, ParamField, DofMap, DMatrix<f64>)> {
        let mesh = build_mesh_with(cfg.intervals);
        let field = param_cells(&mesh, cfg.n)?;
        let dofs = DofMap::new(&mesh, DirichletNodes::TopBottom);
        let cov = prior_covariance(&field, cfg.prior_sigma, cfg.prior_ell)?;
        Ok((mesh, field, dofs, cov))
    }

    /// Build the problem with data from a prior-sampled truth.
    pub fn generate(cfg: GwfConfig, prior_seed: u64, noise_seed: u64) -> Result<Self> {
        let (mesh, field, dofs, cov) = Self::layout(&cfg)?;
        let chol = robust_cholesky(&cov)?;
        let mut rng = ChaCha8Rng::seed_from_u64(prior_seed);
        let p_star = sample_conductivities(&cfg, &chol, &mut rng);
        let data = gwf_generate_data(&cfg, &mesh, &field, &dofs, &p_star, prior_seed, noise_seed)?;
        Self::with_data(cfg, data)
    }

    /// Build the problem around existing data.
    pub fn with_data(cfg: GwfConfig, data: GwfData) -> Result<Self> {
        let (mesh, field, dofs, cov) = Self::layout(&cfg)?;
        if data.nodes.len() != data.values.len() {
            return Err(Error::InvalidInput("data nodes and values differ in length".into()));
        }
        let prior_chol = robust_cholesky(&cov)?;
        let candidates: Vec<Vec<f64>> =
            dofs.node_of_free.iter().map(|&k| mesh.nodes[k].to_vec()).collect();
        let priority = data.nodes.iter().filter_map(|&k| dofs.free_of_node[k]).collect();
        let prior_mean = DVector::from_element(field.n_cells(), cfg.prior_mean);
        Ok(Self { cfg, mesh, field, dofs, data, prior_mean, prior_cov: cov, prior_chol, candidates, priority })
    }

    /// Draw from the conductivity prior, clamped below at the minimum conductivity.
    pub fn sample_prior<R: rand::Rng>(&self, rng: &mut R) -> Vec<f64> {
        sample_conductivities(&self.cfg, &self.prior_chol, rng)
    }

    pub fn prior_mean(&self) -> &DVector<f64> {
        &self.prior_mean
    }

    pub fn prior_cov(&self) -> &DMatrix<f64> {
        &self.prior_cov
    }

    fn misfit_weight(&self) -> f64 {
        1.0 / self.cfg.noise_reading.variance(self.cfg.noise)
    }

    /// `(1/σ²) Σ (u(x_j) − y_j)²`.
    pub fn misfit(&self, u: &[f64]) -> f64 {
        self.misfit_weight()
            * self.data.nodes.iter().zip(&self.data.values).map(|(&k, &y)| (u[k] - y).powi(2)).sum::<f64>()
    }

    fn prior_quad(&self, p: &[f64]) -> f64 {
        let r = DVector::from_column_slice(p) - &self.prior_mean;
        let s = self.prior_chol.solve(&r);
        r.dot(&s)
    }

    /// `∂g/∂u` as a nodal vector.
    pub fn dgdu_nodal(&self, u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; u.len()];
        let w = 2.0 * self.misfit_weight();
        for (&k, &y) in self.data.nodes.iter().zip(&self.data.values) {
            out[k] += w * (u[k] - y);
        }
        out
    }

    /// `(A_i u)` restricted to free nodes, for every cell `i`.
    pub fn cell_actions(&self, u: &[f64]) -> Vec<Vec<f64>> {
        self.field
            .elements_of_cell
            .iter()
            .map(|elems| {
                let mut out = vec![0.0; self.dofs.n_free()];
                for &e in elems {
                    let nodes = self.mesh.elements[e];
                    let ke = self.mesh.element_stiffness(e);
                    for r in 0..3 {
                        if let Some(fr) = self.dofs.free_of_node[nodes[r]] {
                            out[fr] += (0..3).map(|s| ke[r][s] * u[nodes[s]]).sum::<f64>();
                        }
                    }
                }
                out
            })
            .collect()
    }

    /// Adjoint variable `λ` on all nodes (zero on Dirichlet nodes).
    pub fn adjoint_oracle(&self, sol: &GwfSolution) -> Vec<f64> {
        let dgdu = self.dgdu_nodal(&sol.u);
        let rhs: Vec<f64> = self.dofs.node_of_free.iter().map(|&k| dgdu[k]).collect();
        let lf = sol.solve_free(&rhs);
        let mut lam = vec![0.0; self.mesh.n_nodes()];
        for (fi, &k) in self.dofs.node_of_free.iter().enumerate() {
            lam[k] = lf[fi];
        }
        lam
    }

    /// Column `j` of `A` as `(free index, value)` pairs.
    fn stencil(&self, sol: &GwfSolution, j: usize) -> Vec<(usize, f64)> {
        let a = &sol.system.a;
        let bw = a.bandwidth();
        let lo = j.saturating_sub(bw);
        let hi = (j + bw).min(a.dim() - 1);
        (lo..=hi).map(|k| (k, a.get(k, j))).filter(|&(_, v)| v != 0.0).collect()
    }

    fn node_functional(&self, sol: &GwfSolution, p: &ParamVec, j: usize) -> LinearFunctional {
        let mut l = LinearFunctional::new();
        for (k, v) in self.stencil(sol, j) {
            l.push(&self.mesh.nodes[self.dofs.node_of_free[k]], p.clone(), 0, &[], v);
        }
        l
    }

    fn free_index(&self, loc: &[f64]) -> Result<usize> {
        let k = self.mesh.node_at(loc).ok_or(Error::Interpolation(loc.first().copied().unwrap_or(f64::NAN)))?;
        self.dofs.free_of_node[k].ok_or(Error::InvalidSelector(k))
    }

    pub fn objective_value(&self, p: &[f64]) -> Result<f64> {
        let sol = self.solve(p)?;
        self.objective(p, &sol)
    }
}

fn sample_conductivities<R: rand::Rng>(
    cfg: &GwfConfig,
    chol: &nalgebra::Cholesky<f64, nalgebra::Dyn>,
    rng: &mut R,
) -> Vec<f64> {
    let n = chol.l_dirty().nrows();
    let xi = DVector::from_fn(n, |_, _| StandardNormal.sample(rng));
    let draw = chol.l() * xi;
    draw.iter()
        .map(|v| {
            let c = cfg.prior_mean + v;
            if c < cfg.min_conductivity {
                log::info!("clamping sampled conductivity {c} to {}", cfg.min_conductivity);
                cfg.min_conductivity
            } else {
                c
            }
        })
        .collect()
}

fn robust_cholesky(cov: &DMatrix<f64>) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    let n = cov.nrows();
    let scale = cov.trace() / n.max(1) as f64;
    let mut jitter = 0.0;
    for _ in 0..12 {
        let m = cov + DMatrix::identity(n, n) * jitter;
        if let Some(c) = m.cholesky() {
            return Ok(c);
        }
        jitter = if jitter == 0.0 { 1e-12 * scale } else { jitter * 10.0 };
    }
    Err(Error::Numerical("prior covariance is not positive definite".into()))
}

/// Observations `y_j = u(x_j; p*) + ξ_j` at the nodes nearest the data sites.
pub fn gwf_generate_data(
    cfg: &GwfConfig,
    mesh: &Mesh,
    field: &ParamField,
    dofs: &DofMap,
    p_star: &[f64],
    prior_seed: u64,
    noise_seed: u64,
) -> Result<GwfData> {
    let sys = assemble(mesh, field, dofs, p_star, flow_dirichlet)?;
    let u = solve_system(&sys, dofs)?;
    let std = cfg.noise_reading.variance(cfg.noise).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
    let mut nodes = Vec::new();
    let mut values = Vec::new();
    for &y in &cfg.data_sites {
        for &x in &cfg.data_sites {
            let k = mesh.nearest_node([x, y]);
            let xi: f64 = StandardNormal.sample(&mut rng);
            nodes.push(k);
            values.push(u[k] + std * xi);
        }
    }
    Ok(GwfData { nodes, values, p_star: p_star.to_vec(), prior_seed, noise_seed, noise_std: std })
}

impl SensitivityProblem for GwfProblem {
    type Solution = GwfSolution;

    fn dim_p(&self) -> usize {
        self.field.n_cells()
    }

    fn spatial_dims(&self) -> usize {
        2
    }

    fn check_params(&self, p: &[f64]) -> Result<()> {
        if p.len() != self.dim_p() {
            return Err(Error::InvalidInput(format!("expected {} parameters, got {}", self.dim_p(), p.len())));
        }
        if let Some(v) = p.iter().find(|&&v| !(v > 0.0) || !v.is_finite()) {
            return Err(Error::Domain(format!("conductivity must be positive, got {v}")));
        }
        Ok(())
    }

    fn solve(&self, p: &[f64]) -> Result<GwfSolution> {
        self.check_params(p)?;
        let system = assemble(&self.mesh, &self.field, &self.dofs, p, flow_dirichlet)?;
        let mut factor = system.a.clone();
        factor.factor()?;
        let uf = factor.solve(&system.b);
        let mut u = system.lift.clone();
        for (fi, &k) in self.dofs.node_of_free.iter().enumerate() {
            u[k] = uf[fi];
        }
        Ok(GwfSolution { u, system, factor: Arc::new(factor) })
    }

    fn objective(&self, p: &[f64], sol: &GwfSolution) -> Result<f64> {
        self.check_params(p)?;
        Ok(self.misfit(&sol.u) + self.prior_quad(p))
    }

    fn dgdp(&self, p: &[f64]) -> Result<DVector<f64>> {
        self.check_params(p)?;
        let r = DVector::from_column_slice(p) - &self.prior_mean;
        Ok(self.prior_chol.solve(&r) * 2.0)
    }

    fn candidates(&self) -> &[Vec<f64>] {
        &self.candidates
    }

    fn priority_candidates(&self, _mode: SensitivityMode) -> &[usize] {
        &self.priority
    }

    fn kernel(&self, hyp: KernelHyper, _mode: SensitivityMode) -> Result<JointKernel> {
        let hyp = KernelHyper { spatial_dims: 2, rho: 0.0, ..hyp };
        hyp.validate()?;
        Ok(JointKernel::gwf(hyp))
    }

    fn forward_info(&self, sol: &GwfSolution, p: &ParamVec, locations: &[Vec<f64>]) -> Result<InfoBatch> {
        self.check_params(p)?;
        let actions = self.cell_actions(&sol.u);
        let mut batch = InfoBatch::default();
        for loc in locations {
            let j = self.free_index(loc)?;
            batch.functionals.push(self.node_functional(sol, p, j));
            batch.values.extend(actions.iter().map(|a| -a[j]));
            batch.points.push(AugPoint { x: loc.clone(), p: p.clone() });
            batch.dfdp_evals += 1;
        }
        Ok(batch)
    }

    fn dgdu_functional(&self, sol: &GwfSolution, p: &ParamVec) -> Result<LinearFunctional> {
        let w = 2.0 * self.misfit_weight();
        let mut l = LinearFunctional::new();
        for (&k, &y) in self.data.nodes.iter().zip(&self.data.values) {
            l.push(&self.mesh.nodes[k], p.clone(), 0, &[], w * (sol.u[k] - y));
        }
        Ok(l)
    }

    fn adjoint_info(&self, sol: &GwfSolution, p: &ParamVec, locations: &[Vec<f64>]) -> Result<InfoBatch> {
        self.check_params(p)?;
        let dgdu = self.dgdu_nodal(&sol.u);
        let mut batch = InfoBatch::default();
        for loc in locations {
            let j = self.free_index(loc)?;
            batch.functionals.push(self.node_functional(sol, p, j));
            batch.values.push(dgdu[self.dofs.node_of_free[j]]);
            batch.points.push(AugPoint { x: loc.clone(), p: p.clone() });
        }
        Ok(batch)
    }

    fn adjoint_projection(&self, sol: &GwfSolution, p: &ParamVec) -> Result<Vec<LinearFunctional>> {
        let actions = self.cell_actions(&sol.u);
        Ok(actions
            .iter()
            .map(|a| {
                let mut l = LinearFunctional::new();
                for (fi, &v) in a.iter().enumerate() {
                    if v != 0.0 {
                        l.push(&self.mesh.nodes[self.dofs.node_of_free[fi]], p.clone(), 0, &[], v);
                    }
                }
                l
            })
            .collect())
    }

    fn exact_gradient_forward(&self, p: &[f64]) -> Result<GradientEval> {
        let sol = self.solve(p)?;
        let dgdu = self.dgdu_nodal(&sol.u);
        let mut grad = self.dgdp(p)?;
        for (i, a) in self.cell_actions(&sol.u).iter().enumerate() {
            let rhs: Vec<f64> = a.iter().map(|v| -v).collect();
            let s = sol.solve_free(&rhs);
            grad[i] += s.iter().zip(&self.dofs.node_of_free).map(|(si, &k)| si * dgdu[k]).sum::<f64>();
        }
        Ok(GradientEval { grad, jac_evals: self.dim_p() })
    }

    fn exact_gradient_adjoint(&self, p: &[f64]) -> Result<GradientEval> {
        let sol = self.solve(p)?;
        let lam = self.adjoint_oracle(&sol);
        let mut grad = self.dgdp(p)?;
        for (i, a) in self.cell_actions(&sol.u).iter().enumerate() {
            grad[i] -= a.iter().zip(&self.dofs.node_of_free).map(|(ai, &k)| ai * lam[k]).sum::<f64>();
        }
        Ok(GradientEval { grad, jac_evals: 1 })
    }

    fn classical_gradient(&self, p: &[f64]) -> Result<GradientEval> {
        self.exact_gradient_adjoint(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mesh_counts_and_orientation() {
        let m = build_mesh();
        assert_eq!(m.n_nodes(), 1089);
        assert_eq!(m.elements.len(), 2048);
        assert!((0..m.elements.len()).all(|e| m.area(e) > 0.0));
    }

    #[test]
    fn single_cell_owns_everything() {
        let m = build_mesh();
        let f = param_cells(&m, 1).unwrap();
        assert!(f.cell_of_element.iter().all(|&c| c == 0));
    }

    #[test]
    fn free_node_count() {
        let m = build_mesh();
        let d = DofMap::new(&m, DirichletNodes::TopBottom);
        assert_eq!(d.n_free(), 31 * 33);
        assert_eq!(d.bandwidth, 34);
    }

    #[test]
    fn unconstrained_rows_sum_to_zero() {
        let m = build_mesh_with(4);
        let mut k = DMatrix::<f64>::zeros(m.n_nodes(), m.n_nodes());
        for (e, nodes) in m.elements.iter().enumerate() {
            let ke = m.element_stiffness(e);
            for r in 0..3 {
                for s in 0..3 {
                    k[(nodes[r], nodes[s])] += 3.0 * ke[r][s];
                }
            }
        }
        for r in 0..m.n_nodes() {
            assert!(k.row(r).sum().abs() < 1e-12);
        }
    }

    #[test]
    fn assembly_is_linear_in_conductivity() {
        let m = build_mesh_with(8);
        let f = param_cells(&m, 2).unwrap();
        let d = DofMap::new(&m, DirichletNodes::TopBottom);
        let p = [1.0, 2.0, 3.0, 4.0];
        let p2 = p.map(|v| 2.0 * v);
        let s1 = assemble(&m, &f, &d, &p, flow_dirichlet).unwrap();
        let s2 = assemble(&m, &f, &d, &p2, flow_dirichlet).unwrap();
        for i in 0..d.n_free() {
            assert!((s2.b[i] - 2.0 * s1.b[i]).abs() < 1e-12);
            for j in i.saturating_sub(d.bandwidth)..=i {
                assert!((s2.a.get(i, j) - 2.0 * s1.a.get(i, j)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn patch_test_reproduces_linear_field() {
        let m = build_mesh_with(8);
        let f = param_cells(&m, 2).unwrap();
        let d = DofMap::new(&m, DirichletNodes::AllBoundary);
        let lin = |x: [f64; 2]| 0.3 + 1.7 * x[0] - 0.4 * x[1];
        let sys = assemble(&m, &f, &d, &[1.0, 1.0, 1.0, 1.0], lin).unwrap();
        let u = solve_system(&sys, &d).unwrap();
        for (k, x) in m.nodes.iter().enumerate() {
            assert!((u[k] - lin(*x)).abs() < 1e-12);
        }
    }

    #[test]
    fn symmetric_field_gives_half_on_midline() {
        let u = gwf_solve(&[3.0; 4]).unwrap();
        let m = build_mesh();
        for i in 0..=32 {
            assert!((u[m.node(i, 16)] - 0.5).abs() < 1e-10);
        }
        for i in 0..=32 {
            let x = i as f64 / 32.0;
            assert_eq!(u[m.node(i, 0)], x);
            assert_eq!(u[m.node(i, 32)], 1.0 - x);
        }
    }

    #[test]
    fn data_nodes_are_nearest_grid_points() {
        let prob = GwfProblem::generate(GwfConfig::default(), 1, 2).unwrap();
        let idx = [3, 10, 16, 22, 29];
        let mut expect = Vec::new();
        for &j in &idx {
            for &i in &idx {
                expect.push(prob.mesh.node(i, j));
            }
        }
        assert_eq!(prob.data.nodes, expect);
        assert!(prob.prior_mean().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn noiseless_data_at_prior_mean_gives_zero_objective() {
        let cfg = GwfConfig { noise: 0.0, ..Default::default() };
        let (mesh, field, dofs, _) = GwfProblem::layout(&cfg).unwrap();
        let data = gwf_generate_data(&cfg, &mesh, &field, &dofs, &[5.0; 4], 0, 0).unwrap();
        let prob = GwfProblem::with_data(GwfConfig::default(), data).unwrap();
        assert!(prob.objective_value(&[5.0; 4]).unwrap().abs() < 1e-20);
        let sol = prob.solve(&[5.0; 4]).unwrap();
        assert!(prob.adjoint_oracle(&sol).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adjoint_selector_values() {
        let prob = GwfProblem::generate(GwfConfig::default(), 3, 4).unwrap();
        let p = crate::sensitivity::param_vec(&[4.0, 5.0, 6.0, 5.5]);
        let sol = prob.solve(&p).unwrap();
        // Far from every data node.
        let far = prob.adjoint_info(&sol, &p, &[vec![0.0, 0.5]]).unwrap();
        assert_eq!(far.values, vec![0.0]);
        let k = prob.data.nodes[7];
        let at = prob.adjoint_info(&sol, &p, &[prob.mesh.nodes[k].to_vec()]).unwrap();
        let expect = 2.0 / 1e-4 * (sol.u[k] - prob.data.values[7]);
        assert!((at.values[0] - expect).abs() < 1e-9 * expect.abs().max(1.0));
        assert!(matches!(
            prob.adjoint_info(&sol, &p, &[vec![0.5, 0.0]]),
            Err(Error::InvalidSelector(_))
        ));
    }

    #[test]
    fn maximum_principle() {
        let prob = GwfProblem::generate(GwfConfig { n: 4, ..Default::default() }, 5, 6).unwrap();
        let sol = prob.solve(&prob.data.p_star).unwrap();
        assert!(sol.u.iter().all(|&v| v >= -1e-10 && v <= 1.0 + 1e-10));
    }

    #[test]
    fn forward_adjoint_and_differences_agree() {
        let prob = GwfProblem::generate(GwfConfig::default(), 7, 8).unwrap();
        let p = [4.5, 5.2, 4.8, 6.0];
        let fwd = prob.exact_gradient_forward(&p).unwrap().grad;
        let adj = prob.exact_gradient_adjoint(&p).unwrap().grad;
        for i in 0..4 {
            let h = 1e-5;
            let (mut a, mut b) = (p, p);
            a[i] += h;
            b[i] -= h;
            let fd = (prob.objective_value(&a).unwrap() - prob.objective_value(&b).unwrap()) / (2.0 * h);
            let scale = fwd[i].abs().max(1.0);
            assert!((fwd[i] - adj[i]).abs() < 1e-8 * scale, "{} vs {}", fwd[i], adj[i]);
            assert!((fd - adj[i]).abs() < 1e-5 * scale, "{fd} vs {}", adj[i]);
        }
    }
}
