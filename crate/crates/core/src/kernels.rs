//! Matérn 5/2 covariance functions on joint (domain, parameter) space.
//!
//! The length-scale matrix is diagonal, `L = diag(ell_x * 1, ell_p * 1)`, with the
//! first [`KernelHyper::spatial_dims`] coordinates being domain coordinates and the
//! remainder parameter coordinates. The scaled distance is
//! `d = sqrt((r - r2)^T L^{-1} (r - r2))`.
//!
//! Partial derivatives (up to second order in each argument) are evaluated in
//! closed form. Writing the kernel as a radial function `k(Δ)` of the scaled
//! difference `Δ = L^{-1/2}(r - r2)`, every mixed partial is a sum over partial
//! matchings of the derivative indices:
//!
//! `∂_{i1..in} k = Σ_matchings F_{n-q}(d) Π_{pairs} δ Π_{unpaired} Δ`
//!
//! where `q` is the number of pairs and `F_{m+1}(d) = F_m'(d) / d`. For Matérn 5/2
//! each `F_m` is a polynomial times `exp(-√5 d)`; the ones singular at `d = 0`
//! always appear multiplied by enough `Δ` factors that the product vanishes there.

use crate::{Error, Result};

const SQRT5: f64 = 2.236_067_977_499_79;

/// Hyperparameters of the joint-space Matérn 5/2 kernels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelHyper {
    /// Amplitude σ.
    pub sigma: f64,
    /// Length-scale shared by all domain coordinates.
    pub ell_x: f64,
    /// Length-scale shared by all parameter coordinates.
    pub ell_p: f64,
    /// Coupling between the two output blocks (only used by the FitzHugh–Nagumo kernel).
    pub rho: f64,
    /// Number of leading coordinates that are domain coordinates.
    pub spatial_dims: usize,
}

impl KernelHyper {
    pub fn new(sigma: f64, ell_x: f64, ell_p: f64, rho: f64, spatial_dims: usize) -> Result<Self> {
        let hyp = Self { sigma, ell_x, ell_p, rho, spatial_dims };
        hyp.validate()?;
        Ok(hyp)
    }

    /// Unit amplitude and length-scales, no coupling.
    pub fn unit(spatial_dims: usize) -> Self {
        Self { sigma: 1.0, ell_x: 1.0, ell_p: 1.0, rho: 0.0, spatial_dims }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.sigma) || !positive(self.ell_x) || !positive(self.ell_p) {
            return Err(Error::InvalidInput(format!(
                "kernel amplitude and length-scales must be positive, got sigma={}, ell_x={}, ell_p={}",
                self.sigma, self.ell_x, self.ell_p
            )));
        }
        if !(self.rho.is_finite() && self.rho.abs() <= 1.0) {
            return Err(Error::InvalidInput(format!("coupling rho={} outside [-1, 1]", self.rho)));
        }
        Ok(())
    }

    /// Diagonal entry of `L` for joint axis `axis`.
    #[inline]
    pub fn length_scale(&self, axis: usize) -> f64 {
        if axis < self.spatial_dims {
            self.ell_x
        } else {
            self.ell_p
        }
    }

    /// Output coupling matrix `[[1, ρ], [ρ, 1]]`.
    pub fn coupling(&self) -> [[f64; 2]; 2] {
        [[1.0, self.rho], [self.rho, 1.0]]
    }
}

/// A partial derivative of the given order along one joint coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DerivOrder {
    pub axis: usize,
    pub order: u8,
}

impl DerivOrder {
    pub fn new(axis: usize, order: u8) -> Self {
        Self { axis, order }
    }
}

/// Maximum total derivative order per kernel argument.
pub const MAX_ORDER_PER_ARG: usize = 2;

/// Expand a derivative list into repeated axis indices, checking kernel smoothness.
pub(crate) fn expand_orders(orders: &[DerivOrder]) -> Result<Vec<usize>> {
    let total: usize = orders.iter().map(|o| o.order as usize).sum();
    if total > MAX_ORDER_PER_ARG {
        return Err(Error::UnsupportedOrder(total));
    }
    let mut axes = Vec::with_capacity(total);
    for o in orders {
        for _ in 0..o.order {
            axes.push(o.axis);
        }
    }
    Ok(axes)
}

/// Radial factors `F_0..F_4` evaluated at scaled distance `d`.
///
/// `F_3` and `F_4` are returned with their `1/d` and `1/d^3` singularities removed;
/// [`radial_partial`] reinstates them as `Δ/d` ratios.
#[derive(Debug, Clone, Copy)]
struct Radial {
    d: f64,
    f: [f64; 5],
}

impl Radial {
    #[inline]
    fn new(sigma2: f64, d: f64) -> Self {
        let ad = SQRT5 * d;
        let e = sigma2 * (-ad).exp();
        // a = √5: a^2 = 5, a^4 = 25, a^5 = 25√5
        let f0 = (1.0 + ad + 5.0 * d * d / 3.0) * e;
        let f1 = -(5.0 / 3.0) * (1.0 + ad) * e;
        let f2 = (25.0 / 3.0) * e;
        let g3 = -(25.0 * SQRT5 / 3.0) * e; // F_3 = g3 / d
        let g4 = (25.0 * SQRT5 / 3.0) * (1.0 + ad) * e; // F_4 = g4 / d^3
        Self { d, f: [f0, f1, f2, g3, g4] }
    }
}

/// Mixed partial of a radial function with respect to the scaled difference.
///
/// `idx` holds the derivative axis for each index and `delta` the scaled difference
/// along that axis (entries for repeated axes repeat the same value).
fn radial_partial(rad: &Radial, idx: &[usize], delta: &[f64]) -> f64 {
    let n = idx.len();
    debug_assert!(n <= 4);
    let mut total = 0.0;
    // Enumerate partial matchings by bitmask recursion over at most 4 indices.
    fn rec(
        rad: &Radial,
        idx: &[usize],
        delta: &[f64],
        used: u8,
        pairs: usize,
        unpaired: &mut [usize; 4],
        nu: usize,
        acc: &mut f64,
    ) {
        let n = idx.len();
        let first = (0..n).find(|&i| used & (1 << i) == 0);
        match first {
            None => {
                let m = n - pairs;
                *acc += radial_term(rad, m, &unpaired[..nu], delta);
            }
            Some(i) => {
                let used_i = used | (1 << i);
                unpaired[nu] = i;
                rec(rad, idx, delta, used_i, pairs, unpaired, nu + 1, acc);
                for j in (i + 1)..n {
                    if used_i & (1 << j) == 0 && idx[i] == idx[j] {
                        rec(rad, idx, delta, used_i | (1 << j), pairs + 1, unpaired, nu, acc);
                    }
                }
            }
        }
    }
    let mut unpaired = [0usize; 4];
    rec(rad, idx, delta, 0, 0, &mut unpaired, 0, &mut total);
    total
}

#[inline]
fn radial_term(rad: &Radial, m: usize, unpaired: &[usize], delta: &[f64]) -> f64 {
    let prod = |s: &[usize]| s.iter().map(|&k| delta[k]).product::<f64>();
    match m {
        0..=2 => rad.f[m] * prod(unpaired),
        3 => {
            // F_3 always carries at least one Δ; the leading Δ/d is bounded by 1.
            if rad.d == 0.0 {
                0.0
            } else {
                rad.f[3] * (delta[unpaired[0]] / rad.d) * prod(&unpaired[1..])
            }
        }
        4 => {
            if rad.d == 0.0 {
                0.0
            } else {
                let d = rad.d;
                rad.f[4]
                    * (delta[unpaired[0]] / d)
                    * (delta[unpaired[1]] / d)
                    * (delta[unpaired[2]] / d)
                    * delta[unpaired[3]]
            }
        }
        _ => unreachable!("kernel derivatives are limited to total order 4"),
    }
}

fn check_dims(r: &[f64], r2: &[f64]) -> Result<()> {
    if r.len() != r2.len() {
        return Err(Error::InvalidInput(format!(
            "coordinate dimension mismatch: {} vs {}",
            r.len(),
            r2.len()
        )));
    }
    Ok(())
}

fn scaled_distance(r: &[f64], r2: &[f64], hyp: &KernelHyper) -> f64 {
    r.iter()
        .zip(r2)
        .enumerate()
        .map(|(k, (a, b))| (a - b) * (a - b) / hyp.length_scale(k))
        .sum::<f64>()
        .sqrt()
}

/// Matérn 5/2 kernel `σ²(1 + √5 d + 5d²/3) exp(-√5 d)`.
pub fn matern52(r: &[f64], r2: &[f64], hyp: &KernelHyper) -> Result<f64> {
    check_dims(r, r2)?;
    let d = scaled_distance(r, r2, hyp);
    Ok(Radial::new(hyp.sigma * hyp.sigma, d).f[0])
}

/// Analytic mixed partial derivative of [`matern52`].
///
/// `d1` differentiates with respect to the first argument, `d2` with respect to the
/// second. At most second order per argument is supported.
pub fn matern52_deriv(
    r: &[f64],
    r2: &[f64],
    hyp: &KernelHyper,
    d1: &[DerivOrder],
    d2: &[DerivOrder],
) -> Result<f64> {
    check_dims(r, r2)?;
    let a1 = expand_orders(d1)?;
    let a2 = expand_orders(d2)?;
    if let Some(&bad) = a1.iter().chain(&a2).find(|&&ax| ax >= r.len()) {
        return Err(Error::InvalidInput(format!("derivative axis {bad} out of range")));
    }
    let d = scaled_distance(r, r2, hyp);
    let rad = Radial::new(hyp.sigma * hyp.sigma, d);
    Ok(matern_partial_axes(&rad, r, r2, hyp, &a1, &a2))
}

fn matern_partial_axes(
    rad: &Radial,
    r: &[f64],
    r2: &[f64],
    hyp: &KernelHyper,
    a1: &[usize],
    a2: &[usize],
) -> f64 {
    let mut idx = [0usize; 4];
    let mut delta = [0.0f64; 4];
    let mut scale = 1.0;
    let n = a1.len() + a2.len();
    for (slot, &ax) in a1.iter().chain(a2).enumerate() {
        let ell = hyp.length_scale(ax);
        idx[slot] = ax;
        delta[slot] = (r[ax] - r2[ax]) / ell.sqrt();
        scale /= ell.sqrt();
    }
    // Derivatives in the second argument pick up a sign from Δ = r - r2.
    let sign = if a2.len() % 2 == 1 { -1.0 } else { 1.0 };
    sign * scale * radial_partial(rad, &idx[..n], &delta[..n])
}

/// A multiplicative warp `q` applied to one domain coordinate of both kernel arguments.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Warp {
    None,
    /// `q(s) = s`, vanishing at `s = 0`.
    Linear { axis: usize },
    /// `q(s) = 1 - (2s - 1)²`, vanishing at `s = 0` and `s = 1`.
    Bump { axis: usize },
}

impl Warp {
    fn axis(&self) -> Option<usize> {
        match *self {
            Warp::None => None,
            Warp::Linear { axis } | Warp::Bump { axis } => Some(axis),
        }
    }

    /// `q^{(order)}(s)`.
    #[inline]
    pub fn eval(&self, s: f64, order: usize) -> f64 {
        match (self, order) {
            (Warp::None, 0) => 1.0,
            (Warp::None, _) => 0.0,
            (Warp::Linear { .. }, 0) => s,
            (Warp::Linear { .. }, 1) => 1.0,
            (Warp::Linear { .. }, _) => 0.0,
            (Warp::Bump { .. }, 0) => 1.0 - (2.0 * s - 1.0).powi(2),
            (Warp::Bump { .. }, 1) => -4.0 * (2.0 * s - 1.0),
            (Warp::Bump { .. }, 2) => -8.0,
            (Warp::Bump { .. }, _) => 0.0,
        }
    }
}

/// Compact per-argument derivative specification: up to two axis indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct DerivKey {
    axes: [u16; 2],
    n: u8,
}

impl DerivKey {
    pub const NONE: DerivKey = DerivKey { axes: [0, 0], n: 0 };

    pub fn from_orders(orders: &[DerivOrder]) -> Result<Self> {
        let mut axes = expand_orders(orders)?;
        axes.sort_unstable();
        let mut key = DerivKey::NONE;
        for (i, &ax) in axes.iter().enumerate() {
            key.axes[i] = u16::try_from(ax)
                .map_err(|_| Error::InvalidInput(format!("derivative axis {ax} too large")))?;
        }
        key.n = axes.len() as u8;
        Ok(key)
    }

    pub fn axes(&self) -> impl Iterator<Item = usize> + '_ {
        self.axes[..self.n as usize].iter().map(|&a| a as usize)
    }

    pub fn len(&self) -> usize {
        self.n as usize
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn to_orders(&self) -> Vec<DerivOrder> {
        let mut out: Vec<DerivOrder> = Vec::new();
        for ax in self.axes() {
            match out.last_mut() {
                Some(last) if last.axis == ax => last.order += 1,
                _ => out.push(DerivOrder::new(ax, 1)),
            }
        }
        out
    }

    /// Number of derivatives along `axis`.
    fn count(&self, axis: usize) -> usize {
        self.axes().filter(|&a| a == axis).count()
    }

    /// Remove `k` derivatives along `axis`.
    fn without(&self, axis: usize, k: usize) -> ([usize; 2], usize) {
        let mut out = [0usize; 2];
        let mut n = 0;
        let mut skipped = 0;
        for a in self.axes() {
            if a == axis && skipped < k {
                skipped += 1;
            } else {
                out[n] = a;
                n += 1;
            }
        }
        (out, n)
    }
}

const BINOM: [[f64; 3]; 3] = [[1.0, 0.0, 0.0], [1.0, 1.0, 0.0], [1.0, 2.0, 1.0]];

/// A warped, block-coupled Matérn 5/2 kernel on joint `(x, p)` space:
///
/// `k((x,p,i),(x',p',j)) = C_ij q(x) q(x') k_{5/2}([x,p],[x',p'])`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointKernel {
    pub hyp: KernelHyper,
    pub warp: Warp,
    /// Output coupling matrix, indexed by block.
    pub coupling: Vec<Vec<f64>>,
}

impl JointKernel {
    /// Kernel with a single output block.
    pub fn scalar(hyp: KernelHyper, warp: Warp) -> Self {
        Self { hyp, warp, coupling: vec![vec![1.0]] }
    }

    /// Two-block kernel used for the FitzHugh–Nagumo sensitivities: `q(t) = t` on the time axis.
    pub fn fhn(hyp: KernelHyper) -> Self {
        let c = hyp.coupling();
        Self {
            hyp,
            warp: Warp::Linear { axis: 0 },
            coupling: vec![c[0].to_vec(), c[1].to_vec()],
        }
    }

    /// Groundwater-flow kernel: `q(x₂) = 1 - (2x₂ - 1)²` on the vertical coordinate.
    pub fn gwf(hyp: KernelHyper) -> Self {
        Self::scalar(hyp, Warp::Bump { axis: 1 })
    }

    pub fn blocks(&self) -> usize {
        self.coupling.len()
    }

    pub fn spatial_dims(&self) -> usize {
        self.hyp.spatial_dims
    }

    pub fn with_hyper(&self, hyp: KernelHyper) -> Self {
        let mut k = self.clone();
        if self.coupling.len() == 2 {
            let c = hyp.coupling();
            k.coupling = vec![c[0].to_vec(), c[1].to_vec()];
        }
        k.hyp = hyp;
        k
    }

    /// Block-independent part of the kernel between two atoms.
    ///
    /// `dp2` must equal `|pa - pb|²`; callers evaluating many pairs cache it per
    /// pair of parameter vectors.
    #[allow(clippy::too_many_arguments)]
    #[inline]
    pub fn eval_scalar(
        &self,
        xa: &[f64],
        pa: &[f64],
        da: DerivKey,
        xb: &[f64],
        pb: &[f64],
        db: DerivKey,
        dp2: f64,
    ) -> f64 {
        let hyp = &self.hyp;
        let s = hyp.spatial_dims;
        let mut dx2 = 0.0;
        for k in 0..s {
            let t = xa[k] - xb[k];
            dx2 += t * t;
        }
        let d = (dx2 / hyp.ell_x + dp2 / hyp.ell_p).sqrt();
        let rad = Radial::new(hyp.sigma * hyp.sigma, d);
        let coord = |x: &[f64], p: &[f64], ax: usize| if ax < s { x[ax] } else { p[ax - s] };

        let warp_axis = self.warp.axis();
        let (ca, cb) = match warp_axis {
            Some(w) => (da.count(w), db.count(w)),
            None => (0, 0),
        };
        if da.is_empty() && db.is_empty() {
            let wa = warp_axis.map_or(1.0, |w| self.warp.eval(xa[w], 0));
            let wb = warp_axis.map_or(1.0, |w| self.warp.eval(xb[w], 0));
            return wa * wb * rad.f[0];
        }

        let mut total = 0.0;
        for j1 in 0..=ca {
            for j2 in 0..=cb {
                let (wa, wb) = match warp_axis {
                    Some(w) => (self.warp.eval(xa[w], j1), self.warp.eval(xb[w], j2)),
                    None => (1.0, 1.0),
                };
                let coef = BINOM[ca][j1] * BINOM[cb][j2] * wa * wb;
                if coef == 0.0 {
                    continue;
                }
                let (ra, na) = match warp_axis {
                    Some(w) => da.without(w, j1),
                    None => da.without(usize::MAX, 0),
                };
                let (rb, nb) = match warp_axis {
                    Some(w) => db.without(w, j2),
                    None => db.without(usize::MAX, 0),
                };
                let mut idx = [0usize; 4];
                let mut delta = [0.0f64; 4];
                let mut scale = 1.0;
                for (slot, &ax) in ra[..na].iter().chain(&rb[..nb]).enumerate() {
                    let ell = hyp.length_scale(ax);
                    idx[slot] = ax;
                    delta[slot] = (coord(xa, pa, ax) - coord(xb, pb, ax)) / ell.sqrt();
                    scale /= ell.sqrt();
                }
                let sign = if nb % 2 == 1 { -1.0 } else { 1.0 };
                total += coef * sign * scale * radial_partial(&rad, &idx[..na + nb], &delta[..na + nb]);
            }
        }
        total
    }

    /// Full kernel between `(x, p, block, derivs)` pairs.
    #[allow(clippy::too_many_arguments)]
    pub fn eval(
        &self,
        xa: &[f64],
        pa: &[f64],
        block_a: usize,
        da: &[DerivOrder],
        xb: &[f64],
        pb: &[f64],
        block_b: usize,
        db: &[DerivOrder],
    ) -> Result<f64> {
        let s = self.hyp.spatial_dims;
        if xa.len() != s || xb.len() != s || pa.len() != pb.len() {
            return Err(Error::InvalidInput("joint coordinate dimension mismatch".into()));
        }
        if block_a >= self.blocks() || block_b >= self.blocks() {
            return Err(Error::InvalidInput(format!(
                "output block out of range ({block_a}, {block_b}) for {} blocks",
                self.blocks()
            )));
        }
        let ka = DerivKey::from_orders(da)?;
        let kb = DerivKey::from_orders(db)?;
        let joint = s + pa.len();
        if ka.axes().chain(kb.axes()).any(|ax| ax >= joint) {
            return Err(Error::InvalidInput("derivative axis out of range".into()));
        }
        let dp2: f64 = pa.iter().zip(pb).map(|(a, b)| (a - b) * (a - b)).sum();
        let c = self.coupling[block_a][block_b];
        let v = c * self.eval_scalar(xa, pa, ka, xb, pb, kb, dp2);
        if !v.is_finite() {
            return Err(Error::KernelEvaluation(format!("non-finite kernel value {v}")));
        }
        Ok(v)
    }
}

/// Output block of the FitzHugh–Nagumo sensitivity prior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FhnBlock {
    V = 0,
    W = 1,
}

/// `C_{i,i2} · t · t2 · k_{5/2}([t, p], [t2, p2])`.
pub fn kernel_fhn(
    (t, p, i): (f64, &[f64], FhnBlock),
    (t2, p2, i2): (f64, &[f64], FhnBlock),
    hyp: &KernelHyper,
) -> Result<f64> {
    if t < 0.0 || t2 < 0.0 {
        return Err(Error::InvalidInput("FitzHugh–Nagumo kernel requires t >= 0".into()));
    }
    let mut hyp = *hyp;
    hyp.spatial_dims = 1;
    hyp.validate()?;
    JointKernel::fhn(hyp).eval(&[t], p, i as usize, &[], &[t2], p2, i2 as usize, &[])
}

/// `k_{5/2}([x, p], [x2, p2]) · q(x₂) · q(x₂')` with `q(s) = 1 - (2s - 1)²`.
pub fn kernel_gwf(
    (x, p): ([f64; 2], &[f64]),
    (x2, p2): ([f64; 2], &[f64]),
    hyp: &KernelHyper,
) -> Result<f64> {
    let mut hyp = *hyp;
    hyp.spatial_dims = 2;
    hyp.validate()?;
    JointKernel::gwf(hyp).eval(&x, p, 0, &[], &x2, p2, 0, &[])
}
