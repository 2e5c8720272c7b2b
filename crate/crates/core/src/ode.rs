//! Explicit ODE integrators with continuous output.

use crate::{Error, Result};

const C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
const A21: f64 = 0.2;
const A3: [f64; 2] = [3.0 / 40.0, 9.0 / 40.0];
const A4: [f64; 3] = [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0];
const A5: [f64; 4] = [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0];
const A6: [f64; 5] = [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0];
const B: [f64; 6] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0];
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];
const D: [f64; 7] = [
    -12715105075.0 / 11282082432.0,
    0.0,
    87487479700.0 / 32700410799.0,
    -10690763975.0 / 1880347072.0,
    701980252875.0 / 199316789632.0,
    -1453857185.0 / 822651844.0,
    69997945.0 / 29380423.0,
];

/// Error tolerances for adaptive integration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerance {
    pub rtol: f64,
    pub atol: f64,
}

impl Tolerance {
    pub fn uniform(tol: f64) -> Self {
        Self { rtol: tol, atol: tol }
    }
}

/// Piecewise-polynomial continuous solution.
///
/// Each step `[t, t + h]` stores five coefficient vectors `r1..r5`; the state at
/// `θ = (s − t)/h` is `r1 + θ(r2 + (1−θ)(r3 + θ(r4 + (1−θ) r5)))`.
#[derive(Debug, Clone)]
pub struct DenseSolution {
    dim: usize,
    starts: Vec<f64>,
    steps: Vec<f64>,
    coeffs: Vec<f64>,
    t0: f64,
    t1: f64,
    y1: Vec<f64>,
    rhs_evals: usize,
}

impl DenseSolution {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn t_start(&self) -> f64 {
        self.t0
    }

    pub fn t_end(&self) -> f64 {
        self.t1
    }

    pub fn n_steps(&self) -> usize {
        self.steps.len()
    }

    /// Number of right-hand-side evaluations spent.
    pub fn rhs_evals(&self) -> usize {
        self.rhs_evals
    }

    /// Step start times.
    pub fn step_starts(&self) -> &[f64] {
        &self.starts
    }

    /// Final state.
    pub fn final_state(&self) -> &[f64] {
        &self.y1
    }

    fn contains(&self, t: f64) -> bool {
        let (lo, hi) = if self.t0 <= self.t1 { (self.t0, self.t1) } else { (self.t1, self.t0) };
        let slack = 1e-12 * (1.0 + lo.abs().max(hi.abs()));
        t >= lo - slack && t <= hi + slack
    }

    /// State at time `t`, written into `out`.
    pub fn eval_into(&self, t: f64, out: &mut [f64]) -> Result<()> {
        if !self.contains(t) || self.steps.is_empty() {
            if self.steps.is_empty() && (t - self.t0).abs() <= 1e-12 {
                out.copy_from_slice(&self.y1);
                return Ok(());
            }
            return Err(Error::Interpolation(t));
        }
        let forward = self.t1 >= self.t0;
        let k = if forward {
            self.starts.partition_point(|&s| s <= t)
        } else {
            self.starts.partition_point(|&s| s >= t)
        };
        let k = k.saturating_sub(1).min(self.steps.len() - 1);
        let theta = (t - self.starts[k]) / self.steps[k];
        let th1 = 1.0 - theta;
        let d = self.dim;
        let c = &self.coeffs[5 * d * k..5 * d * (k + 1)];
        for i in 0..d {
            let r = |j: usize| c[j * d + i];
            out[i] = r(0) + theta * (r(1) + th1 * (r(2) + theta * (r(3) + th1 * r(4))));
        }
        Ok(())
    }

    pub fn eval(&self, t: f64) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim];
        self.eval_into(t, &mut out)?;
        Ok(out)
    }
}

/// Adaptive integration limits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLimits {
    pub max_steps: usize,
    /// Largest step magnitude; `None` means the full interval.
    pub max_step: Option<f64>,
}

impl Default for StepLimits {
    fn default() -> Self {
        Self { max_steps: 1_000_000, max_step: None }
    }
}

fn err_norm(y0: &[f64], y1: &[f64], e: &[f64], tol: Tolerance) -> f64 {
    let n = y0.len() as f64;
    let s: f64 = y0
        .iter()
        .zip(y1)
        .zip(e)
        .map(|((a, b), e)| {
            let sc = tol.atol + tol.rtol * a.abs().max(b.abs());
            (e / sc).powi(2)
        })
        .sum();
    (s / n).sqrt()
}

/// Dormand–Prince 5(4) integration of `y' = f(t, y)` from `t0` to `t1`
/// (which may lie before `t0`), with 4th-order continuous output.
pub fn dopri5<F>(mut f: F, t0: f64, y0: &[f64], t1: f64, tol: Tolerance, limits: StepLimits) -> Result<DenseSolution>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    if !(tol.rtol > 0.0 && tol.atol > 0.0) {
        return Err(Error::InvalidInput("integrator tolerances must be positive".into()));
    }
    if y0.iter().any(|v| !v.is_finite()) || !t0.is_finite() || !t1.is_finite() {
        return Err(Error::InvalidInput("non-finite initial data".into()));
    }
    let d = y0.len();
    let span = t1 - t0;
    let dir = if span >= 0.0 { 1.0 } else { -1.0 };
    let mut sol = DenseSolution {
        dim: d,
        starts: Vec::new(),
        steps: Vec::new(),
        coeffs: Vec::new(),
        t0,
        t1,
        y1: y0.to_vec(),
        rhs_evals: 0,
    };
    if span == 0.0 {
        return Ok(sol);
    }
    let hmax = limits.max_step.unwrap_or(span.abs()).min(span.abs());

    let mut k: Vec<Vec<f64>> = vec![vec![0.0; d]; 7];
    let mut y = y0.to_vec();
    let mut ytmp = vec![0.0; d];
    let mut ynew = vec![0.0; d];
    let mut err = vec![0.0; d];
    let mut t = t0;
    f(t, &y, &mut k[0]);
    sol.rhs_evals += 1;

    // Initial step from the scale of y and y'.
    let sc: Vec<f64> = y.iter().map(|v| tol.atol + tol.rtol * v.abs()).collect();
    let d0 = (y.iter().zip(&sc).map(|(v, s)| (v / s).powi(2)).sum::<f64>() / d as f64).sqrt();
    let d1 = (k[0].iter().zip(&sc).map(|(v, s)| (v / s).powi(2)).sum::<f64>() / d as f64).sqrt();
    let mut h = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
    h = h.min(hmax).max(1e-12 * span.abs());
    let mut fac_old: f64 = 1e-4;
    let mut reject = false;

    for _ in 0..limits.max_steps {
        if (t1 - t) * dir <= 0.0 {
            sol.y1 = y;
            return Ok(sol);
        }
        let mut last = false;
        if (t + dir * h - t1) * dir >= 0.0 {
            h = (t1 - t).abs();
            last = true;
        }
        let hs = dir * h;
        if h < 1e-14 * t.abs().max(1.0) {
            return Err(Error::Stiffness(t));
        }

        let stage = |k: &Vec<Vec<f64>>, coefs: &[f64], out: &mut Vec<f64>| {
            for i in 0..d {
                let mut acc = 0.0;
                for (j, c) in coefs.iter().enumerate() {
                    acc += c * k[j][i];
                }
                out[i] = y[i] + hs * acc;
            }
        };
        stage(&k, &[A21], &mut ytmp);
        f(t + C[1] * hs, &ytmp, &mut k[1]);
        stage(&k, &A3, &mut ytmp);
        f(t + C[2] * hs, &ytmp, &mut k[2]);
        stage(&k, &A4, &mut ytmp);
        f(t + C[3] * hs, &ytmp, &mut k[3]);
        stage(&k, &A5, &mut ytmp);
        f(t + C[4] * hs, &ytmp, &mut k[4]);
        stage(&k, &A6, &mut ytmp);
        f(t + hs, &ytmp, &mut k[5]);
        stage(&k, &B, &mut ynew);
        f(t + hs, &ynew, &mut k[6]);
        sol.rhs_evals += 6;

        for i in 0..d {
            err[i] = hs * (0..7).map(|j| E[j] * k[j][i]).sum::<f64>();
        }
        let en = err_norm(&y, &ynew, &err, tol);
        if !en.is_finite() || ynew.iter().any(|v| !v.is_finite()) {
            h *= 0.1;
            reject = true;
            continue;
        }
        // PI step-size controller.
        let fac11 = en.powf(0.2 - 0.04 * 0.75);
        let mut fac = fac11 / fac_old.powf(0.04);
        fac = (fac / 0.9).clamp(0.1, 5.0);
        let hnew = h / fac;
        if en <= 1.0 {
            fac_old = en.max(1e-4);
            sol.starts.push(t);
            sol.steps.push(hs);
            let mut block = vec![0.0; 5 * d];
            for i in 0..d {
                let ydiff = ynew[i] - y[i];
                let bspl = hs * k[0][i] - ydiff;
                block[i] = y[i];
                block[d + i] = ydiff;
                block[2 * d + i] = bspl;
                block[3 * d + i] = ydiff - hs * k[6][i] - bspl;
                block[4 * d + i] = hs * (0..7).map(|j| D[j] * k[j][i]).sum::<f64>();
            }
            sol.coeffs.extend_from_slice(&block);

            t = if last { t1 } else { t + hs };
            std::mem::swap(&mut y, &mut ynew);
            k.swap(0, 6);
            h = if reject { hnew.min(h) } else { hnew };
            h = h.min(hmax);
            reject = false;
        } else {
            h /= (fac11 / 0.9).min(5.0);
            reject = true;
        }
    }
    Err(Error::Numerical(format!("step limit {} reached at t = {t}", limits.max_steps)))
}

/// Fixed-step explicit Euler from `t0` to `t1` with step `h`, with cubic Hermite
/// continuous output.
pub fn euler<F>(mut f: F, t0: f64, y0: &[f64], t1: f64, h: f64) -> Result<DenseSolution>
where
    F: FnMut(f64, &[f64], &mut [f64]),
{
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::InvalidInput("Euler step must be positive".into()));
    }
    let d = y0.len();
    let span = t1 - t0;
    let nsteps = (span.abs() / h).ceil().max(1.0) as usize;
    let hs = span / nsteps as f64;
    let mut sol = DenseSolution {
        dim: d,
        starts: Vec::with_capacity(nsteps),
        steps: Vec::with_capacity(nsteps),
        coeffs: Vec::with_capacity(5 * d * nsteps),
        t0,
        t1,
        y1: y0.to_vec(),
        rhs_evals: 0,
    };
    if span == 0.0 {
        return Ok(sol);
    }
    let mut y = y0.to_vec();
    let mut k0 = vec![0.0; d];
    let mut k1 = vec![0.0; d];
    let mut ynew = vec![0.0; d];
    f(t0, &y, &mut k0);
    sol.rhs_evals += 1;
    for s in 0..nsteps {
        let t = t0 + s as f64 * hs;
        for i in 0..d {
            ynew[i] = y[i] + hs * k0[i];
        }
        if ynew.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!("Euler iteration diverged at t = {t}")));
        }
        let tn = if s + 1 == nsteps { t1 } else { t + hs };
        f(tn, &ynew, &mut k1);
        sol.rhs_evals += 1;
        sol.starts.push(t);
        sol.steps.push(hs);
        for i in 0..d {
            sol.coeffs.push(y[i]);
        }
        for i in 0..d {
            sol.coeffs.push(ynew[i] - y[i]);
        }
        for i in 0..d {
            sol.coeffs.push(hs * k0[i] - (ynew[i] - y[i]));
        }
        for i in 0..d {
            let ydiff = ynew[i] - y[i];
            sol.coeffs.push(ydiff - hs * k1[i] - (hs * k0[i] - ydiff));
        }
        sol.coeffs.extend(std::iter::repeat_n(0.0, d));
        std::mem::swap(&mut y, &mut ynew);
        std::mem::swap(&mut k0, &mut k1);
    }
    sol.y1 = y;
    Ok(sol)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn decay(_t: f64, y: &[f64], dy: &mut [f64]) {
        dy[0] = -y[0];
    }

    fn oscillator(_t: f64, y: &[f64], dy: &mut [f64]) {
        dy[0] = y[1];
        dy[1] = -y[0];
    }

    #[test]
    fn exponential_decay_is_accurate() {
        let sol = dopri5(decay, 0.0, &[1.0], 5.0, Tolerance::uniform(1e-10), StepLimits::default()).unwrap();
        assert!((sol.final_state()[0] - (-5.0f64).exp()).abs() < 1e-9);
        for &t in &[0.0, 0.37, 1.5, 4.99, 5.0] {
            let v = sol.eval(t).unwrap()[0];
            assert!((v - (-t).exp()).abs() < 1e-9, "t={t}: {v}");
        }
    }

    #[test]
    fn dense_output_tracks_oscillator() {
        let tol = Tolerance::uniform(1e-9);
        let sol = dopri5(oscillator, 0.0, &[0.0, 1.0], 10.0, tol, StepLimits::default()).unwrap();
        let worst = (0..=1000)
            .map(|i| {
                let t = i as f64 * 0.01;
                (sol.eval(t).unwrap()[0] - t.sin()).abs()
            })
            .fold(0.0, f64::max);
        assert!(worst < 1e-7, "{worst}");
    }

    #[test]
    fn integrates_backwards() {
        let sol = dopri5(decay, 2.0, &[1.0], 0.0, Tolerance::uniform(1e-10), StepLimits::default()).unwrap();
        assert!((sol.final_state()[0] - 2.0f64.exp()).abs() < 1e-8);
        assert!((sol.eval(1.0).unwrap()[0] - 1.0f64.exp()).abs() < 1e-8);
    }

    #[test]
    fn equilibrium_stays_constant() {
        let sol = dopri5(|_, _, dy| dy.fill(0.0), 0.0, &[2.0, -1.0], 3.0, Tolerance::uniform(1e-8), StepLimits::default())
            .unwrap();
        assert_eq!(sol.eval(1.7).unwrap(), vec![2.0, -1.0]);
    }

    #[test]
    fn out_of_range_evaluation_fails() {
        let sol = dopri5(decay, 0.0, &[1.0], 1.0, Tolerance::uniform(1e-8), StepLimits::default()).unwrap();
        assert!(matches!(sol.eval(1.5), Err(Error::Interpolation(_))));
    }

    #[test]
    fn euler_is_first_order() {
        let err = |h: f64| {
            let s = euler(decay, 0.0, &[1.0], 1.0, h).unwrap();
            (s.final_state()[0] - (-1.0f64).exp()).abs()
        };
        let ratio = err(1e-3) / err(1e-4);
        assert!((ratio - 10.0).abs() < 0.2, "{ratio}");
    }

    #[test]
    fn euler_dense_output_interpolates_nodes() {
        let s = euler(decay, 0.0, &[1.0], 1.0, 0.25).unwrap();
        assert!((s.eval(0.25).unwrap()[0] - 0.75).abs() < 1e-15);
        assert!((s.eval(0.5).unwrap()[0] - 0.5625).abs() < 1e-15);
    }
}
