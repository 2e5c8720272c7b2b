//! Dense and banded Cholesky kernels.
//!
//! [`PackedChol`] stores a lower-triangular factor row by row in immutable
//! shared blocks, one block per append, so that bordering a factor never copies
//! the rows already present.

use std::sync::Arc;

use nalgebra::DMatrix;

use crate::{Error, Result};

/// Relative pivot tolerance of [`chol_append`] and [`cholesky_in_place`].
pub const PIVOT_TOL: f64 = 1e-13;

#[derive(Debug)]
struct Block {
    start: usize,
    rows: usize,
    data: Vec<f64>,
}

impl Block {
    #[inline]
    fn offset(&self, k: usize) -> usize {
        k * self.start + k * (k + 1) / 2
    }

    #[inline]
    fn row(&self, k: usize) -> &[f64] {
        let off = self.offset(k);
        &self.data[off..off + self.start + k + 1]
    }
}

/// Lower-triangular Cholesky factor in packed row-major form.
#[derive(Debug, Clone, Default)]
pub struct PackedChol {
    blocks: Vec<Arc<Block>>,
    n: usize,
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0f64; 4];
    let chunks = n / 4;
    for k in 0..chunks {
        let i = 4 * k;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in 4 * chunks..n {
        s += a[i] * b[i];
    }
    s
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

impl PackedChol {
    pub fn new() -> Self {
        Self::default()
    }

    /// Factor a dense symmetric positive-definite matrix.
    pub fn factor(a: &DMatrix<f64>) -> Result<Self> {
        chol_append(&Self::new(), &DMatrix::zeros(0, a.nrows()), a)
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// Identities of the shared row blocks; a factor derived by bordering starts
    /// with the ids of its parent.
    pub(crate) fn block_ids(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| Arc::as_ptr(b) as usize).collect()
    }

    /// Approximate heap footprint in bytes.
    pub fn memory_bytes(&self) -> usize {
        self.blocks.iter().map(|b| b.data.len() * 8).sum()
    }

    /// Row `i` of the factor (entries `0..=i`).
    pub fn row(&self, i: usize) -> &[f64] {
        let b = self.blocks.partition_point(|b| b.start <= i) - 1;
        let blk = &self.blocks[b];
        blk.row(i - blk.start)
    }

    pub fn diag(&self, i: usize) -> f64 {
        self.row(i)[i]
    }

    fn rows(&self) -> impl DoubleEndedIterator<Item = (usize, &[f64])> {
        self.blocks
            .iter()
            .flat_map(|b| (0..b.rows).map(move |k| (b.start + k, b.row(k))))
    }

    /// `log det(L Lᵀ)`.
    pub fn log_det(&self) -> f64 {
        2.0 * self.rows().map(|(i, r)| r[i].ln()).sum::<f64>()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for (i, r) in self.rows() {
            for (j, &v) in r.iter().enumerate() {
                m[(i, j)] = v;
            }
        }
        m
    }

    /// Solve `L X = B` in place; `b` holds `ncols` columns of length `dim()` back to back.
    pub fn solve_lower_in_place(&self, b: &mut [f64], ncols: usize) {
        let n = self.n;
        assert_eq!(b.len(), n * ncols, "right-hand side has wrong size");
        for (i, row) in self.rows() {
            let (off, d) = (&row[..i], row[i]);
            for c in 0..ncols {
                let col = &mut b[c * n..(c + 1) * n];
                col[i] = (col[i] - dot(off, &col[..i])) / d;
            }
        }
    }

    /// Solve `Lᵀ X = B` in place, same layout as [`Self::solve_lower_in_place`].
    pub fn solve_upper_in_place(&self, b: &mut [f64], ncols: usize) {
        let n = self.n;
        assert_eq!(b.len(), n * ncols, "right-hand side has wrong size");
        for (i, row) in self.rows().rev() {
            let (off, d) = (&row[..i], row[i]);
            for c in 0..ncols {
                let col = &mut b[c * n..(c + 1) * n];
                col[i] /= d;
                let xi = col[i];
                axpy(-xi, off, &mut col[..i]);
            }
        }
    }

    pub fn solve_lower(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        self.solve_lower_in_place(x.as_mut_slice(), b.ncols());
        x
    }

    pub fn solve_upper(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        self.solve_upper_in_place(x.as_mut_slice(), b.ncols());
        x
    }

    /// Append `rows` new rows given as `x` (`dim() × rows`, column-major: column `r`
    /// holds the off-diagonal part of new row `r`) and the lower factor `ls` of the
    /// Schur complement (`rows × rows`, row-major lower triangle).
    pub(crate) fn bordered(&self, x: &[f64], ls: &[f64], rows: usize) -> Self {
        let n = self.n;
        debug_assert_eq!(x.len(), n * rows);
        let mut data = Vec::with_capacity(rows * n + rows * (rows + 1) / 2);
        for r in 0..rows {
            data.extend_from_slice(&x[r * n..(r + 1) * n]);
            data.extend_from_slice(&ls[r * rows..r * rows + r + 1]);
        }
        let mut blocks = self.blocks.clone();
        if rows > 0 {
            blocks.push(Arc::new(Block { start: n, rows, data }));
        }
        Self { blocks, n: n + rows }
    }
}

/// In-place Cholesky of a dense row-major `n × n` matrix, lower triangle used.
///
/// Fails with the offending row index if a pivot is not above
/// `PIVOT_TOL` times the original diagonal entry.
pub fn cholesky_in_place(a: &mut [f64], n: usize) -> std::result::Result<(), usize> {
    let diag: Vec<f64> = (0..n).map(|i| a[i * n + i]).collect();
    cholesky_relative(a, n, &diag)
}

/// As [`cholesky_in_place`], with pivots measured against `ref_diag` instead of
/// the diagonal of `a` itself.
pub(crate) fn cholesky_relative(a: &mut [f64], n: usize, ref_diag: &[f64]) -> std::result::Result<(), usize> {
    for i in 0..n {
        let orig = ref_diag[i];
        for j in 0..=i {
            let s = a[i * n + j] - dot(&a[i * n..i * n + j], &a[j * n..j * n + j]);
            if j == i {
                if !(s > PIVOT_TOL * orig.abs()) || !s.is_finite() {
                    return Err(i);
                }
                a[i * n + i] = s.sqrt();
            } else {
                a[i * n + j] = s / a[j * n + j];
            }
        }
        for j in i + 1..n {
            a[i * n + j] = 0.0;
        }
    }
    Ok(())
}

/// Factor of the bordered matrix `[[G, cross], [crossᵀ, block]]` given the factor of `G`.
///
/// Only the Schur complement `block − XᵀX` (with `X = L⁻¹ cross`) is factorized.
pub fn chol_append(chol: &PackedChol, cross: &DMatrix<f64>, block: &DMatrix<f64>) -> Result<PackedChol> {
    let (n, m) = (chol.dim(), block.nrows());
    if block.ncols() != m || cross.nrows() != n || cross.ncols() != m {
        return Err(Error::InvalidInput(format!(
            "bordering shapes do not match: factor {n}, cross {}x{}, block {}x{}",
            cross.nrows(),
            cross.ncols(),
            block.nrows(),
            block.ncols()
        )));
    }
    let mut x = cross.as_slice().to_vec();
    chol.solve_lower_in_place(&mut x, m);
    let mut s = vec![0.0; m * m];
    for r in 0..m {
        for c in 0..=r {
            let v = block[(r, c)] - dot(&x[r * n..(r + 1) * n], &x[c * n..(c + 1) * n]);
            s[r * m + c] = v;
            s[c * m + r] = v;
        }
    }
    let diag: Vec<f64> = (0..m).map(|r| block[(r, r)]).collect();
    cholesky_relative(&mut s, m, &diag).map_err(|row| {
        Error::SingularInformation(format!("Schur complement not positive definite at new row {row}"))
    })?;
    Ok(chol.bordered(&x, &s, m))
}

/// Symmetric positive-definite band matrix with its Cholesky factorization.
///
/// Row `i` stores entries `max(0, i - bw)..=i` of the lower triangle.
#[derive(Debug, Clone)]
pub struct BandedSpd {
    n: usize,
    bw: usize,
    data: Vec<f64>,
    factored: bool,
}

impl BandedSpd {
    pub fn zeros(n: usize, bw: usize) -> Self {
        Self { n, bw, data: vec![0.0; n * (bw + 1)], factored: false }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn bandwidth(&self) -> usize {
        self.bw
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        i * (self.bw + 1) + (j + self.bw - i)
    }

    /// Entry `(i, j)`; zero outside the band.
    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (i, j) = if j > i { (j, i) } else { (i, j) };
        if i - j > self.bw {
            0.0
        } else {
            self.data[self.idx(i, j)]
        }
    }

    /// Add `v` to entry `(i, j)` (and implicitly `(j, i)`).
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        assert!(!self.factored, "matrix already factored");
        let (i, j) = if j > i { (j, i) } else { (i, j) };
        assert!(i - j <= self.bw, "entry ({i}, {j}) outside band {}", self.bw);
        let k = self.idx(i, j);
        self.data[k] += v;
    }

    /// `y = A x` (only valid before factorization).
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert!(!self.factored);
        let mut y = vec![0.0; self.n];
        for i in 0..self.n {
            let lo = i.saturating_sub(self.bw);
            for j in lo..i {
                let a = self.data[self.idx(i, j)];
                y[i] += a * x[j];
                y[j] += a * x[i];
            }
            y[i] += self.data[self.idx(i, i)] * x[i];
        }
        y
    }

    /// Factor in place.
    pub fn factor(&mut self) -> Result<()> {
        let (n, bw) = (self.n, self.bw);
        for i in 0..n {
            let lo = i.saturating_sub(bw);
            for j in lo..=i {
                let klo = lo.max(j.saturating_sub(bw));
                let mut s = self.data[self.idx(i, j)];
                for k in klo..j {
                    s -= self.data[self.idx(i, k)] * self.data[self.idx(j, k)];
                }
                if i == j {
                    if !(s > 0.0) || !s.is_finite() {
                        return Err(Error::Numerical(format!(
                            "band matrix not positive definite at row {i}"
                        )));
                    }
                    let k = self.idx(i, i);
                    self.data[k] = s.sqrt();
                } else {
                    let k = self.idx(i, j);
                    self.data[k] = s / self.data[self.idx(j, j)];
                }
            }
        }
        self.factored = true;
        Ok(())
    }

    /// Solve `A x = b` using the stored factor.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        assert!(self.factored, "factor() must be called before solve()");
        let (n, bw) = (self.n, self.bw);
        let mut x = b.to_vec();
        for i in 0..n {
            let lo = i.saturating_sub(bw);
            let mut s = x[i];
            for k in lo..i {
                s -= self.data[self.idx(i, k)] * x[k];
            }
            x[i] = s / self.data[self.idx(i, i)];
        }
        for i in (0..n).rev() {
            x[i] /= self.data[self.idx(i, i)];
            let xi = x[i];
            let lo = i.saturating_sub(bw);
            for k in lo..i {
                x[k] -= self.data[self.idx(i, k)] * xi;
            }
        }
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
        &a * a.transpose() + DMatrix::identity(n, n) * (n as f64) * 0.1
    }

    #[test]
    fn factor_reproduces_matrix() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_spd(12, &mut rng);
        let l = PackedChol::factor(&a).unwrap().to_dense();
        assert!((&l * l.transpose() - &a).norm() < 1e-12 * a.norm());
    }

    #[test]
    fn append_to_empty_is_plain_factorization() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_spd(7, &mut rng);
        let l = PackedChol::factor(&a).unwrap().to_dense();
        let reference = a.clone().cholesky().unwrap().l();
        assert!((l - reference).norm() < 1e-12);
    }

    #[test]
    fn duplicate_row_without_jitter_is_rejected() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 2.0, 2.0, 2.0]);
        assert!(matches!(PackedChol::factor(&a), Err(Error::SingularInformation(_))));
        let l = PackedChol::factor(&DMatrix::from_element(1, 1, 2.0)).unwrap();
        let dup = chol_append(&l, &DMatrix::from_element(1, 1, 2.0), &DMatrix::from_element(1, 1, 2.0));
        assert!(dup.is_err());
    }

    #[test]
    fn solves_and_log_det() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_spd(9, &mut rng);
        let chol = PackedChol::factor(&a).unwrap();
        let b = DMatrix::from_fn(9, 3, |i, j| (i + 2 * j) as f64);
        let x = chol.solve_upper(&chol.solve_lower(&b));
        assert!((&a * &x - &b).norm() < 1e-10 * b.norm());
        let det = a.determinant();
        assert!((chol.log_det() - det.ln()).abs() < 1e-10);
    }

    #[test]
    fn rows_are_shared_between_bordered_factors() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_spd(6, &mut rng);
        let base = PackedChol::factor(&a.view((0, 0), (4, 4)).into_owned()).unwrap();
        let grown = chol_append(
            &base,
            &a.view((0, 4), (4, 2)).into_owned(),
            &a.view((4, 4), (2, 2)).into_owned(),
        )
        .unwrap();
        assert_eq!(base.dim(), 4);
        assert_eq!(grown.dim(), 6);
        assert!(Arc::ptr_eq(&base.blocks[0], &grown.blocks[0]));
    }

    #[test]
    fn banded_matches_dense() {
        let n = 30;
        let bw = 3;
        let mut band = BandedSpd::zeros(n, bw);
        let mut dense = DMatrix::zeros(n, n);
        for i in 0..n {
            band.add(i, i, 4.0);
            dense[(i, i)] = 4.0;
            for d in 1..=bw {
                if i + d < n {
                    let v = -1.0 / d as f64;
                    band.add(i + d, i, v);
                    dense[(i + d, i)] = v;
                    dense[(i, i + d)] = v;
                }
            }
        }
        let b: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        let y = band.matvec(&b);
        let yd = &dense * nalgebra::DVector::from_vec(b.clone());
        assert!((nalgebra::DVector::from_vec(y) - yd).norm() < 1e-12);
        band.factor().unwrap();
        let x = band.solve(&b);
        let xd = dense.cholesky().unwrap().solve(&nalgebra::DVector::from_vec(b));
        assert!((nalgebra::DVector::from_vec(x) - xd).norm() < 1e-12);
    }
}
