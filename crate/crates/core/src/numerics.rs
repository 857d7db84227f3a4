//! Small dense complex linear algebra and scalar kernels.
//!
//! Everything here is sized for per-user beamforming problems (a handful of
//! antennas), so matrices are plain row-major `Vec`s and factorizations are
//! textbook loops. Hermitian positive definite systems are solved through a
//! Cholesky factor `A = L Lᴴ`; the interference-plus-noise covariances built by
//! the beamforming solvers always carry a `σ²I` term, which keeps them
//! comfortably positive definite.

use std::f64::consts::{FRAC_PI_4, PI};
use std::ops::{Deref, DerefMut};

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

/// Relative tolerance for the Hermitian check in [`solve_hpd`] and [`logdet_hpd`].
pub const HERMITIAN_TOL: f64 = 1e-10;

/// Iteration cap for [`bisect`].
pub const BISECT_MAX_ITER: usize = 200;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumericsError {
    #[error("matrix is not Hermitian (max |A - A^H| = {deviation:e})")]
    NonHermitian { deviation: f64 },
    #[error("matrix is not positive definite (pivot {index} = {pivot:e})")]
    NotPositiveDefinite { index: usize, pivot: f64 },
    #[error("shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },
    #[error("variance must be nonnegative, got {0}")]
    NegativeVariance(f64),
    #[error("f(lo) = {f_lo} and f(hi) = {f_hi} do not bracket a root")]
    NoSignChange { f_lo: f64, f_hi: f64 },
    #[error("bisection did not converge in {0} iterations")]
    MaxIterationsExceeded(usize),
}

pub type Result<T, E = NumericsError> = std::result::Result<T, E>;

/// Dense complex column vector.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CVector(pub Vec<Complex64>);

impl CVector {
    pub fn zeros(n: usize) -> Self {
        CVector(vec![Complex64::new(0.0, 0.0); n])
    }

    pub fn from_real(xs: &[f64]) -> Self {
        CVector(xs.iter().map(|&x| Complex64::new(x, 0.0)).collect())
    }

    /// Squared Euclidean norm `‖x‖²`.
    pub fn norm_sqr(&self) -> f64 {
        self.0.iter().map(|z| z.norm_sqr()).sum()
    }

    /// Hermitian inner product `selfᴴ other`.
    pub fn dot_h(&self, other: &CVector) -> Complex64 {
        debug_assert_eq!(self.len(), other.len());
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| a.conj() * b)
            .sum()
    }

    pub fn scale(&self, s: Complex64) -> CVector {
        CVector(self.0.iter().map(|z| z * s).collect())
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }
}

impl Deref for CVector {
    type Target = [Complex64];
    fn deref(&self) -> &[Complex64] {
        &self.0
    }
}

impl DerefMut for CVector {
    fn deref_mut(&mut self) -> &mut [Complex64] {
        &mut self.0
    }
}

impl From<Vec<Complex64>> for CVector {
    fn from(v: Vec<Complex64>) -> Self {
        CVector(v)
    }
}

/// Dense complex matrix, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct CMatrix {
    rows: usize,
    cols: usize,
    data: Vec<Complex64>,
}

impl CMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        CMatrix {
            rows,
            cols,
            data: vec![Complex64::new(0.0, 0.0); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = CMatrix::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = Complex64::new(1.0, 0.0);
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<Complex64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(NumericsError::ShapeMismatch {
                expected: format!("{} entries for {rows}x{cols}", rows * cols),
                got: format!("{} entries", data.len()),
            });
        }
        Ok(CMatrix { rows, cols, data })
    }

    pub fn from_real(rows: usize, cols: usize, data: &[f64]) -> Result<Self> {
        Self::from_vec(
            rows,
            cols,
            data.iter().map(|&x| Complex64::new(x, 0.0)).collect(),
        )
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    /// Conjugate transpose.
    pub fn adjoint(&self) -> CMatrix {
        let mut out = CMatrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out[(j, i)] = self[(i, j)].conj();
            }
        }
        out
    }

    pub fn scale(&self, s: f64) -> CMatrix {
        CMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|z| z * s).collect(),
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    pub fn mul_vec(&self, x: &[Complex64]) -> CVector {
        assert_eq!(self.cols, x.len(), "matrix-vector shape mismatch");
        let mut out = CVector::zeros(self.rows);
        for i in 0..self.rows {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            out[i] = row.iter().zip(x).map(|(a, b)| a * b).sum();
        }
        out
    }

    /// `selfᴴ x` without materializing the adjoint.
    pub fn adjoint_mul_vec(&self, x: &[Complex64]) -> CVector {
        assert_eq!(self.rows, x.len(), "adjoint matrix-vector shape mismatch");
        let mut out = CVector::zeros(self.cols);
        for i in 0..self.rows {
            let xi = x[i];
            for j in 0..self.cols {
                out[j] += self[(i, j)].conj() * xi;
            }
        }
        out
    }

    pub fn matmul(&self, other: &CMatrix) -> CMatrix {
        assert_eq!(self.cols, other.rows, "matrix product shape mismatch");
        let mut out = CMatrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                for j in 0..other.cols {
                    out[(i, j)] += a * other[(k, j)];
                }
            }
        }
        out
    }

    /// `self += s · x xᴴ`.
    pub fn add_outer(&mut self, x: &[Complex64], s: f64) {
        assert!(self.is_square() && x.len() == self.rows);
        for i in 0..self.rows {
            let xi = x[i] * s;
            for j in 0..self.cols {
                self.data[i * self.cols + j] += xi * x[j].conj();
            }
        }
    }

    /// `self += s · I`.
    pub fn add_diag(&mut self, s: f64) {
        assert!(self.is_square());
        for i in 0..self.rows {
            self.data[i * self.cols + i] += s;
        }
    }

    fn hermitian_deviation(&self) -> f64 {
        let mut dev: f64 = 0.0;
        for i in 0..self.rows {
            for j in i..self.cols {
                dev = dev.max((self[(i, j)] - self[(j, i)].conj()).norm());
            }
        }
        dev
    }

    fn check_hermitian(&self) -> Result<()> {
        if !self.is_square() {
            return Err(NumericsError::ShapeMismatch {
                expected: "square matrix".into(),
                got: format!("{}x{}", self.rows, self.cols),
            });
        }
        let dev = self.hermitian_deviation();
        if dev > HERMITIAN_TOL * self.max_abs() {
            return Err(NumericsError::NonHermitian { deviation: dev });
        }
        Ok(())
    }
}

impl std::ops::Index<(usize, usize)> for CMatrix {
    type Output = Complex64;
    fn index(&self, (i, j): (usize, usize)) -> &Complex64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for CMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut Complex64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Lower-triangular Cholesky factor `L` with `A = L Lᴴ`. Only the lower
/// triangle of `a` is read.
fn cholesky(a: &CMatrix) -> Result<CMatrix> {
    let n = a.rows();
    let mut l = CMatrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)].re;
        for k in 0..j {
            d -= l[(j, k)].norm_sqr();
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(NumericsError::NotPositiveDefinite { index: j, pivot: d });
        }
        let ljj = d.sqrt();
        l[(j, j)] = Complex64::new(ljj, 0.0);
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)].conj();
            }
            l[(i, j)] = s / ljj;
        }
    }
    Ok(l)
}

fn check_rhs(a: &CMatrix, b: &[Complex64]) -> Result<()> {
    if b.len() != a.rows() {
        return Err(NumericsError::ShapeMismatch {
            expected: format!("rhs of length {}", a.rows()),
            got: format!("length {}", b.len()),
        });
    }
    Ok(())
}

/// Solves `A x = b` for Hermitian positive definite `A`.
pub fn solve_hpd(a: &CMatrix, b: &[Complex64]) -> Result<CVector> {
    a.check_hermitian()?;
    check_rhs(a, b)?;
    let l = cholesky(a)?;
    let n = a.rows();
    // forward: L y = b
    let mut y = CVector::zeros(n);
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[(i, k)] * y[k];
        }
        y[i] = s / l[(i, i)].re;
    }
    // backward: Lᴴ x = y
    let mut x = CVector::zeros(n);
    for i in (0..n).rev() {
        let mut s = y[i];
        for k in i + 1..n {
            s -= l[(k, i)].conj() * x[k];
        }
        x[i] = s / l[(i, i)].re;
    }
    Ok(x)
}

/// Natural log of the determinant of a Hermitian positive definite matrix.
pub fn logdet_hpd(a: &CMatrix) -> Result<f64> {
    a.check_hermitian()?;
    let l = cholesky(a)?;
    Ok(2.0 * (0..a.rows()).map(|i| l[(i, i)].re.ln()).sum::<f64>())
}

/// Below this magnitude [`bessel_j0`] sums the power series; above it, the
/// Hankel asymptotic expansion. At 12 the series loses under 1e-12 to
/// cancellation and the asymptotic expansion's smallest term is below 1e-10.
const J0_SERIES_LIMIT: f64 = 12.0;

/// Bessel function of the first kind, order zero.
pub fn bessel_j0(x: f64) -> f64 {
    let ax = x.abs();
    if ax < J0_SERIES_LIMIT {
        // Σ (-1)^k (x²/4)^k / (k!)²
        let q = 0.25 * ax * ax;
        let mut term = 1.0;
        let mut sum = 1.0;
        let mut k = 1.0;
        loop {
            term *= -q / (k * k);
            sum += term;
            if term.abs() < 1e-17 * sum.abs().max(1e-300) && k > q {
                break;
            }
            k += 1.0;
        }
        sum
    } else {
        // J0(x) ~ sqrt(2/(πx)) (P cos χ − Q sin χ), χ = x − π/4
        let eight_x = 8.0 * ax;
        let mut p = 1.0;
        let mut q = 0.0;
        let mut term = 1.0;
        let mut prev = f64::INFINITY;
        for k in 1..60u32 {
            let odd = (2 * k - 1) as f64;
            term *= -odd * odd / (k as f64 * eight_x);
            if term.abs() >= prev {
                break;
            }
            prev = term.abs();
            // even k feed P with alternating sign, odd k feed Q
            if k % 2 == 1 {
                q += if (k / 2) % 2 == 0 { term } else { -term };
            } else {
                p += if (k / 2) % 2 == 0 { term } else { -term };
            }
            if term.abs() < 1e-17 {
                break;
            }
        }
        let chi = ax - FRAC_PI_4;
        (2.0 / (PI * ax)).sqrt() * (p * chi.cos() - q * chi.sin())
    }
}

/// Draws `n` circularly symmetric complex Gaussian entries with total
/// per-entry variance `variance` (each of real and imaginary part gets half).
pub fn sample_cscg<R: Rng + ?Sized>(n: usize, variance: f64, rng: &mut R) -> Result<CVector> {
    if variance < 0.0 || variance.is_nan() {
        return Err(NumericsError::NegativeVariance(variance));
    }
    if variance == 0.0 {
        return Ok(CVector::zeros(n));
    }
    let normal = Normal::new(0.0, (variance / 2.0).sqrt()).expect("finite std");
    Ok(CVector(
        (0..n)
            .map(|_| Complex64::new(normal.sample(rng), normal.sample(rng)))
            .collect(),
    ))
}

/// Root of a monotone scalar function on a sign-changing bracket.
///
/// Returns as soon as `|f(x)| <= tol` or the bracket is narrower than `tol`.
pub fn bisect<F: FnMut(f64) -> f64>(mut f: F, lo: f64, hi: f64, tol: f64) -> Result<f64> {
    let (mut lo, mut hi) = (lo, hi);
    let f_lo = f(lo);
    let f_hi = f(hi);
    if f_lo == 0.0 {
        return Ok(lo);
    }
    if f_hi == 0.0 {
        return Ok(hi);
    }
    if f_lo.signum() == f_hi.signum() || f_lo.is_nan() || f_hi.is_nan() {
        return Err(NumericsError::NoSignChange { f_lo, f_hi });
    }
    let lo_negative = f_lo < 0.0;
    for _ in 0..BISECT_MAX_ITER {
        let mid = 0.5 * (lo + hi);
        let fm = f(mid);
        if fm.abs() <= tol || (hi - lo).abs() <= tol {
            return Ok(mid);
        }
        if (fm < 0.0) == lo_negative {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(NumericsError::MaxIterationsExceeded(BISECT_MAX_ITER))
}
