//! Dense symmetric matrices and the positive-definite toolbox used by every
//! other module: Cholesky, SPD inverse, log-determinant, Jacobi eigenvalues
//! and the Löwner-order test.
//!
//! Dimensions in this crate are tiny (n ≤ 8), so everything is full storage
//! and unblocked.

use std::fmt;
use std::ops::{Add, Sub};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Relative symmetry tolerance accepted by [`SymMat::new`].
pub const SYMMETRY_RTOL: f64 = 1e-12;

const JACOBI_MAX_SWEEPS: usize = 64;

/// Dense symmetric `n × n` real matrix.
///
/// The stored entries are exactly symmetric: constructors average the two
/// triangles after checking that they agree within [`SYMMETRY_RTOL`].
#[derive(Clone, PartialEq)]
pub struct SymMat(DMatrix<f64>);

impl SymMat {
    /// Validates squareness, finiteness and symmetry.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() == 0 {
            return Err(Error::InvalidMatrix("dimension must be at least 1".into()));
        }
        if m.nrows() != m.ncols() {
            return Err(Error::DimensionMismatch {
                expected: m.nrows(),
                got: m.ncols(),
            });
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidMatrix("non-finite entry".into()));
        }
        let max_abs = m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
        let asymmetry = asymmetry(&m);
        if asymmetry > SYMMETRY_RTOL * (1.0 + max_abs) {
            return Err(Error::NotSymmetric { asymmetry });
        }
        Ok(Self::symmetrize(m))
    }

    /// Averages `m` with its transpose. Used for products that are
    /// symmetric in exact arithmetic.
    pub fn symmetrize(m: DMatrix<f64>) -> Self {
        debug_assert_eq!(m.nrows(), m.ncols());
        let t = m.transpose();
        SymMat((m + t) * 0.5)
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if let Some(bad) = rows.iter().find(|r| r.len() != n) {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: bad.len(),
            });
        }
        Self::new(DMatrix::from_fn(n, n, |a, b| rows[a][b]))
    }

    pub fn from_row_slice(n: usize, data: &[f64]) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::DimensionMismatch {
                expected: n * n,
                got: data.len(),
            });
        }
        Self::new(DMatrix::from_row_slice(n, n, data))
    }

    pub fn identity(n: usize) -> Self {
        SymMat(DMatrix::identity(n, n))
    }

    pub fn zeros(n: usize) -> Self {
        SymMat(DMatrix::zeros(n, n))
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        SymMat(DMatrix::from_diagonal(&DVector::from_column_slice(diag)))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.0[(a, b)]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.dim())
            .map(|a| (0..self.dim()).map(|b| self.0[(a, b)]).collect())
            .collect()
    }

    pub fn scale(&self, c: f64) -> Self {
        SymMat(&self.0 * c)
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.0.norm()
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
    }

    /// `Rᵀ · self · R` for a square `R` of matching size.
    pub fn congruence(&self, r: &DMatrix<f64>) -> Self {
        debug_assert_eq!(r.nrows(), self.dim());
        SymMat::symmetrize(r.transpose() * &self.0 * r)
    }

    /// `B · self · Bᵀ` for a (possibly rectangular) `B`.
    pub fn sandwich(&self, b: &DMatrix<f64>) -> Self {
        SymMat::symmetrize(b * &self.0 * b.transpose())
    }

    /// Σ wₗ·Mₗ. All matrices must share one dimension; `mats` non-empty.
    pub fn weighted_sum<'a, I>(dim: usize, terms: I) -> Self
    where
        I: IntoIterator<Item = (f64, &'a SymMat)>,
    {
        let mut acc = DMatrix::zeros(dim, dim);
        for (w, m) in terms {
            debug_assert_eq!(m.dim(), dim);
            if w != 0.0 {
                acc += &m.0 * w;
            }
        }
        SymMat(acc)
    }

    pub fn mul_vec(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.0 * v
    }
}

impl fmt::Debug for SymMat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_tuple("SymMat").field(&self.to_rows()).finish()
    }
}

impl Add for &SymMat {
    type Output = SymMat;
    fn add(self, rhs: &SymMat) -> SymMat {
        SymMat(&self.0 + &rhs.0)
    }
}

impl Sub for &SymMat {
    type Output = SymMat;
    fn sub(self, rhs: &SymMat) -> SymMat {
        SymMat(&self.0 - &rhs.0)
    }
}

fn asymmetry(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0_f64;
    for a in 0..n {
        for b in (a + 1)..n {
            worst = worst.max((m[(a, b)] - m[(b, a)]).abs());
        }
    }
    worst
}

/// Slack for semidefiniteness tests.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PsdTolerance {
    pub eig_floor: f64,
}

impl PsdTolerance {
    pub const DEFAULT_EIG_FLOOR: f64 = 1e-9;

    pub fn new(eig_floor: f64) -> Result<Self> {
        if !(eig_floor >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "eig_floor must be >= 0, got {eig_floor}"
            )));
        }
        Ok(Self { eig_floor })
    }
}

impl Default for PsdTolerance {
    fn default() -> Self {
        Self {
            eig_floor: Self::DEFAULT_EIG_FLOOR,
        }
    }
}

/// Lower-triangular `L` with `L·Lᵀ = m`.
///
/// Fails with [`Error::NotPositiveDefinite`] at the first pivot that is not
/// strictly positive.
pub fn cholesky(m: &SymMat) -> Result<DMatrix<f64>> {
    let n = m.dim();
    let a = m.as_matrix();
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 0.0) {
            return Err(Error::NotPositiveDefinite { pivot: j, value: d });
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / djj;
        }
    }
    Ok(l)
}

/// Solves `L·x = b` in place for lower-triangular `L`.
fn forward_substitute(l: &DMatrix<f64>, b: &mut DVector<f64>) {
    let n = l.nrows();
    for i in 0..n {
        let mut s = b[i];
        for k in 0..i {
            s -= l[(i, k)] * b[k];
        }
        b[i] = s / l[(i, i)];
    }
}

/// Solves `Lᵀ·x = b` in place for lower-triangular `L`.
fn backward_substitute(l: &DMatrix<f64>, b: &mut DVector<f64>) {
    let n = l.nrows();
    for i in (0..n).rev() {
        let mut s = b[i];
        for k in (i + 1)..n {
            s -= l[(k, i)] * b[k];
        }
        b[i] = s / l[(i, i)];
    }
}

/// Solves `m·x = b` for positive definite `m`.
pub fn solve_spd(m: &SymMat, b: &DVector<f64>) -> Result<DVector<f64>> {
    if b.len() != m.dim() {
        return Err(Error::DimensionMismatch {
            expected: m.dim(),
            got: b.len(),
        });
    }
    let l = cholesky(m)?;
    let mut x = b.clone();
    forward_substitute(&l, &mut x);
    backward_substitute(&l, &mut x);
    Ok(x)
}

pub fn inverse_spd(m: &SymMat) -> Result<SymMat> {
    let n = m.dim();
    let l = cholesky(m)?;
    let mut inv = DMatrix::<f64>::zeros(n, n);
    for c in 0..n {
        let mut e = DVector::<f64>::zeros(n);
        e[c] = 1.0;
        forward_substitute(&l, &mut e);
        backward_substitute(&l, &mut e);
        inv.set_column(c, &e);
    }
    Ok(SymMat::symmetrize(inv))
}

/// `log det m` as twice the sum of the log-diagonal of the Cholesky factor.
pub fn log_det_spd(m: &SymMat) -> Result<f64> {
    let l = cholesky(m)?;
    Ok(2.0 * l.diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

/// Eigenvalues in ascending order, by cyclic Jacobi rotations.
pub fn eigvals_sym(m: &SymMat) -> Vec<f64> {
    let mut vals = jacobi_diagonalize(m.as_matrix().clone());
    vals.sort_by(f64::total_cmp);
    vals
}

pub fn lambda_min(m: &SymMat) -> f64 {
    eigvals_sym(m)[0]
}

pub fn lambda_max(m: &SymMat) -> f64 {
    *eigvals_sym(m).last().expect("dim >= 1")
}

// Row-cyclic sweep order (p < q, row-major) keeps results bit-reproducible.
fn jacobi_diagonalize(mut a: DMatrix<f64>) -> Vec<f64> {
    let n = a.nrows();
    let scale = a.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
    if n == 1 || scale == 0.0 {
        return a.diagonal().iter().copied().collect();
    }
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[(p, q)] * a[(p, q)];
            }
        }
        if off.sqrt() <= f64::EPSILON * 1e-2 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let app = a[(p, p)];
                let aqq = a[(q, q)];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                a[(p, q)] = 0.0;
                a[(q, p)] = 0.0;
            }
        }
    }
    a.diagonal().iter().copied().collect()
}

/// Löwner order test `a ⪯ b`: smallest eigenvalue of `b − a` is at least
/// `−tol.eig_floor`.
pub fn psd_leq(a: &SymMat, b: &SymMat, tol: PsdTolerance) -> Result<bool> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    Ok(lambda_min(&(b - a)) >= -tol.eig_floor)
}

/// `0 ⪯ m` within tolerance.
pub fn is_psd(m: &SymMat, tol: PsdTolerance) -> bool {
    lambda_min(m) >= -tol.eig_floor
}

/// Generalized eigenvalues of the pencil `(a, b)` for positive definite `b`,
/// i.e. eigenvalues of `L⁻¹·a·L⁻ᵀ` with `b = L·Lᵀ`, ascending.
pub fn generalized_eigvals(a: &SymMat, b: &SymMat) -> Result<Vec<f64>> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: b.dim(),
            got: a.dim(),
        });
    }
    let n = b.dim();
    let l = cholesky(b)?;
    // X = L⁻¹·A, then (L⁻¹·Xᵀ)ᵀ = L⁻¹·A·L⁻ᵀ.
    let mut x = a.as_matrix().clone();
    for c in 0..n {
        let mut col = x.column(c).into_owned();
        forward_substitute(&l, &mut col);
        x.set_column(c, &col);
    }
    let mut y = x.transpose();
    for c in 0..n {
        let mut col = y.column(c).into_owned();
        forward_substitute(&l, &mut col);
        y.set_column(c, &col);
    }
    Ok(eigvals_sym(&SymMat::symmetrize(y)))
}

/// Random SPD matrix with eigenvalues uniform in `range` and a Haar-like
/// random eigenbasis.
pub fn random_spd<R: Rng + ?Sized>(rng: &mut R, n: usize, range: (f64, f64)) -> SymMat {
    let g = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let q = g.qr().q();
    let d: Vec<f64> = (0..n).map(|_| rng.random_range(range.0..=range.1)).collect();
    SymMat::from_diagonal(&d).sandwich(&q)
}
