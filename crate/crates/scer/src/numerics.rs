//! Dense vector/matrix kernels, positive-definite factorization, covariance
//! estimation, and the standard normal CDF.
//!
//! Everything here is plain `f64` with explicit loops; the dimensions in this
//! crate are small (embedding dims of a few to a few dozen), so the cost of a
//! BLAS dependency buys nothing and would hide the exact error semantics the
//! rest of the crate relies on (for example naming the leading non-positive
//! minor on a failed factorization).

// the erf/erfc coefficient tables are kept verbatim at full printed precision
#![allow(clippy::excessive_precision)]

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

// ---------------------------------------------------------------------------
// Error function.
//
// Rational approximations from FreeBSD's msun (s_erf.c), also used by the Go
// standard library. Accuracy is ~1 ulp, far below the 1e-10 absolute error
// budget of `std_normal_cdf`.
//
// ====================================================
// Copyright (C) 1993 by Sun Microsystems, Inc. All rights reserved.
//
// Developed at SunPro, a Sun Microsystems, Inc. business.
// Permission to use, copy, modify, and distribute this
// software is freely granted, provided that this notice
// is preserved.
// ====================================================
// ---------------------------------------------------------------------------

const ERX: f64 = 8.45062911510467529297e-01;

// coefficients for approximation to erf in [0, 0.84375]
const EFX: f64 = 1.28379167095512586316e-01;
const EFX8: f64 = 1.02703333676410069053e+00;
const PP0: f64 = 1.28379167095512558561e-01;
const PP1: f64 = -3.25042107247001499370e-01;
const PP2: f64 = -2.84817495755985104766e-02;
const PP3: f64 = -5.77027029648944159157e-03;
const PP4: f64 = -2.37630166566501626084e-05;
const QQ1: f64 = 3.97917223959155352819e-01;
const QQ2: f64 = 6.50222499887672944485e-02;
const QQ3: f64 = 5.08130628187576562776e-03;
const QQ4: f64 = 1.32494738004321644526e-04;
const QQ5: f64 = -3.96022827877536812320e-06;

// coefficients for approximation to erf in [0.84375, 1.25]
const PA0: f64 = -2.36211856075265944077e-03;
const PA1: f64 = 4.14856118683748331666e-01;
const PA2: f64 = -3.72207876035701323847e-01;
const PA3: f64 = 3.18346619901161753674e-01;
const PA4: f64 = -1.10894694282396677476e-01;
const PA5: f64 = 3.54783043256182359371e-02;
const PA6: f64 = -2.16637559486879084300e-03;
const QA1: f64 = 1.06420880400844228286e-01;
const QA2: f64 = 5.40397917702171048937e-01;
const QA3: f64 = 7.18286544141962662868e-02;
const QA4: f64 = 1.26171219808761642112e-01;
const QA5: f64 = 1.36370839120290507362e-02;
const QA6: f64 = 1.19844998467991074170e-02;

// coefficients for approximation to erfc in [1.25, 1/0.35]
const RA0: f64 = -9.86494403484714822705e-03;
const RA1: f64 = -6.93858572707181764372e-01;
const RA2: f64 = -1.05586262253232909814e+01;
const RA3: f64 = -6.23753324503260060396e+01;
const RA4: f64 = -1.62396669462573470355e+02;
const RA5: f64 = -1.84605092906711035994e+02;
const RA6: f64 = -8.12874355063065934246e+01;
const RA7: f64 = -9.81432934416914548592e+00;
const SA1: f64 = 1.96512716674392571292e+01;
const SA2: f64 = 1.37657754143519042600e+02;
const SA3: f64 = 4.34565877475229228821e+02;
const SA4: f64 = 6.45387271733267880336e+02;
const SA5: f64 = 4.29008140027567833386e+02;
const SA6: f64 = 1.08635005541779435134e+02;
const SA7: f64 = 6.57024977031928170135e+00;
const SA8: f64 = -6.04244152148580987438e-02;

// coefficients for approximation to erfc in [1/0.35, 28]
const RB0: f64 = -9.86494292470009928597e-03;
const RB1: f64 = -7.99283237680523006574e-01;
const RB2: f64 = -1.77579549177547519889e+01;
const RB3: f64 = -1.60636384855821916062e+02;
const RB4: f64 = -6.37566443368389627722e+02;
const RB5: f64 = -1.02509513161107724954e+03;
const RB6: f64 = -4.83519191608651397019e+02;
const SB1: f64 = 3.03380607434824582924e+01;
const SB2: f64 = 3.25792512996573918826e+02;
const SB3: f64 = 1.53672958608443695994e+03;
const SB4: f64 = 3.19985821950859553908e+03;
const SB5: f64 = 2.55305040643316442583e+03;
const SB6: f64 = 4.74528541206955367215e+02;
const SB7: f64 = -2.24409524465858183362e+01;

const VERY_TINY: f64 = 2.848094538889218e-306; // 0x0080000000000000
const TINY: f64 = 1.0 / 72057594037927936.0; // 2^-56
const SMALL: f64 = 1.0 / 268435456.0; // 2^-28

/// Error function, `erf(x) = 2/sqrt(pi) * integral_0^x exp(-t^2) dt`.
pub fn erf(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    if x == f64::INFINITY {
        return 1.0;
    }
    if x == f64::NEG_INFINITY {
        return -1.0;
    }
    let sign = x < 0.0;
    let x = x.abs();
    if x < 0.84375 {
        let temp = if x < SMALL {
            if x < VERY_TINY {
                0.125 * (8.0 * x + EFX8 * x) // avoid underflow
            } else {
                x + EFX * x
            }
        } else {
            let z = x * x;
            let r = PP0 + z * (PP1 + z * (PP2 + z * (PP3 + z * PP4)));
            let s = 1.0 + z * (QQ1 + z * (QQ2 + z * (QQ3 + z * (QQ4 + z * QQ5))));
            x + x * (r / s)
        };
        return if sign { -temp } else { temp };
    }
    if x < 1.25 {
        let s = x - 1.0;
        let p = PA0 + s * (PA1 + s * (PA2 + s * (PA3 + s * (PA4 + s * (PA5 + s * PA6)))));
        let q = 1.0 + s * (QA1 + s * (QA2 + s * (QA3 + s * (QA4 + s * (QA5 + s * QA6)))));
        return if sign { -ERX - p / q } else { ERX + p / q };
    }
    if x >= 6.0 {
        return if sign { -1.0 } else { 1.0 };
    }
    let s = 1.0 / (x * x);
    let (r, q) = if x < 1.0 / 0.35 {
        (
            RA0 + s * (RA1 + s * (RA2 + s * (RA3 + s * (RA4 + s * (RA5 + s * (RA6 + s * RA7)))))),
            1.0 + s
                * (SA1
                    + s * (SA2
                        + s * (SA3 + s * (SA4 + s * (SA5 + s * (SA6 + s * (SA7 + s * SA8))))))),
        )
    } else {
        (
            RB0 + s * (RB1 + s * (RB2 + s * (RB3 + s * (RB4 + s * (RB5 + s * RB6))))),
            1.0 + s * (SB1 + s * (SB2 + s * (SB3 + s * (SB4 + s * (SB5 + s * (SB6 + s * SB7)))))),
        )
    };
    // pseudo-single precision split of x so that z*z is exact
    let z = f64::from_bits(f64::to_bits(x) & 0xffff_ffff_0000_0000);
    let r = f64::exp(-z * z - 0.5625) * f64::exp((z - x) * (z + x) + r / q);
    if sign {
        r / x - 1.0
    } else {
        1.0 - r / x
    }
}

/// Complementary error function, `erfc(x) = 1 - erf(x)`, accurate in the tail.
pub fn erfc(x: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    if x == f64::INFINITY {
        return 0.0;
    }
    if x == f64::NEG_INFINITY {
        return 2.0;
    }
    let sign = x < 0.0;
    let x = x.abs();
    if x < 0.84375 {
        let temp = if x < TINY {
            x
        } else {
            let z = x * x;
            let r = PP0 + z * (PP1 + z * (PP2 + z * (PP3 + z * PP4)));
            let s = 1.0 + z * (QQ1 + z * (QQ2 + z * (QQ3 + z * (QQ4 + z * QQ5))));
            let y = x * (r / s);
            if x < 0.25 {
                x + y
            } else {
                0.5 + (y + (x - 0.5))
            }
        };
        return if sign { 1.0 + temp } else { 1.0 - temp };
    }
    if x < 1.25 {
        let s = x - 1.0;
        let p = PA0 + s * (PA1 + s * (PA2 + s * (PA3 + s * (PA4 + s * (PA5 + s * PA6)))));
        let q = 1.0 + s * (QA1 + s * (QA2 + s * (QA3 + s * (QA4 + s * (QA5 + s * QA6)))));
        return if sign {
            1.0 + ERX + p / q
        } else {
            1.0 - ERX - p / q
        };
    }
    if x < 28.0 {
        let s = 1.0 / (x * x);
        let (r, q) = if x < 1.0 / 0.35 {
            (
                RA0 + s
                    * (RA1 + s * (RA2 + s * (RA3 + s * (RA4 + s * (RA5 + s * (RA6 + s * RA7)))))),
                1.0 + s
                    * (SA1
                        + s * (SA2
                            + s * (SA3 + s * (SA4 + s * (SA5 + s * (SA6 + s * (SA7 + s * SA8))))))),
            )
        } else {
            if sign && x > 6.0 {
                return 2.0;
            }
            (
                RB0 + s * (RB1 + s * (RB2 + s * (RB3 + s * (RB4 + s * (RB5 + s * RB6))))),
                1.0 + s
                    * (SB1 + s * (SB2 + s * (SB3 + s * (SB4 + s * (SB5 + s * (SB6 + s * SB7)))))),
            )
        };
        let z = f64::from_bits(f64::to_bits(x) & 0xffff_ffff_0000_0000);
        let r = f64::exp(-z * z - 0.5625) * f64::exp((z - x) * (z + x) + r / q);
        return if sign { 2.0 - r / x } else { r / x };
    }
    if sign {
        2.0
    } else {
        0.0
    }
}

/// Standard normal CDF.
///
/// Returns an error for non-finite input; absolute error is below 1e-10
/// everywhere (in practice close to machine precision, including deep tails,
/// because it goes through `erfc` rather than `1 - erf`).
pub fn std_normal_cdf(x: f64) -> Result<f64> {
    if !x.is_finite() {
        return Err(Error::NonFinite {
            context: format!("std_normal_cdf({x})"),
        });
    }
    Ok(phi(x))
}

/// Unchecked standard normal CDF for already-validated finite arguments.
pub(crate) fn phi(x: f64) -> f64 {
    0.5 * erfc(-x * std::f64::consts::FRAC_1_SQRT_2)
}

// ---------------------------------------------------------------------------
// Vectors and matrices.
// ---------------------------------------------------------------------------

/// A fixed-length real vector with finite entries (an embedding point, a
/// direction, a classifier column).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Vector {
    entries: Vec<f64>,
}

impl Vector {
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        if let Some(bad) = entries.iter().find(|e| !e.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("vector entry {bad}"),
            });
        }
        Ok(Self { entries })
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            entries: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.entries.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.entries
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.entries
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.entries
    }

    /// Euclidean inner product. Panics on dimension mismatch (programming
    /// error); the public operations validate dimensions up front.
    pub fn dot(&self, other: &Vector) -> f64 {
        assert_eq!(self.dim(), other.dim(), "vector dims must match");
        self.entries
            .iter()
            .zip(&other.entries)
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn norm2(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.entries.iter().all(|&e| e == 0.0)
    }

    pub fn scale(&self, c: f64) -> Vector {
        Vector {
            entries: self.entries.iter().map(|e| c * e).collect(),
        }
    }

    /// `self += c * other`
    pub fn axpy(&mut self, c: f64, other: &Vector) {
        assert_eq!(self.dim(), other.dim(), "vector dims must match");
        for (a, b) in self.entries.iter_mut().zip(&other.entries) {
            *a += c * b;
        }
    }

    pub fn add(&self, other: &Vector) -> Vector {
        let mut out = self.clone();
        out.axpy(1.0, other);
        out
    }

    pub fn sub(&self, other: &Vector) -> Vector {
        let mut out = self.clone();
        out.axpy(-1.0, other);
        out
    }
}

impl TryFrom<Vec<f64>> for Vector {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Vector::new(v)
    }
}

impl From<Vector> for Vec<f64> {
    fn from(v: Vector) -> Vec<f64> {
        v.entries
    }
}

impl std::ops::Index<usize> for Vector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.entries[i]
    }
}

impl std::ops::IndexMut<usize> for Vector {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        &mut self.entries[i]
    }
}

/// Dense row-major matrix. Used for classifier weights and feature-map
/// parameters; not required to be square or symmetric.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_row_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                got: data.len(),
            });
        }
        if let Some(bad) = data.iter().find(|e| !e.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("matrix entry {bad}"),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// `self * x`
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols, "matvec dims must match");
        let mut out = vec![0.0; self.rows];
        for i in 0..self.rows {
            let row = &self.data[i * self.cols..(i + 1) * self.cols];
            out[i] = row.iter().zip(x).map(|(a, b)| a * b).sum();
        }
        out
    }

    /// `self += w * a * b^T`
    pub fn add_outer(&mut self, w: f64, a: &[f64], b: &[f64]) {
        assert_eq!(a.len(), self.rows);
        assert_eq!(b.len(), self.cols);
        for i in 0..self.rows {
            let wa = w * a[i];
            let row = &mut self.data[i * self.cols..(i + 1) * self.cols];
            for (r, bj) in row.iter_mut().zip(b) {
                *r += wa * bj;
            }
        }
    }

    /// `self += c * other`, elementwise.
    pub fn axpy(&mut self, c: f64, other: &Matrix) {
        assert_eq!(self.rows, other.rows);
        assert_eq!(self.cols, other.cols);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += c * b;
        }
    }

    pub fn scale_in_place(&mut self, c: f64) {
        for a in &mut self.data {
            *a *= c;
        }
    }
}

/// Symmetric positive-definite matrix (covariance of embedding vectors).
///
/// Symmetry is validated on construction to a 1e-12 relative tolerance;
/// positive definiteness is established lazily by a successful Cholesky
/// factorization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct SpdMatrix {
    dim: usize,
    data: Vec<f64>, // row-major, exactly symmetric after construction
}

impl SpdMatrix {
    pub fn from_entries(entries: Vec<Vec<f64>>) -> Result<Self> {
        let dim = entries.len();
        let mut data = Vec::with_capacity(dim * dim);
        for row in &entries {
            if row.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: row.len(),
                });
            }
            for &e in row {
                if !e.is_finite() {
                    return Err(Error::NonFinite {
                        context: format!("covariance entry {e}"),
                    });
                }
                data.push(e);
            }
        }
        let scale = data.iter().fold(0.0f64, |m, e| m.max(e.abs())).max(1.0);
        for i in 0..dim {
            for j in (i + 1)..dim {
                let a = data[i * dim + j];
                let b = data[j * dim + i];
                if (a - b).abs() > 1e-12 * scale {
                    return Err(Error::Schema {
                        context: format!("matrix not symmetric at ({i},{j}): {a} vs {b}"),
                    });
                }
                // symmetrize exactly
                let avg = 0.5 * (a + b);
                data[i * dim + j] = avg;
                data[j * dim + i] = avg;
            }
        }
        Ok(Self { dim, data })
    }

    pub fn identity(dim: usize) -> Self {
        let mut data = vec![0.0; dim * dim];
        for i in 0..dim {
            data[i * dim + i] = 1.0;
        }
        Self { dim, data }
    }

    pub fn diagonal(diag: &[f64]) -> Self {
        let dim = diag.len();
        let mut data = vec![0.0; dim * dim];
        for (i, &d) in diag.iter().enumerate() {
            data[i * dim + i] = d;
        }
        Self { dim, data }
    }

    pub(crate) fn from_symmetric_unchecked(dim: usize, data: Vec<f64>) -> Self {
        Self { dim, data }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim + j]
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim).map(|i| self.get(i, i)).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, e| m.max(e.abs()))
    }

    /// Returns a copy with `ridge` added to every diagonal entry.
    pub fn with_ridge(&self, ridge: f64) -> SpdMatrix {
        let mut out = self.clone();
        for i in 0..self.dim {
            out.data[i * self.dim + i] += ridge;
        }
        out
    }

    /// Quadratic form `v^T Sigma v`.
    pub fn quad_form(&self, v: &Vector) -> Result<f64> {
        if v.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: v.dim(),
            });
        }
        let vs = v.as_slice();
        let mut total = 0.0;
        for i in 0..self.dim {
            let row = &self.data[i * self.dim..(i + 1) * self.dim];
            let mut acc = 0.0;
            for (s, vj) in row.iter().zip(vs) {
                acc += s * vj;
            }
            total += vs[i] * acc;
        }
        Ok(total)
    }

    /// `Sigma * v`
    pub fn matvec(&self, v: &Vector) -> Result<Vector> {
        if v.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: v.dim(),
            });
        }
        let vs = v.as_slice();
        let mut out = Vector::zeros(self.dim);
        for i in 0..self.dim {
            let row = &self.data[i * self.dim..(i + 1) * self.dim];
            out[i] = row.iter().zip(vs).map(|(a, b)| a * b).sum();
        }
        Ok(out)
    }

    /// Lower-triangular Cholesky factor `L` with `Sigma = L L^T`.
    pub fn cholesky(&self) -> Result<CholeskyFactor> {
        let n = self.dim;
        let mut l = vec![0.0f64; n * n];
        for i in 0..n {
            for j in 0..=i {
                let mut sum = self.get(i, j);
                for k in 0..j {
                    sum -= l[i * n + k] * l[j * n + k];
                }
                if i == j {
                    if sum <= 0.0 {
                        return Err(Error::NotPositiveDefinite { minor: i + 1 });
                    }
                    l[i * n + i] = sum.sqrt();
                } else {
                    l[i * n + j] = sum / l[j * n + j];
                }
            }
        }
        Ok(CholeskyFactor { dim: n, l })
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.dim)
            .map(|i| self.data[i * self.dim..(i + 1) * self.dim].to_vec())
            .collect()
    }
}

impl TryFrom<Vec<Vec<f64>>> for SpdMatrix {
    type Error = Error;
    fn try_from(entries: Vec<Vec<f64>>) -> Result<Self> {
        SpdMatrix::from_entries(entries)
    }
}

impl From<SpdMatrix> for Vec<Vec<f64>> {
    fn from(m: SpdMatrix) -> Vec<Vec<f64>> {
        m.rows()
    }
}

/// Lower-triangular Cholesky factor of an SPD matrix.
#[derive(Clone, Debug)]
pub struct CholeskyFactor {
    dim: usize,
    l: Vec<f64>, // row-major, strictly lower + diagonal
}

impl CholeskyFactor {
    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.l[i * self.dim + j]
    }

    /// Solves `Sigma u = v` by forward then backward substitution.
    pub fn solve(&self, v: &Vector) -> Result<Vector> {
        if v.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: v.dim(),
            });
        }
        let n = self.dim;
        // L y = v
        let mut y = vec![0.0; n];
        for i in 0..n {
            let mut sum = v[i];
            for k in 0..i {
                sum -= self.l[i * n + k] * y[k];
            }
            y[i] = sum / self.l[i * n + i];
        }
        // L^T u = y
        let mut u = vec![0.0; n];
        for i in (0..n).rev() {
            let mut sum = y[i];
            for k in (i + 1)..n {
                sum -= self.l[k * n + i] * u[k];
            }
            u[i] = sum / self.l[i * n + i];
        }
        Vector::new(u)
    }

    /// `L * z`; maps standard normal draws to `N(0, Sigma)` draws.
    pub fn mul_lower(&self, z: &[f64]) -> Vector {
        assert_eq!(z.len(), self.dim, "cholesky mul dims must match");
        let n = self.dim;
        let mut out = Vector::zeros(n);
        for i in 0..n {
            let mut acc = 0.0;
            for k in 0..=i {
                acc += self.l[i * n + k] * z[k];
            }
            out[i] = acc;
        }
        out
    }

    /// Cheap condition-number estimate `(max diag L / min diag L)^2`, a lower
    /// bound on the 2-norm condition of the factored matrix.
    pub fn condition_estimate(&self) -> f64 {
        let n = self.dim;
        let mut lo = f64::INFINITY;
        let mut hi = 0.0f64;
        for i in 0..n {
            let d = self.l[i * n + i];
            lo = lo.min(d);
            hi = hi.max(d);
        }
        (hi / lo).powi(2)
    }
}

/// Mahalanobis norm `||v||_Sigma = sqrt(v^T Sigma v)`.
///
/// Tiny negative quadratic forms (above -1e-12) round to zero; anything more
/// negative means the matrix is not positive definite and is an error.
pub fn sigma_norm(v: &Vector, sigma: &SpdMatrix) -> Result<f64> {
    let q = sigma.quad_form(v)?;
    if q < -1e-12 {
        return Err(Error::NegativeQuadraticForm { value: q });
    }
    Ok(q.max(0.0).sqrt())
}

/// Plain Euclidean norm, the ablation counterpart of [`sigma_norm`].
pub fn euclidean_norm(v: &Vector) -> f64 {
    v.norm2()
}

/// Biased (divide-by-N) covariance of the samples plus `ridge * I`.
///
/// The divide-by-N convention matches the per-batch covariance used by the
/// trainer; `ridge > 0` keeps near-singular batch covariances factorizable.
pub fn pooled_covariance(samples: &[Vector], ridge: f64) -> Result<SpdMatrix> {
    if samples.len() < 2 {
        return Err(Error::TooFewSamples {
            needed: 2,
            got: samples.len(),
        });
    }
    let dim = samples[0].dim();
    for s in samples {
        if s.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: s.dim(),
            });
        }
    }
    let n = samples.len() as f64;
    let mut mean = vec![0.0; dim];
    for s in samples {
        for (m, &x) in mean.iter_mut().zip(s.as_slice()) {
            *m += x;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    // accumulate the upper triangle, then mirror: exact symmetry by construction
    let mut data = vec![0.0; dim * dim];
    let mut centered = vec![0.0; dim];
    for s in samples {
        for (c, (&x, &m)) in centered.iter_mut().zip(s.as_slice().iter().zip(&mean)) {
            *c = x - m;
        }
        for i in 0..dim {
            let ci = centered[i];
            for j in i..dim {
                data[i * dim + j] += ci * centered[j];
            }
        }
    }
    for i in 0..dim {
        for j in i..dim {
            let v = data[i * dim + j] / n;
            data[i * dim + j] = v;
            data[j * dim + i] = v;
        }
        data[i * dim + i] += ridge;
    }
    Ok(SpdMatrix::from_symmetric_unchecked(dim, data))
}

/// Covariance with the default relative ridge `1e-4 * trace / dim`
/// (falling back to `1e-8` for an all-identical sample set so the result
/// stays factorizable).
pub fn pooled_covariance_auto(samples: &[Vector]) -> Result<SpdMatrix> {
    let raw = pooled_covariance(samples, 0.0)?;
    let dim = raw.dim();
    let mut ridge = 1e-4 * raw.trace() / dim as f64;
    if ridge <= 0.0 {
        ridge = 1e-8;
    }
    Ok(raw.with_ridge(ridge))
}

/// Solves `Sigma u = v` for SPD `Sigma`.
pub fn solve_spd(sigma: &SpdMatrix, v: &Vector) -> Result<Vector> {
    sigma.cholesky()?.solve(v)
}
