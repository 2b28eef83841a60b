//! Dense linear algebra, seeded random numbers, and weight initialization.
//!
//! Everything here is `f64`, row-major, and small. Dimension mismatches are
//! programming errors and panic, the same way slice indexing does; invalid
//! distribution parameters are reported through [`Error`].

use std::ops::{Deref, DerefMut};

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// A dense real vector.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn new(data: Vec<f64>) -> Self {
        Vector(data)
    }

    pub fn zeros(n: usize) -> Self {
        Vector(vec![0.0; n])
    }

    pub fn filled(n: usize, value: f64) -> Self {
        Vector(vec![value; n])
    }

    /// Unit vector along axis `i`.
    pub fn basis(n: usize, i: usize) -> Self {
        let mut v = Self::zeros(n);
        v.0[i] = 1.0;
        v
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        dot(&self.0, other)
    }

    pub fn add(&self, other: &[f64]) -> Vector {
        assert_same_len("add", self.len(), other.len());
        Vector(self.0.iter().zip(other).map(|(a, b)| a + b).collect())
    }

    pub fn sub(&self, other: &[f64]) -> Vector {
        assert_same_len("sub", self.len(), other.len());
        Vector(self.0.iter().zip(other).map(|(a, b)| a - b).collect())
    }

    pub fn scale(&self, s: f64) -> Vector {
        Vector(self.0.iter().map(|a| a * s).collect())
    }

    /// `self += s * other`
    pub fn axpy(&mut self, s: f64, other: &[f64]) {
        assert_same_len("axpy", self.len(), other.len());
        for (a, b) in self.0.iter_mut().zip(other) {
            *a += s * b;
        }
    }
}

impl Deref for Vector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for Vector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for Vector {
    fn from(v: Vec<f64>) -> Self {
        Vector(v)
    }
}

impl From<&[f64]> for Vector {
    fn from(v: &[f64]) -> Self {
        Vector(v.to_vec())
    }
}

impl FromIterator<f64> for Vector {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        Vector(iter.into_iter().collect())
    }
}

/// A dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "matrix data has {} entries, expected {rows}x{cols}",
                data.len()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("matrix entries must be finite"));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from a slice of equally long rows.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::invalid("ragged rows"));
            }
            data.extend_from_slice(r);
        }
        Matrix::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| x * s).collect(),
        }
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    /// Product `self * other`.
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(
            self.cols, other.rows,
            "matmul: {}x{} times {}x{}",
            self.rows, self.cols, other.rows, other.cols
        );
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let orow = other.row(k);
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, b) in dst.iter_mut().zip(orow) {
                    *d += a * b;
                }
            }
        }
        out
    }

    /// Copy of the leading `n` columns.
    pub fn leading_cols(&self, n: usize) -> Matrix {
        assert!(n <= self.cols);
        let mut data = Vec::with_capacity(self.rows * n);
        for i in 0..self.rows {
            data.extend_from_slice(&self.row(i)[..n]);
        }
        Matrix {
            rows: self.rows,
            cols: n,
            data,
        }
    }

    /// `self += s * u vᵀ`
    pub fn add_outer(&mut self, s: f64, u: &[f64], v: &[f64]) {
        assert_eq!(u.len(), self.rows, "add_outer: row factor length");
        assert_eq!(v.len(), self.cols, "add_outer: column factor length");
        for (i, &ui) in u.iter().enumerate() {
            let c = s * ui;
            if c == 0.0 {
                continue;
            }
            let dst = &mut self.data[i * self.cols..(i + 1) * self.cols];
            for (d, &vj) in dst.iter_mut().zip(v) {
                *d += c * vj;
            }
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Largest singular value by power iteration on `AᵀA`.
    ///
    /// Starts from a fixed, non-symmetric direction so the estimate is
    /// deterministic and unlikely to begin orthogonal to the top singular
    /// vector of structured matrices.
    pub fn spectral_norm(&self, iterations: usize) -> f64 {
        if self.data.iter().all(|&x| x == 0.0) {
            return 0.0;
        }
        let mut v: Vector = (0..self.cols)
            .map(|i| 1.0 + 0.5 * ((i + 1) as f64).sin())
            .collect();
        v = v.scale(1.0 / l2_norm(&v));
        let mut sigma = 0.0;
        for _ in 0..iterations {
            let u = matvec(self, &v);
            let w = matvec_t(self, &u);
            let n = l2_norm(&w);
            if n == 0.0 {
                // start vector in the null space
                return self.frobenius_norm();
            }
            v = w.scale(1.0 / n);
            sigma = l2_norm(&matvec(self, &v));
        }
        sigma
    }
}

fn assert_same_len(op: &str, a: usize, b: usize) {
    assert_eq!(a, b, "{op}: length mismatch ({a} vs {b})");
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    assert_same_len("dot", a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `m · v`
///
/// # Panics
/// When `m.cols() != v.len()`.
pub fn matvec(m: &Matrix, v: &[f64]) -> Vector {
    assert_eq!(
        m.cols,
        v.len(),
        "matvec: {}x{} matrix times length-{} vector",
        m.rows,
        m.cols,
        v.len()
    );
    (0..m.rows).map(|i| dot(m.row(i), v)).collect()
}

/// `mᵀ · v`
pub fn matvec_t(m: &Matrix, v: &[f64]) -> Vector {
    assert_eq!(
        m.rows,
        v.len(),
        "matvec_t: ({}x{})ᵀ matrix times length-{} vector",
        m.rows,
        m.cols,
        v.len()
    );
    let mut out = Vector::zeros(m.cols);
    for (i, &vi) in v.iter().enumerate() {
        if vi == 0.0 {
            continue;
        }
        for (o, &a) in out.iter_mut().zip(m.row(i)) {
            *o += a * vi;
        }
    }
    out
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn l2_dist(u: &[f64], v: &[f64]) -> f64 {
    assert_same_len("l2_dist", u.len(), v.len());
    u.iter()
        .zip(v)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

/// Seeded, platform-independent random stream.
///
/// Backed by ChaCha8, whose output is defined bit-for-bit by the seed. Each
/// instance is single-owner; use [`Rng::derive`] to hand independent
/// streams to sub-tasks.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent stream keyed by `(seed, label)`; does not advance `self`.
    pub fn derive(&self, label: u64) -> Rng {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(label.wrapping_add(1));
        Rng {
            seed: self.seed,
            inner,
        }
    }

    pub fn next_f64(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn next_normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn next_index(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }
}

/// `n` i.i.d. draws from `N(mean, std²)`.
pub fn sample_gaussian(rng: &mut Rng, n: usize, mean: f64, std: f64) -> Result<Vector> {
    if !(std >= 0.0) || !mean.is_finite() || !std.is_finite() {
        return Err(Error::invalid(format!(
            "gaussian needs finite mean and std >= 0, got mean={mean} std={std}"
        )));
    }
    Ok((0..n).map(|_| mean + std * rng.next_normal()).collect())
}

/// One draw from `U[lo, hi)`; returns `lo` when `lo == hi`.
pub fn sample_uniform(rng: &mut Rng, lo: f64, hi: f64) -> Result<f64> {
    if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(Error::invalid(format!(
            "uniform needs finite lo <= hi, got [{lo}, {hi})"
        )));
    }
    let u = rng.next_f64();
    let x = lo + (hi - lo) * u;
    // lo + (hi-lo)*u can round up to hi for u close to 1
    Ok(if x >= hi && hi > lo { lo.max(prev_float(hi)) } else { x })
}

fn prev_float(x: f64) -> f64 {
    if x > 0.0 {
        f64::from_bits(x.to_bits() - 1)
    } else if x < 0.0 {
        f64::from_bits(x.to_bits() + 1)
    } else {
        -f64::from_bits(1)
    }
}

/// Kaiming-uniform weights with the fan-in bound `sqrt(6 / cols)`.
pub fn kaiming_uniform_init(rng: &mut Rng, rows: usize, cols: usize) -> Result<Matrix> {
    if rows == 0 || cols == 0 {
        return Err(Error::invalid("kaiming init needs rows, cols >= 1"));
    }
    let bound = (6.0 / cols as f64).sqrt();
    let data = (0..rows * cols)
        .map(|_| -bound + 2.0 * bound * rng.next_f64())
        .collect();
    Matrix::new(rows, cols, data)
}

/// Gaussian matrix with i.i.d. `N(0, std²)` entries.
pub fn gaussian_matrix(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Result<Matrix> {
    let v = sample_gaussian(rng, rows * cols, 0.0, std)?;
    Matrix::new(rows, cols, v.into_inner())
}

/// Random matrix with orthonormal rows (`rows <= cols`), by Gram–Schmidt on
/// Gaussian rows.
pub fn orthonormal_rows(rng: &mut Rng, rows: usize, cols: usize) -> Result<Matrix> {
    if rows == 0 || rows > cols {
        return Err(Error::invalid(format!(
            "orthonormal rows need 1 <= rows <= cols, got {rows}x{cols}"
        )));
    }
    let mut basis: Vec<Vector> = Vec::with_capacity(rows);
    while basis.len() < rows {
        let mut v = sample_gaussian(rng, cols, 0.0, 1.0)?;
        // two passes keep the basis orthogonal to rounding
        for _ in 0..2 {
            for b in &basis {
                let c = v.dot(b);
                v.axpy(-c, b);
            }
        }
        let n = l2_norm(&v);
        if n > 1e-8 {
            basis.push(v.scale(1.0 / n));
        }
    }
    let data = basis.into_iter().flat_map(Vector::into_inner).collect();
    Matrix::new(rows, cols, data)
}
