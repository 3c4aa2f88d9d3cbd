//! Small dense matrices, Cholesky factorization, the seeded generator, and
//! a central-difference gradient used as a verification oracle.

use std::ops::{Index, IndexMut};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major matrix. Sizes in this crate stay in the tens, so every
/// kernel is a plain loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMatrix", into = "RawMatrix")]
pub struct SmallMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<RawMatrix> for SmallMatrix {
    type Error = Error;

    fn try_from(raw: RawMatrix) -> Result<Self> {
        SmallMatrix::new(raw.rows, raw.cols, raw.data)
    }
}

impl From<SmallMatrix> for RawMatrix {
    fn from(m: SmallMatrix) -> Self {
        RawMatrix { rows: m.rows, cols: m.cols, data: m.data }
    }
}

impl SmallMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::Shape(format!(
                "{rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("entries must be finite".into()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = d;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Self::new(r, c, rows.concat())
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

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &SmallMatrix) -> Result<SmallMatrix> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                for j in 0..other.cols {
                    out[(i, j)] += a * other[(k, j)];
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::DimMismatch { expected: self.cols, got: x.len() });
        }
        Ok((0..self.rows)
            .map(|i| self.row(i).iter().zip(x).map(|(a, b)| a * b).sum())
            .collect())
    }

    /// xᵀ M x for square M.
    pub fn quadratic_form(&self, x: &[f64]) -> f64 {
        debug_assert!(self.is_square() && x.len() == self.rows);
        let mut acc = 0.0;
        for i in 0..self.rows {
            for j in 0..self.cols {
                acc += x[i] * self[(i, j)] * x[j];
            }
        }
        acc
    }

    pub fn add(&self, other: &SmallMatrix) -> Result<SmallMatrix> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::Shape("cannot add matrices of different shape".into()));
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Self { rows: self.rows, cols: self.cols, data })
    }

    pub fn max_abs_diff(&self, other: &SmallMatrix) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        self.is_square()
            && (0..self.rows).all(|i| (0..i).all(|j| (self[(i, j)] - self[(j, i)]).abs() <= tol))
    }
}

impl Index<(usize, usize)> for SmallMatrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for SmallMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

const SYMMETRY_TOL: f64 = 1e-10;

/// Lower-triangular factor L with L·Lᵀ = m.
pub fn cholesky_spd(m: &SmallMatrix) -> Result<SmallMatrix> {
    if !m.is_square() {
        return Err(Error::Shape(format!("Cholesky needs a square matrix, got {}x{}", m.rows, m.cols)));
    }
    if !m.is_symmetric(SYMMETRY_TOL) {
        return Err(Error::Shape("Cholesky needs a symmetric matrix".into()));
    }
    let n = m.rows;
    let mut l = SmallMatrix::zeros(n, n);
    for j in 0..n {
        let mut d = m[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d <= 0.0 || !d.is_finite() {
            return Err(Error::NotPositiveDefinite { pivot: j, value: d });
        }
        let d = d.sqrt();
        l[(j, j)] = d;
        for i in (j + 1)..n {
            let mut s = m[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / d;
        }
    }
    Ok(l)
}

/// Solves L·Lᵀ x = b given the Cholesky factor.
pub fn cholesky_solve(l: &SmallMatrix, b: &[f64]) -> Vec<f64> {
    let n = l.rows;
    debug_assert_eq!(b.len(), n);
    let mut y = b.to_vec();
    for i in 0..n {
        for k in 0..i {
            y[i] -= l[(i, k)] * y[k];
        }
        y[i] /= l[(i, i)];
    }
    for i in (0..n).rev() {
        for k in (i + 1)..n {
            y[i] -= l[(k, i)] * y[k];
        }
        y[i] /= l[(i, i)];
    }
    y
}

pub fn spd_inverse(m: &SmallMatrix) -> Result<SmallMatrix> {
    let l = cholesky_spd(m)?;
    let n = m.rows;
    let mut inv = SmallMatrix::zeros(n, n);
    let mut e = vec![0.0; n];
    for j in 0..n {
        e.iter_mut().for_each(|v| *v = 0.0);
        e[j] = 1.0;
        let col = cholesky_solve(&l, &e);
        for i in 0..n {
            inv[(i, j)] = col[i];
        }
    }
    // Symmetrize away round-off so downstream symmetry checks hold.
    for i in 0..n {
        for j in 0..i {
            let avg = 0.5 * (inv[(i, j)] + inv[(j, i)]);
            inv[(i, j)] = avg;
            inv[(j, i)] = avg;
        }
    }
    Ok(inv)
}

/// Central differences (f(x+h·eᵢ) − f(x−h·eᵢ)) / 2h for every coordinate.
pub fn finite_diff_gradient<F>(f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: Fn(&[f64]) -> f64,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = f(&probe);
        probe[i] = orig - h;
        let down = f(&probe);
        probe[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFiniteEvaluation { coordinate: i });
        }
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

/// Deterministic generator: ChaCha with 8 rounds, seeded through
/// `SeedableRng::seed_from_u64`. The stream is platform independent.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub const ALGORITHM: &'static str = "chacha8";

    pub fn new(seed: u64) -> Self {
        Self { seed, inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random()
    }

    /// Uniform on [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.inner.random()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }

    /// Independent child stream; used to give each subsystem its own draws.
    pub fn fork(&mut self) -> SeededRng {
        SeededRng::new(self.next_u64())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_spd(n: usize, rng: &mut SeededRng) -> SmallMatrix {
        let data = (0..n * n).map(|_| rng.standard_normal()).collect();
        let b = SmallMatrix::new(n, n, data).unwrap();
        b.transpose().matmul(&b).unwrap().add(&SmallMatrix::identity(n)).unwrap()
    }

    #[test]
    fn cholesky_of_identity_is_identity() {
        let l = cholesky_spd(&SmallMatrix::identity(3)).unwrap();
        assert_eq!(l, SmallMatrix::identity(3));
    }

    #[test]
    fn cholesky_of_diagonal_takes_square_roots() {
        let l = cholesky_spd(&SmallMatrix::from_diag(&[4.0, 9.0, 16.0])).unwrap();
        assert_eq!(l, SmallMatrix::from_diag(&[2.0, 3.0, 4.0]));
    }

    #[test]
    fn cholesky_reconstructs_random_spd() {
        let mut rng = SeededRng::new(11);
        for n in [1, 3, 7, 20] {
            let a = random_spd(n, &mut rng);
            let l = cholesky_spd(&a).unwrap();
            let back = l.matmul(&l.transpose()).unwrap();
            assert!(back.max_abs_diff(&a) < 1e-10, "n={n}");
            for i in 0..n {
                for j in (i + 1)..n {
                    assert_eq!(l[(i, j)], 0.0);
                }
            }
        }
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let m = SmallMatrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert!(matches!(cholesky_spd(&m), Err(Error::NotPositiveDefinite { pivot: 1, .. })));
        let z = SmallMatrix::zeros(2, 2);
        assert!(matches!(cholesky_spd(&z), Err(Error::NotPositiveDefinite { pivot: 0, .. })));
    }

    #[test]
    fn cholesky_rejects_asymmetric_and_nonsquare() {
        let m = SmallMatrix::from_rows(&[vec![2.0, 1.0], vec![0.0, 2.0]]).unwrap();
        assert!(matches!(cholesky_spd(&m), Err(Error::Shape(_))));
        assert!(matches!(cholesky_spd(&SmallMatrix::zeros(2, 3)), Err(Error::Shape(_))));
    }

    #[test]
    fn inverse_examples() {
        assert_eq!(spd_inverse(&SmallMatrix::identity(3)).unwrap(), SmallMatrix::identity(3));
        let inv = spd_inverse(&SmallMatrix::from_diag(&[2.0, 4.0, 8.0])).unwrap();
        assert!(inv.max_abs_diff(&SmallMatrix::from_diag(&[0.5, 0.25, 0.125])) < 1e-15);
    }

    #[test]
    fn inverse_multiplies_back_to_identity() {
        let mut rng = SeededRng::new(5);
        for n in [2, 3, 6] {
            let a = random_spd(n, &mut rng);
            let inv = spd_inverse(&a).unwrap();
            let prod = a.matmul(&inv).unwrap();
            assert!(prod.max_abs_diff(&SmallMatrix::identity(n)) < 1e-8);
            let back = spd_inverse(&inv).unwrap();
            assert!(back.max_abs_diff(&a) < 1e-7);
        }
    }

    #[test]
    fn shape_validation() {
        assert!(SmallMatrix::new(2, 2, vec![1.0; 3]).is_err());
        assert!(SmallMatrix::new(1, 1, vec![f64::NAN]).is_err());
        assert!(SmallMatrix::from_rows(&[vec![1.0], vec![1.0, 2.0]]).is_err());
        let a = SmallMatrix::zeros(2, 3);
        assert!(a.matmul(&a).is_err());
        assert!(a.matvec(&[1.0]).is_err());
    }

    #[test]
    fn quadratic_form_matches_explicit_product() {
        let mut rng = SeededRng::new(3);
        let a = random_spd(3, &mut rng);
        let x = [0.3, -1.2, 2.5];
        let ax = a.matvec(&x).unwrap();
        let direct: f64 = x.iter().zip(&ax).map(|(p, q)| p * q).sum();
        assert!((a.quadratic_form(&x) - direct).abs() < 1e-12);
    }

    #[test]
    fn finite_differences_of_square() {
        let g = finite_diff_gradient(|x| x[0] * x[0], &[3.0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn finite_differences_of_constant_vanish() {
        let g = finite_diff_gradient(|_| 4.2, &[1.0, -2.0, 3.0], 1e-4).unwrap();
        assert_eq!(g, vec![0.0; 3]);
    }

    #[test]
    fn finite_differences_report_non_finite() {
        let r = finite_diff_gradient(|x| if x[1] > 0.0 { f64::INFINITY } else { 0.0 }, &[0.0, 0.0], 1e-3);
        assert!(matches!(r, Err(Error::NonFiniteEvaluation { coordinate: 1 })));
    }

    #[test]
    fn rng_is_reproducible() {
        let mut a = SeededRng::new(42);
        let mut b = SeededRng::new(42);
        for _ in 0..1_000_000 {
            assert_eq!(a.next_u64(), b.next_u64());
        }
        let mut c = SeededRng::new(43);
        let mut a = SeededRng::new(42);
        assert_ne!(a.next_u64(), c.next_u64());
    }

    #[test]
    fn rng_draws_are_in_range() {
        let mut rng = SeededRng::new(1);
        for _ in 0..10_000 {
            let u = rng.uniform();
            assert!((0.0..1.0).contains(&u));
            let v = rng.uniform_range(-2.0, 3.0);
            assert!((-2.0..3.0).contains(&v));
        }
    }
}
