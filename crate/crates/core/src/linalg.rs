//! Dense real linear algebra used by every other module.
//!
//! Matrices are row-major `f64`. The only decomposition is a truncated SVD
//! built on one-sided (Hestenes) Jacobi rotations, which is exact enough for
//! the 1e-8 orthonormality targets and has no external dependency.

use std::fmt;
use std::ops::{Deref, DerefMut};

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};

/// Norms at or below this are treated as zero by [`unit_normalize`].
pub const TOL_ZERO: f64 = 1e-14;

/// Tolerance used when checking that an input is a unit vector.
pub const UNIT_TOL: f64 = 1e-9;

const JACOBI_MAX_SWEEPS: usize = 200;
const JACOBI_TOL: f64 = 1e-15;

/// Dense row-major matrix.
#[derive(Clone, PartialEq)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Mat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Mat {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows.min(8) {
            writeln!(f, "  {:?}", &self.row(i)[..self.cols.min(8)])?;
        }
        write!(f, "]")
    }
}

impl Mat {
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

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                op: "Mat::from_vec",
                detail: format!("{} entries for a {rows}x{cols} matrix", data.len()),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::ShapeMismatch { op: "Mat::from_rows", detail: "ragged rows".into() });
        }
        Ok(Self { rows: r, cols: c, data: rows.iter().flat_map(|row| row.iter().copied()).collect() })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Column matrix (d×1) from a vector.
    pub fn column(v: &Vector) -> Self {
        Self { rows: v.len(), cols: 1, data: v.to_vec() }
    }

    /// Row matrix (1×d) from a vector.
    pub fn row_matrix(v: &Vector) -> Self {
        Self { rows: 1, cols: v.len(), data: v.to_vec() }
    }

    /// `u vᵀ`.
    pub fn outer(u: &Vector, v: &Vector) -> Self {
        Self::from_fn(u.len(), v.len(), |i, j| u[i] * v[j])
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
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

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> Vector {
        Vector::from((0..self.rows).map(|i| self[(i, j)]).collect::<Vec<_>>())
    }

    pub fn set_col(&mut self, j: usize, v: &[f64]) {
        for (i, x) in v.iter().enumerate() {
            self[(i, j)] = *x;
        }
    }

    /// Flattens a single-row or single-column matrix into a vector.
    pub fn to_vector(&self) -> Result<Vector> {
        if self.rows != 1 && self.cols != 1 {
            return Err(Error::ShapeMismatch {
                op: "Mat::to_vector",
                detail: format!("{}x{} is not a row or column", self.rows, self.cols),
            });
        }
        Ok(Vector::from(self.data.clone()))
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn matmul(&self, rhs: &Mat) -> Result<Mat> {
        if self.cols != rhs.rows {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                detail: format!("{}x{} * {}x{}", self.rows, self.cols, rhs.rows, rhs.cols),
            });
        }
        let mut out = Mat::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let rhs_row = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
                for (o, b) in out_row.iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · rhs` without materializing the transpose.
    pub fn t_matmul(&self, rhs: &Mat) -> Result<Mat> {
        if self.rows != rhs.rows {
            return Err(Error::ShapeMismatch {
                op: "t_matmul",
                detail: format!("({}x{})ᵀ * {}x{}", self.rows, self.cols, rhs.rows, rhs.cols),
            });
        }
        let mut out = Mat::zeros(self.cols, rhs.cols);
        for k in 0..self.rows {
            let lhs_row = self.row(k);
            let rhs_row = rhs.row(k);
            for (i, a) in lhs_row.iter().enumerate() {
                if *a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
                for (o, b) in out_row.iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn mul_vec(&self, v: &Vector) -> Result<Vector> {
        if self.cols != v.len() {
            return Err(Error::ShapeMismatch {
                op: "mul_vec",
                detail: format!("{}x{} * vec({})", self.rows, self.cols, v.len()),
            });
        }
        Ok(Vector::from(
            (0..self.rows).map(|i| dot(self.row(i), v)).collect::<Vec<_>>(),
        ))
    }

    /// `vᵀ · self`, returned as a vector of length `cols`.
    pub fn vec_mul(&self, v: &Vector) -> Result<Vector> {
        if self.rows != v.len() {
            return Err(Error::ShapeMismatch {
                op: "vec_mul",
                detail: format!("vec({}) * {}x{}", v.len(), self.rows, self.cols),
            });
        }
        let mut out = vec![0.0; self.cols];
        for (i, vi) in v.iter().enumerate() {
            for (o, m) in out.iter_mut().zip(self.row(i)) {
                *o += vi * m;
            }
        }
        Ok(Vector::from(out))
    }

    fn check_same_shape(&self, rhs: &Mat, op: &'static str) -> Result<()> {
        if self.shape() != rhs.shape() {
            return Err(Error::ShapeMismatch {
                op,
                detail: format!("{}x{} vs {}x{}", self.rows, self.cols, rhs.rows, rhs.cols),
            });
        }
        Ok(())
    }

    pub fn add(&self, rhs: &Mat) -> Result<Mat> {
        self.check_same_shape(rhs, "add")?;
        let data = self.data.iter().zip(&rhs.data).map(|(a, b)| a + b).collect();
        Ok(Mat { rows: self.rows, cols: self.cols, data })
    }

    pub fn sub(&self, rhs: &Mat) -> Result<Mat> {
        self.check_same_shape(rhs, "sub")?;
        let data = self.data.iter().zip(&rhs.data).map(|(a, b)| a - b).collect();
        Ok(Mat { rows: self.rows, cols: self.cols, data })
    }

    /// `self += scale * rhs`.
    pub fn axpy(&mut self, scale: f64, rhs: &Mat) -> Result<()> {
        self.check_same_shape(rhs, "axpy")?;
        for (a, b) in self.data.iter_mut().zip(&rhs.data) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn scale(&self, s: f64) -> Mat {
        Mat { rows: self.rows, cols: self.cols, data: self.data.iter().map(|x| x * s).collect() }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat { rows: self.rows, cols: self.cols, data: self.data.iter().map(|x| f(*x)).collect() }
    }

    pub fn frob_norm(&self) -> f64 {
        frob_norm(self)
    }

    pub fn max_abs_diff(&self, rhs: &Mat) -> f64 {
        if self.shape() != rhs.shape() {
            return f64::INFINITY;
        }
        self.data.iter().zip(&rhs.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Horizontal concatenation `[m₁ m₂ …]`.
    pub fn hstack(parts: &[&Mat]) -> Result<Mat> {
        let first = parts.first().ok_or(Error::ShapeMismatch { op: "hstack", detail: "no parts".into() })?;
        let rows = first.rows;
        if parts.iter().any(|p| p.rows != rows) {
            return Err(Error::ShapeMismatch { op: "hstack", detail: "row counts differ".into() });
        }
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let mut out = Mat::zeros(rows, cols);
        for i in 0..rows {
            let mut off = 0;
            for p in parts {
                out.row_mut(i)[off..off + p.cols].copy_from_slice(p.row(i));
                off += p.cols;
            }
        }
        Ok(out)
    }

    /// Vertical concatenation `[m₁; m₂; …]`.
    pub fn vstack(parts: &[&Mat]) -> Result<Mat> {
        let first = parts.first().ok_or(Error::ShapeMismatch { op: "vstack", detail: "no parts".into() })?;
        let cols = first.cols;
        if parts.iter().any(|p| p.cols != cols) {
            return Err(Error::ShapeMismatch { op: "vstack", detail: "column counts differ".into() });
        }
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.data.len()).sum());
        for p in parts {
            data.extend_from_slice(&p.data);
        }
        Ok(Mat { rows: data.len() / cols.max(1), cols, data })
    }

    /// Entrywise arithmetic mean of equally shaped matrices, summed in slice order.
    pub fn mean(parts: &[&Mat]) -> Result<Mat> {
        let first = parts.first().ok_or(Error::ShapeMismatch { op: "mean", detail: "no parts".into() })?;
        let mut acc = Mat::zeros(first.rows, first.cols);
        for p in parts {
            acc.axpy(1.0, p)?;
        }
        Ok(acc.scale(1.0 / parts.len() as f64))
    }

    /// Selects the given rows (in order) into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Mat {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Mat { rows: idx.len(), cols: self.cols, data }
    }
}

impl std::ops::Index<(usize, usize)> for Mat {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Mat {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Dense real vector.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    /// Standard basis vector `e_i` in ℝᵈ.
    pub fn basis(dim: usize, i: usize) -> Self {
        let mut v = Self::zeros(dim);
        v.0[i] = 1.0;
        v
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn dot(&self, rhs: &Vector) -> f64 {
        dot(&self.0, &rhs.0)
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn scale(&self, s: f64) -> Vector {
        Vector(self.0.iter().map(|x| x * s).collect())
    }

    pub fn add(&self, rhs: &Vector) -> Vector {
        Vector(self.0.iter().zip(&rhs.0).map(|(a, b)| a + b).collect())
    }

    pub fn sub(&self, rhs: &Vector) -> Vector {
        Vector(self.0.iter().zip(&rhs.0).map(|(a, b)| a - b).collect())
    }

    /// `self + s * rhs`.
    pub fn add_scaled(&self, s: f64, rhs: &Vector) -> Vector {
        Vector(self.0.iter().zip(&rhs.0).map(|(a, b)| a + s * b).collect())
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// Arithmetic mean, summed in slice order.
    pub fn mean(parts: &[Vector]) -> Vector {
        let dim = parts.first().map_or(0, Vector::dim);
        let mut acc = vec![0.0; dim];
        for p in parts {
            for (a, x) in acc.iter_mut().zip(p.iter()) {
                *a += x;
            }
        }
        let n = parts.len() as f64;
        Vector(acc.into_iter().map(|x| x / n).collect())
    }
}

impl From<Vec<f64>> for Vector {
    fn from(v: Vec<f64>) -> Self {
        Self(v)
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

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Seeded, reproducible random stream.
///
/// Identical seeds give bit-identical streams. Independent workers derive
/// their own streams with [`SeededRng::derive`].
#[derive(Clone, Debug)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self { seed, inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Stream keyed by `(seed, ids…)`, e.g. `(run seed, client, round)`.
    pub fn derive(seed: u64, ids: &[u64]) -> Self {
        Self::new(mix_seed(seed, ids))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn gaussian(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.random::<u64>()
    }

    /// Gamma(shape, 1) sample.
    pub fn gamma(&mut self, shape: f64) -> f64 {
        // shape > 0 is checked by callers; Gamma::new only fails for non-positive input
        Gamma::new(shape, 1.0).map(|g| g.sample(&mut self.inner)).unwrap_or(0.0)
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn gaussian_vector(&mut self, dim: usize) -> Vector {
        Vector((0..dim).map(|_| self.gaussian()).collect())
    }

    /// Uniformly distributed unit vector on the sphere in ℝᵈ.
    pub fn unit_vector(&mut self, dim: usize) -> Vector {
        loop {
            let v = self.gaussian_vector(dim);
            if let Ok(u) = unit_normalize(&v) {
                return u;
            }
        }
    }
}

/// SplitMix64-style fold of a seed with a list of identifiers.
pub fn mix_seed(seed: u64, ids: &[u64]) -> u64 {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    ids.iter().fold(splitmix(seed), |h, id| splitmix(h ^ splitmix(*id)))
}

/// Matrix with i.i.d. N(0, 1) entries drawn row-major from `rng`.
pub fn gaussian_matrix(rng: &mut SeededRng, rows: usize, cols: usize) -> Result<Mat> {
    if rows == 0 || cols == 0 {
        return Err(Error::EmptyShape { rows, cols });
    }
    let data = (0..rows * cols).map(|_| rng.gaussian()).collect();
    Ok(Mat { rows, cols, data })
}

pub fn frob_norm(m: &Mat) -> f64 {
    m.data.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn unit_normalize(v: &Vector) -> Result<Vector> {
    let norm = v.norm();
    if norm <= TOL_ZERO || !norm.is_finite() {
        return Err(Error::ZeroVector { norm });
    }
    Ok(v.scale(1.0 / norm))
}

pub(crate) fn check_unit(v: &Vector) -> Result<()> {
    let norm = v.norm();
    if (norm - 1.0).abs() > UNIT_TOL {
        return Err(Error::NotUnit { norm });
    }
    Ok(())
}

/// `|sin θ(u, v)| = ‖(I − u uᵀ) v‖`.
///
/// Evaluated through the symmetric form `√(1 − (uᵀv)²)` when the angle is
/// large and through the projection when it is small, so the result is
/// symmetric to rounding and accurate near zero.
pub fn angle_distance(u: &Vector, v: &Vector) -> Result<f64> {
    check_unit(u)?;
    check_unit(v)?;
    if u.dim() != v.dim() {
        return Err(Error::ShapeMismatch {
            op: "angle_distance",
            detail: format!("{} vs {}", u.dim(), v.dim()),
        });
    }
    let c = u.dot(v);
    let cos_sq = c * c;
    if cos_sq < 0.5 {
        return Ok((1.0 - cos_sq).max(0.0).sqrt().min(1.0));
    }
    // small angle: average both projections so the value is symmetric
    let pu = v.add_scaled(-c, u).norm();
    let pv = u.add_scaled(-c, v).norm();
    Ok((0.5 * (pu + pv)).min(1.0))
}

/// `P = I − u uᵀ`.
pub fn projector_orth(u: &Vector) -> Result<Mat> {
    check_unit(u)?;
    let d = u.dim();
    Ok(Mat::from_fn(d, d, |i, j| if i == j { 1.0 } else { 0.0 } - u[i] * u[j]))
}

/// Rank-`r` singular triplets, singular values non-increasing.
#[derive(Clone, Debug)]
pub struct TruncatedSvd {
    /// rows×r, orthonormal columns.
    pub u: Mat,
    pub s: Vec<f64>,
    /// cols×r, orthonormal columns.
    pub v: Mat,
}

impl TruncatedSvd {
    /// `U · diag(S) · Vᵀ`.
    pub fn reconstruct(&self) -> Mat {
        let us = Mat::from_fn(self.u.rows, self.u.cols, |i, j| self.u[(i, j)] * self.s[j]);
        // shapes are consistent by construction
        us.matmul(&self.v.transpose()).expect("svd factor shapes")
    }
}

/// Best rank-`r` approximation in Frobenius norm.
///
/// Sign convention: the largest-magnitude entry of every left singular vector
/// is nonnegative (first such entry on ties).
pub fn truncated_svd(m: &Mat, r: usize) -> Result<TruncatedSvd> {
    let max = m.rows.min(m.cols);
    if r > max {
        return Err(Error::RankTooLarge { rank: r, max });
    }
    let (u, s, v) = if m.rows >= m.cols {
        jacobi_svd(m)
    } else {
        let (u, s, v) = jacobi_svd(&m.transpose());
        (v, s, u)
    };
    let mut u_out = Mat::zeros(m.rows, r);
    let mut v_out = Mat::zeros(m.cols, r);
    let mut s_out = Vec::with_capacity(r);
    for k in 0..r {
        let mut uk = u[k].clone();
        let mut vk = v[k].clone();
        let (imax, _) = uk
            .iter()
            .enumerate()
            .fold((0, -1.0), |(bi, bv), (i, x)| if x.abs() > bv { (i, x.abs()) } else { (bi, bv) });
        if uk[imax] < 0.0 {
            uk.iter_mut().for_each(|x| *x = -*x);
            vk.iter_mut().for_each(|x| *x = -*x);
        }
        u_out.set_col(k, &uk);
        v_out.set_col(k, &vk);
        s_out.push(s[k]);
    }
    Ok(TruncatedSvd { u: u_out, s: s_out, v: v_out })
}

/// Full thin SVD of a tall (rows ≥ cols) matrix via one-sided Jacobi.
/// Returns column lists (U columns, singular values, V columns) sorted by
/// decreasing singular value.
fn jacobi_svd(m: &Mat) -> (Vec<Vec<f64>>, Vec<f64>, Vec<Vec<f64>>) {
    let (rows, n) = m.shape();
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| m.col(j).into_inner()).collect();
    let mut v: Vec<Vec<f64>> = (0..n).map(|j| Vector::basis(n, j).into_inner()).collect();

    for _sweep in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                let gamma = dot(&cols[p], &cols[q]);
                if gamma == 0.0 || gamma.abs() <= JACOBI_TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    let norms: Vec<f64> = cols.iter().map(|c| dot(c, c).sqrt()).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));
    let smax = norms.iter().copied().fold(0.0, f64::max);

    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut s = Vec::with_capacity(n);
    let mut v_cols = Vec::with_capacity(n);
    let mut deficient = Vec::new();
    for &j in &order {
        let sigma = norms[j];
        if sigma > 1e-13 * smax && sigma > 0.0 {
            u_cols.push(cols[j].iter().map(|x| x / sigma).collect());
        } else {
            deficient.push(u_cols.len());
            u_cols.push(vec![0.0; rows]);
        }
        s.push(sigma);
        v_cols.push(v[j].clone());
    }
    // numerically null directions: complete U to an orthonormal set
    let mut basis_idx = 0;
    for k in deficient {
        loop {
            let mut cand = vec![0.0; rows];
            cand[basis_idx % rows] = 1.0;
            basis_idx += 1;
            for _ in 0..2 {
                for (j, uj) in u_cols.iter().enumerate() {
                    if j == k {
                        continue;
                    }
                    let proj = dot(&cand, uj);
                    cand.iter_mut().zip(uj).for_each(|(c, x)| *c -= proj * x);
                }
            }
            let norm = dot(&cand, &cand).sqrt();
            if norm > 1e-6 {
                u_cols[k] = cand.into_iter().map(|x| x / norm).collect();
                break;
            }
        }
    }
    (u_cols, s, v_cols)
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    let cp = &mut lo[p];
    let cq = &mut hi[0];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let xp = *x;
        let xq = *y;
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}
