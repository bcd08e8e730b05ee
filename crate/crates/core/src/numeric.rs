//! Dense matrices, seeded sampling and the similarity / softmax primitives the
//! rest of the crate is built on.
//!
//! Everything is `f64` and row-major. Randomness comes from [`Rng`], a thin
//! wrapper over ChaCha8 keyed by a 64-bit seed and a 64-bit stream id, which
//! makes draws reproducible bit-for-bit across runs and platforms.

use std::fmt;
use std::ops::{Index, IndexMut};

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-major dense matrix of finite reals.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dims(
                "Matrix::new",
                format!("{} values", rows * cols),
                format!("{} values", data.len()),
            ));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("Matrix::new"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
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

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(Error::dims("Matrix::from_rows", cols, bad.len()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics, so an empty-column matrix yields nothing.
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    /// New matrix made of the given rows, in order.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    /// `self · otherᵀ`, i.e. all pairwise row dot products.
    pub fn matmul_t(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::dims("matmul_t", self.cols, other.cols));
        }
        Ok(Self::from_fn(self.rows, other.rows, |i, j| {
            dot(self.row(i), other.row(j))
        }))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.row_iter().map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for r in self.row_iter() {
            for (o, x) in out.iter_mut().zip(r) {
                *o += x;
            }
        }
        out
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|x| *x *= s);
    }

    /// `self += s · other`.
    pub fn add_scaled(&mut self, other: &Matrix, s: f64) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Matrix whose rows all have unit Euclidean norm.
///
/// Cosine similarity between rows of two feature matrices is a plain dot
/// product, which is what the losses rely on.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix(Matrix);

impl FeatureMatrix {
    /// Normalizes every row. A row with zero norm is an error, never clamped.
    pub fn normalize(mut m: Matrix) -> Result<Self> {
        for i in 0..m.rows() {
            let row = m.row_mut(i);
            let n = norm(row);
            if n == 0.0 || !n.is_finite() {
                return Err(Error::ZeroNorm { row: i });
            }
            row.iter_mut().for_each(|x| *x /= n);
        }
        Ok(Self(m))
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    pub fn rows(&self) -> usize {
        self.0.rows()
    }

    pub fn dim(&self) -> usize {
        self.0.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.0.row(i)
    }

    /// `s(self_i, other_j)` for all pairs.
    pub fn similarities(&self, other: &FeatureMatrix) -> Result<Matrix> {
        self.0.matmul_t(&other.0)
    }

    /// `s(self_i, other_i)` for every row.
    pub fn diagonal_similarities(&self, other: &FeatureMatrix) -> Result<Vec<f64>> {
        if self.0.shape() != other.0.shape() {
            return Err(Error::dims(
                "diagonal_similarities",
                format!("{:?}", self.0.shape()),
                format!("{:?}", other.0.shape()),
            ));
        }
        Ok((0..self.rows()).map(|i| dot(self.row(i), other.row(i))).collect())
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        Self(self.0.select_rows(idx))
    }
}

/// `out[i][j] = cos(a_i, b_j)`, computed from raw (not necessarily unit) rows.
pub fn cosine_sim_matrix(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.cols() {
        return Err(Error::dims("cosine_sim_matrix", a.cols(), b.cols()));
    }
    let na = row_norms(a)?;
    let nb = row_norms(b)?;
    Ok(Matrix::from_fn(a.rows(), b.rows(), |i, j| {
        (dot(a.row(i), b.row(j)) / (na[i] * nb[j])).clamp(-1.0, 1.0)
    }))
}

fn row_norms(m: &Matrix) -> Result<Vec<f64>> {
    m.row_iter()
        .enumerate()
        .map(|(i, r)| {
            let n = norm(r);
            if n == 0.0 {
                Err(Error::ZeroNorm { row: i })
            } else {
                Ok(n)
            }
        })
        .collect()
}

/// Softmax of `m / tau` along each row, stabilized by the row maximum.
pub fn row_softmax(m: &Matrix, tau: f64) -> Result<Matrix> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidArgument(format!("tau must be positive, got {tau}")));
    }
    if !m.is_finite() {
        return Err(Error::NonFinite("row_softmax input"));
    }
    let mut out = m.clone();
    for i in 0..out.rows() {
        softmax_in_place(out.row_mut(i), tau);
    }
    Ok(out)
}

/// In-place softmax of `row / tau`.
pub(crate) fn softmax_in_place(row: &mut [f64], tau: f64) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = ((*x - max) / tau).exp();
        total += *x;
    }
    row.iter_mut().for_each(|x| *x /= total);
}

/// Base distributions for synthetic draws.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distribution {
    /// Standard normal.
    Gaussian,
    /// Uniform on `[-1, 1]`.
    Uniform,
    /// Laplace with location 0 and scale 1.
    Laplace,
}

/// Seeded generator: ChaCha8 keyed by `(seed, stream)`.
///
/// ChaCha8 is counter based with fixed constants, so a given `(seed, stream)`
/// pair produces the same sequence everywhere. An `Rng` is single-owner.
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    /// Independent sequence derived from the same seed.
    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform on `[0, 1)`.
    pub fn next_f64(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn gaussian(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    /// Inverse-CDF Laplace(0, 1) draw.
    pub fn laplace(&mut self) -> f64 {
        let u = self.next_f64() - 0.5;
        // u = -0.5 would give ln(0); it has probability 2^-53, nudge it.
        let a = (1.0 - 2.0 * u.abs()).max(f64::MIN_POSITIVE);
        -u.signum() * a.ln()
    }

    pub fn draw(&mut self, dist: Distribution) -> f64 {
        match dist {
            Distribution::Gaussian => self.gaussian(),
            Distribution::Uniform => 2.0 * self.next_f64() - 1.0,
            Distribution::Laplace => self.laplace(),
        }
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.below(i + 1);
            xs.swap(i, j);
        }
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        self.shuffle(&mut idx);
        idx
    }
}

/// `rows × cols` i.i.d. draws from `dist`.
pub fn sample_matrix(rng: &mut Rng, rows: usize, cols: usize, dist: Distribution) -> Result<Matrix> {
    if rows == 0 || cols == 0 {
        return Err(Error::InvalidArgument(format!(
            "sample_matrix needs a nonempty shape, got {rows}x{cols}"
        )));
    }
    Ok(Matrix::from_fn(rows, cols, |_, _| rng.draw(dist)))
}

#[cfg(test)]
mod tests {
    use super::Rng;
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn self_similarity_has_unit_diagonal() {
        let a = Matrix::identity(4);
        let s = cosine_sim_matrix(&a, &a).unwrap();
        for i in 0..4 {
            assert_eq!(s[(i, i)], 1.0);
        }
    }

    #[test]
    fn antipodal_rows_give_minus_one() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0, -3.0]]).unwrap();
        let b = Matrix::from_rows(&[vec![-1.0, -2.0, 3.0]]).unwrap();
        assert_abs_diff_eq!(cosine_sim_matrix(&a, &b).unwrap()[(0, 0)], -1.0, epsilon = 1e-15);
    }

    #[test]
    fn cosine_matches_scalar_loops() {
        let mut rng = Rng::new(11);
        let a = sample_matrix(&mut rng, 3, 4, Distribution::Gaussian).unwrap();
        let b = sample_matrix(&mut rng, 5, 4, Distribution::Gaussian).unwrap();
        let s = cosine_sim_matrix(&a, &b).unwrap();
        for i in 0..3 {
            for j in 0..5 {
                let mut num = 0.0;
                let mut na = 0.0;
                let mut nb = 0.0;
                for k in 0..4 {
                    num += a[(i, k)] * b[(j, k)];
                    na += a[(i, k)] * a[(i, k)];
                    nb += b[(j, k)] * b[(j, k)];
                }
                assert_abs_diff_eq!(s[(i, j)], num / (na.sqrt() * nb.sqrt()), epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn cosine_rejects_bad_inputs() {
        let a = Matrix::zeros(2, 3);
        let b = Matrix::identity(3);
        assert!(matches!(cosine_sim_matrix(&a, &b), Err(Error::ZeroNorm { row: 0 })));
        let c = Matrix::identity(2);
        assert!(matches!(
            cosine_sim_matrix(&c, &b),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn softmax_constant_row_is_uniform() {
        let m = Matrix::from_rows(&[vec![3.3; 5]]).unwrap();
        let p = row_softmax(&m, 0.07).unwrap();
        for &x in p.row(0) {
            assert_abs_diff_eq!(x, 0.2, epsilon = 1e-15);
        }
    }

    #[test]
    fn softmax_saturates() {
        let m = Matrix::from_rows(&[vec![50.0, -50.0]]).unwrap();
        let p = row_softmax(&m, 0.07).unwrap();
        assert_eq!(p[(0, 0)], 1.0);
        assert!(p[(0, 1)] < 1e-300);
    }

    #[test]
    fn softmax_matches_direct_evaluation() {
        let row = [0.2f64, -0.1, 0.4];
        let tau = 0.07;
        let z: f64 = row.iter().map(|x| (x / tau).exp()).sum();
        let p = row_softmax(&Matrix::from_rows(&[row.to_vec()]).unwrap(), tau).unwrap();
        for (j, x) in row.iter().enumerate() {
            assert_abs_diff_eq!(p[(0, j)], (x / tau).exp() / z, epsilon = 1e-12);
        }
    }

    #[test]
    fn softmax_rejects_bad_tau() {
        let m = Matrix::zeros(1, 2);
        assert!(row_softmax(&m, 0.0).is_err());
        assert!(row_softmax(&m, -1.0).is_err());
    }

    #[test]
    fn matrix_rejects_non_finite() {
        assert!(matches!(
            Matrix::new(1, 2, vec![1.0, f64::NAN]),
            Err(Error::NonFinite(_))
        ));
        assert!(Matrix::new(2, 2, vec![1.0]).is_err());
    }

    #[test]
    fn sampling_is_deterministic() {
        for dist in [Distribution::Gaussian, Distribution::Uniform, Distribution::Laplace] {
            let a = sample_matrix(&mut Rng::new(7), 6, 5, dist).unwrap();
            let b = sample_matrix(&mut Rng::new(7), 6, 5, dist).unwrap();
            assert_eq!(a.data(), b.data());
        }
        let a = sample_matrix(&mut Rng::with_stream(7, 1), 2, 2, Distribution::Gaussian).unwrap();
        let b = sample_matrix(&mut Rng::with_stream(7, 2), 2, 2, Distribution::Gaussian).unwrap();
        assert_ne!(a.data(), b.data());
    }

    #[test]
    fn gaussian_moments() {
        let m = sample_matrix(&mut Rng::new(5), 1000, 100, Distribution::Gaussian).unwrap();
        let n = m.data().len() as f64;
        let mean = m.sum() / n;
        let var = m.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        assert!(mean.abs() < 0.02, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn laplace_moments() {
        // Laplace(0, 1): mean 0, variance 2, E|x| = 1.
        let m = sample_matrix(&mut Rng::new(9), 1000, 100, Distribution::Laplace).unwrap();
        let n = m.data().len() as f64;
        let mean = m.sum() / n;
        let abs_mean = m.data().iter().map(|x| x.abs()).sum::<f64>() / n;
        assert!(mean.abs() < 0.03);
        assert!((abs_mean - 1.0).abs() < 0.02);
    }

    #[test]
    fn sample_rejects_empty_shape() {
        assert!(sample_matrix(&mut Rng::new(1), 0, 3, Distribution::Uniform).is_err());
    }

    proptest! {
        #[test]
        fn uniform_stays_in_support(seed in any::<u64>()) {
            let m = sample_matrix(&mut Rng::new(seed), 20, 20, Distribution::Uniform).unwrap();
            prop_assert!(m.data().iter().all(|x| (-1.0..=1.0).contains(x)));
        }

        #[test]
        fn softmax_rows_sum_to_one(
            vals in proptest::collection::vec(-1e3f64..1e3, 1..40),
            tau in 1e-3f64..10.0,
        ) {
            let m = Matrix::new(1, vals.len(), vals).unwrap();
            let p = row_softmax(&m, tau).unwrap();
            prop_assert!((p.row_sums()[0] - 1.0).abs() < 1e-12);
            prop_assert!(p.data().iter().all(|&x| x >= 0.0));
        }

        #[test]
        fn unit_rows_have_unit_self_similarity(seed in any::<u64>()) {
            let raw = sample_matrix(&mut Rng::new(seed), 6, 5, Distribution::Gaussian).unwrap();
            let f = FeatureMatrix::normalize(raw).unwrap();
            let s = cosine_sim_matrix(f.as_matrix(), f.as_matrix()).unwrap();
            for i in 0..6 {
                prop_assert!((s[(i, i)] - 1.0).abs() < 1e-12);
            }
        }
    }
}
