//! Dense linear algebra, seeded random streams and measurement-noise models.
//!
//! [`Mat`] is a small row-major matrix type used for every matrix-valued
//! quantity in the crate (system matrices, weights, gains, activations on the
//! autodiff tape). Factorizations are delegated to `nalgebra`.

use std::fmt;
use std::ops::{Add, Index, IndexMut, Mul, Neg, Sub};

use nalgebra::DMatrix;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reciprocal condition number below which a system is treated as singular.
pub const RCOND_MIN: f64 = 1e-12;

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
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
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    /// Builds a matrix from row-major data.
    ///
    /// Panics if `data.len() != rows * cols`.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            rows * cols,
            "Mat::from_vec: {} entries for a {rows}x{cols} matrix",
            data.len()
        );
        Self { rows, cols, data }
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.as_ref().len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            let row = row.as_ref();
            assert_eq!(row.len(), c, "Mat::from_rows: ragged rows");
            data.extend_from_slice(row);
        }
        Self { rows: r, cols: c, data }
    }

    pub fn col_vector(v: &[f64]) -> Self {
        Self::from_vec(v.len(), 1, v.to_vec())
    }

    pub fn row_vector(v: &[f64]) -> Self {
        Self::from_vec(1, v.len(), v.to_vec())
    }

    pub fn diag(d: &[f64]) -> Self {
        let n = d.len();
        let mut m = Self::zeros(n, n);
        for (i, &x) in d.iter().enumerate() {
            m.data[i * n + i] = x;
        }
        m
    }

    pub fn scaled_identity(n: usize, s: f64) -> Self {
        Self::identity(n).scale(s)
    }

    /// Outer product `a bᵀ`.
    pub fn outer(a: &[f64], b: &[f64]) -> Self {
        let mut m = Self::zeros(a.len(), b.len());
        for (i, &ai) in a.iter().enumerate() {
            for (j, &bj) in b.iter().enumerate() {
                m.data[i * b.len() + j] = ai * bj;
            }
        }
        m
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
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

    pub fn col(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn transpose(&self) -> Mat {
        let mut t = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        t
    }

    pub fn matmul(&self, rhs: &Mat) -> Mat {
        assert_eq!(
            self.cols, rhs.rows,
            "matmul: {:?} x {:?}",
            self.shape(),
            rhs.shape()
        );
        let mut out = Mat::zeros(self.rows, rhs.cols);
        gemm(self.rows, self.cols, rhs.cols, &self.data, (self.cols, 1), &rhs.data, (rhs.cols, 1), &mut out.data);
        out
    }

    /// `selfᵀ · rhs` without materializing the transpose.
    pub fn t_matmul(&self, rhs: &Mat) -> Mat {
        assert_eq!(
            self.rows, rhs.rows,
            "t_matmul: {:?}ᵀ x {:?}",
            self.shape(),
            rhs.shape()
        );
        let mut out = Mat::zeros(self.cols, rhs.cols);
        gemm(self.cols, self.rows, rhs.cols, &self.data, (1, self.cols), &rhs.data, (rhs.cols, 1), &mut out.data);
        out
    }

    /// `self · rhsᵀ` without materializing the transpose.
    pub fn matmul_t(&self, rhs: &Mat) -> Mat {
        assert_eq!(
            self.cols, rhs.cols,
            "matmul_t: {:?} x {:?}ᵀ",
            self.shape(),
            rhs.shape()
        );
        let mut out = Mat::zeros(self.rows, rhs.rows);
        gemm(self.rows, self.cols, rhs.rows, &self.data, (self.cols, 1), &rhs.data, (1, rhs.cols), &mut out.data);
        out
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len(), "matvec: {:?} x {}", self.shape(), v.len());
        (0..self.rows)
            .map(|i| self.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn scale(&self, s: f64) -> Mat {
        self.map(|x| x * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    /// `self += s * other`
    pub fn add_scaled(&mut self, other: &Mat, s: f64) {
        assert_eq!(self.shape(), other.shape(), "add_scaled: shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    /// Accumulates `scale · a bᵀ` in place.
    pub fn add_outer(&mut self, a: &[f64], b: &[f64], scale: f64) {
        assert_eq!((self.rows, self.cols), (a.len(), b.len()), "add_outer: shape mismatch");
        for (i, &ai) in a.iter().enumerate() {
            let s = scale * ai;
            let row = &mut self.data[i * self.cols..(i + 1) * self.cols];
            for (r, &bj) in row.iter_mut().zip(b) {
                *r += s * bj;
            }
        }
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    /// Infinity norm (maximum absolute row sum).
    pub fn norm_inf(&self) -> f64 {
        (0..self.rows)
            .map(|i| self.row(i).iter().map(|x| x.abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    /// One norm (maximum absolute column sum).
    pub fn norm_one(&self) -> f64 {
        self.transpose().norm_inf()
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn powi(&self, k: u32) -> Mat {
        assert!(self.is_square(), "powi on non-square matrix");
        let mut out = Mat::identity(self.rows);
        for _ in 0..k {
            out = out.matmul(self);
        }
        out
    }

    pub fn symmetrize(&self) -> Mat {
        (self + &self.transpose()).scale(0.5)
    }

    pub(crate) fn to_nalgebra(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }

    pub(crate) fn from_nalgebra(m: &DMatrix<f64>) -> Mat {
        let mut out = Mat::zeros(m.nrows(), m.ncols());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                out.data[i * m.ncols() + j] = m[(i, j)];
            }
        }
        out
    }
}

impl fmt::Debug for Mat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Mat {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            writeln!(f, "  {:?}", self.row(i))?;
        }
        write!(f, "]")
    }
}

impl Index<(usize, usize)> for Mat {
    type Output = f64;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Mat {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

impl<'a> Mul<&'a Mat> for &'a Mat {
    type Output = Mat;
    fn mul(self, rhs: &'a Mat) -> Mat {
        self.matmul(rhs)
    }
}

impl<'a> Add<&'a Mat> for &'a Mat {
    type Output = Mat;
    fn add(self, rhs: &'a Mat) -> Mat {
        assert_eq!(self.shape(), rhs.shape(), "add: shape mismatch");
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(a, b)| a + b).collect(),
        }
    }
}

impl<'a> Sub<&'a Mat> for &'a Mat {
    type Output = Mat;
    fn sub(self, rhs: &'a Mat) -> Mat {
        assert_eq!(self.shape(), rhs.shape(), "sub: shape mismatch");
        Mat {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(a, b)| a - b).collect(),
        }
    }
}

impl Neg for &Mat {
    type Output = Mat;
    fn neg(self) -> Mat {
        self.scale(-1.0)
    }
}

/// `out = a · b` for an `m × k` by `k × n` product with row-major `out`;
/// `(row stride, col stride)` pairs let callers pass transposed views.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], sa: (usize, usize), b: &[f64], sb: (usize, usize), out: &mut [f64]) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    debug_assert!(a.len() > (m - 1) * sa.0 + (k - 1) * sa.1);
    debug_assert!(b.len() > (k - 1) * sb.0 + (n - 1) * sb.1);
    debug_assert_eq!(out.len(), m * n);
    // SAFETY: the strides address only elements inside `a`, `b` and `out`,
    // as checked above, and `out` does not alias the inputs.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Solves `A X = B` through an LU factorization with partial pivoting.
///
/// Fails when the reciprocal 1-norm condition number of `A` is below
/// [`RCOND_MIN`].
pub fn solve_linear(a: &Mat, b: &Mat) -> Result<Mat> {
    if !a.is_square() {
        return Err(Error::Shape {
            op: "solve_linear",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    if a.rows() != b.rows() {
        return Err(Error::Shape {
            op: "solve_linear",
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    let n = a.rows();
    let lu = a.to_nalgebra().lu();
    let inv = lu
        .solve(&DMatrix::identity(n, n))
        .ok_or(Error::Singular { rcond: 0.0, hint: "" })?;
    let inv = Mat::from_nalgebra(&inv);
    let rcond = reciprocal_condition(a.norm_one(), inv.norm_one());
    if !(rcond >= RCOND_MIN) {
        return Err(Error::Singular { rcond, hint: "" });
    }
    let x = lu
        .solve(&b.to_nalgebra())
        .ok_or(Error::Singular { rcond, hint: "" })?;
    Ok(Mat::from_nalgebra(&x))
}

/// Solves `X A = B`, i.e. `X = B A⁻¹`.
pub fn solve_right(b: &Mat, a: &Mat) -> Result<Mat> {
    Ok(solve_linear(&a.transpose(), &b.transpose())?.transpose())
}

fn reciprocal_condition(norm_a: f64, norm_inv: f64) -> f64 {
    if norm_a == 0.0 || !norm_inv.is_finite() {
        0.0
    } else {
        1.0 / (norm_a * norm_inv)
    }
}

/// Eigen-decomposition of the symmetric part of `m`: ascending eigenvalues
/// and the matching orthonormal eigenvectors as columns.
pub fn symmetric_eigen(m: &Mat) -> (Vec<f64>, Mat) {
    assert!(m.is_square(), "symmetric_eigen on non-square matrix");
    let eig = m.symmetrize().to_nalgebra().symmetric_eigen();
    let mut order: Vec<usize> = (0..m.rows()).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = Mat::zeros(m.rows(), m.rows());
    for (c, &i) in order.iter().enumerate() {
        for r in 0..m.rows() {
            vectors[(r, c)] = eig.eigenvectors[(r, i)];
        }
    }
    (values, vectors)
}

pub fn min_eigenvalue(m: &Mat) -> f64 {
    symmetric_eigen(m).0.first().copied().unwrap_or(0.0)
}

/// Checks positive semidefiniteness with a tolerance relative to the matrix scale.
pub fn check_psd(m: &Mat) -> Result<()> {
    if !m.is_square() || !m.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "expected a finite square matrix, got {:?}",
            m.shape()
        )));
    }
    let min_eig = min_eigenvalue(m);
    let tol = 1e-12 * m.max_abs().max(1.0);
    if min_eig < -tol {
        return Err(Error::NotPsd { min_eig });
    }
    Ok(())
}

/// Spectral radius from the eigenvalues of a general real matrix.
pub fn spectral_radius(m: &Mat) -> f64 {
    m.to_nalgebra()
        .complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max)
}

/// Largest singular value, by power iteration on `MᵀM`.
pub fn spectral_norm(m: &Mat) -> f64 {
    if m.rows() == 0 || m.cols() == 0 || m.max_abs() == 0.0 {
        return 0.0;
    }
    // Iterate on the smaller Gram matrix; both share the nonzero spectrum.
    let gram = if m.cols() <= m.rows() {
        m.t_matmul(m)
    } else {
        m.matmul_t(m)
    };
    let n = gram.rows();
    let mut rng = ChaCha8Rng::seed_from_u64(POWER_ITERATION_SEED);
    let mut v: Vec<f64> = (0..n).map(|_| rng.gen_range(0.5..1.5)).collect();
    normalize(&mut v);
    let mut lambda = 0.0;
    for _ in 0..100_000 {
        let w = gram.matvec(&v);
        let next: f64 = w.iter().zip(&v).map(|(a, b)| a * b).sum();
        let resid: f64 = w
            .iter()
            .zip(&v)
            .map(|(wi, vi)| (wi - next * vi).powi(2))
            .sum::<f64>()
            .sqrt();
        let converged = resid <= 1e-12 * next.abs() || (next - lambda).abs() <= 1e-15 * next.abs();
        lambda = next;
        if converged {
            break;
        }
        v = w;
        if normalize(&mut v) == 0.0 {
            break;
        }
    }
    lambda.max(0.0).sqrt()
}

const POWER_ITERATION_SEED: u64 = 0x9e37_79b9_7f4a_7c15;

fn normalize(v: &mut [f64]) -> f64 {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    norm
}

pub fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Seeded random stream. Identical seeds yield bit-identical sequences, and
/// [`RngStream::substream`] derives independent child streams by key.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Child stream keyed by `(seed, key)`; does not advance `self`.
    pub fn substream(&self, key: u64) -> RngStream {
        RngStream::new(splitmix64(self.seed ^ splitmix64(key.wrapping_add(0x632b_e59b_d9b4_e019))))
    }

    pub fn normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.rng.gen::<f64>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.rng.gen_range(0..n)
    }
}

impl RngCore for RngStream {
    fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }
    fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }
    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.rng.fill_bytes(dest)
    }
    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
        self.rng.try_fill_bytes(dest)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Serializable description of a [`NoiseModel`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum NoiseSpec {
    None { dim: usize },
    Gaussian { cov: Vec<Vec<f64>> },
    Uniform { bounds: Vec<f64> },
}

/// Additive measurement-noise distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "NoiseSpec", into = "NoiseSpec")]
pub enum NoiseModel {
    None { dim: usize },
    /// Zero-mean Gaussian; `factor` satisfies `factor · factorᵀ = cov`.
    Gaussian { cov: Mat, factor: Mat },
    /// Independent coordinates, each uniform on `[-b_i, b_i]`.
    Uniform { bounds: Vec<f64> },
}

impl NoiseModel {
    pub fn none(dim: usize) -> Self {
        NoiseModel::None { dim }
    }

    pub fn gaussian(cov: Mat) -> Result<Self> {
        check_psd(&cov)?;
        let (values, vectors) = symmetric_eigen(&cov);
        let n = cov.rows();
        let mut factor = vectors;
        for (c, &lam) in values.iter().enumerate() {
            let s = lam.max(0.0).sqrt();
            for r in 0..n {
                factor[(r, c)] *= s;
            }
        }
        Ok(NoiseModel::Gaussian {
            cov: cov.symmetrize(),
            factor,
        })
    }

    pub fn isotropic_gaussian(dim: usize, std: f64) -> Result<Self> {
        Self::gaussian(Mat::scaled_identity(dim, std * std))
    }

    pub fn uniform(bounds: Vec<f64>) -> Result<Self> {
        if bounds.iter().any(|b| !(b.is_finite() && *b >= 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "uniform noise bounds must be finite and nonnegative: {bounds:?}"
            )));
        }
        Ok(NoiseModel::Uniform { bounds })
    }

    pub fn dim(&self) -> usize {
        match self {
            NoiseModel::None { dim } => *dim,
            NoiseModel::Gaussian { cov, .. } => cov.rows(),
            NoiseModel::Uniform { bounds } => bounds.len(),
        }
    }

    pub fn is_none(&self) -> bool {
        matches!(self, NoiseModel::None { .. })
    }

    pub fn sample(&self, rng: &mut RngStream) -> Vec<f64> {
        match self {
            NoiseModel::None { dim } => vec![0.0; *dim],
            NoiseModel::Gaussian { factor, .. } => {
                let z: Vec<f64> = (0..factor.cols()).map(|_| rng.normal()).collect();
                factor.matvec(&z)
            }
            NoiseModel::Uniform { bounds } => bounds.iter().map(|&b| rng.uniform(-b, b)).collect(),
        }
    }

    /// Covariance of one draw.
    pub fn covariance(&self) -> Mat {
        match self {
            NoiseModel::None { dim } => Mat::zeros(*dim, *dim),
            NoiseModel::Gaussian { cov, .. } => cov.clone(),
            NoiseModel::Uniform { bounds } => {
                Mat::diag(&bounds.iter().map(|b| b * b / 3.0).collect::<Vec<_>>())
            }
        }
    }
}

impl TryFrom<NoiseSpec> for NoiseModel {
    type Error = Error;
    fn try_from(spec: NoiseSpec) -> Result<Self> {
        match spec {
            NoiseSpec::None { dim } => Ok(NoiseModel::none(dim)),
            NoiseSpec::Gaussian { cov } => {
                let n = cov.len();
                if cov.iter().any(|r| r.len() != n) {
                    return Err(Error::InvalidArgument("gaussian covariance must be square".into()));
                }
                NoiseModel::gaussian(Mat::from_rows(&cov))
            }
            NoiseSpec::Uniform { bounds } => NoiseModel::uniform(bounds),
        }
    }
}

impl From<NoiseModel> for NoiseSpec {
    fn from(m: NoiseModel) -> Self {
        match m {
            NoiseModel::None { dim } => NoiseSpec::None { dim },
            NoiseModel::Gaussian { cov, .. } => NoiseSpec::Gaussian {
                cov: (0..cov.rows()).map(|i| cov.row(i).to_vec()).collect(),
            },
            NoiseModel::Uniform { bounds } => NoiseSpec::Uniform { bounds },
        }
    }
}

/// Draws one noise vector, checking the requested dimension.
pub fn sample_noise(model: &NoiseModel, dim: usize, rng: &mut RngStream) -> Result<Vec<f64>> {
    if model.dim() != dim {
        return Err(Error::Dimension(format!(
            "noise model has dimension {}, requested {dim}",
            model.dim()
        )));
    }
    Ok(model.sample(rng))
}
