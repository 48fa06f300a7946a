//! Dense symmetric linear algebra and reproducible random streams.
//!
//! Kernel matrices in this crate are small (a few hundred rows at most), so
//! everything goes through a cyclic Jacobi eigensolver. Matrix functions
//! (exponentials, pseudo-inverses) are applied through the eigenbasis.

use ndarray::{Array1, Array2, ArrayView1};
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Absolute symmetry tolerance, scaled by `max(1, max|a_ij|)`.
pub const SYMMETRY_TOL: f64 = 1e-12;

/// Relative cutoff under which eigenvalues are treated as zero by pseudo-inverses.
pub const PINV_CUTOFF: f64 = 1e-10;

/// A dense real symmetric matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SymMatrix {
    data: Array2<f64>,
}

impl SymMatrix {
    /// Validates symmetry and stores the exactly symmetrised matrix.
    pub fn new(a: Array2<f64>) -> Result<Self> {
        let (r, c) = a.dim();
        if r != c {
            return Err(Error::DimensionMismatch {
                context: "SymMatrix::new",
                expected: r,
                found: c,
            });
        }
        if r == 0 {
            return Err(Error::InvalidInput("SymMatrix must have dim >= 1".into()));
        }
        let scale = a.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        let mut worst = 0.0f64;
        for i in 0..r {
            for j in (i + 1)..r {
                worst = worst.max((a[[i, j]] - a[[j, i]]).abs());
            }
        }
        if worst > SYMMETRY_TOL * scale {
            return Err(Error::NotSymmetric { max_asymmetry: worst });
        }
        let sym = (&a + &a.t()) * 0.5;
        Ok(Self { data: sym })
    }

    /// Builds a matrix from the upper triangle of `f(i, j)`.
    pub fn from_fn(dim: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Array2::zeros((dim, dim));
        for i in 0..dim {
            for j in i..dim {
                let v = f(i, j);
                data[[i, j]] = v;
                data[[j, i]] = v;
            }
        }
        Self { data }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            data: Array2::eye(dim),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            data: Array2::zeros((dim, dim)),
        }
    }

    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.data
    }

    pub fn into_array(self) -> Array2<f64> {
        self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[[i, j]]
    }

    pub fn trace(&self) -> f64 {
        self.data.diag().sum()
    }

    pub fn frobenius(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `self + shift * I`.
    pub fn shifted(&self, shift: f64) -> Self {
        let mut data = self.data.clone();
        data.diag_mut().mapv_inplace(|v| v + shift);
        Self { data }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            data: &self.data * factor,
        }
    }

    pub fn matvec(&self, v: ArrayView1<f64>) -> Result<Array1<f64>> {
        check_len("SymMatrix::matvec", self.dim(), v.len())?;
        Ok(self.data.dot(&v))
    }
}

pub(crate) fn check_len(context: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::DimensionMismatch {
            context,
            expected,
            found,
        });
    }
    Ok(())
}

/// Eigenpairs of a symmetric matrix, eigenvalues sorted in descending order.
/// Column `i` of `vectors` is the unit eigenvector for `values[i]`.
#[derive(Clone, Debug)]
pub struct EigDecomposition {
    pub values: Array1<f64>,
    pub vectors: Array2<f64>,
}

impl EigDecomposition {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.values[0]
    }

    pub fn min_eigenvalue(&self) -> f64 {
        self.values[self.values.len() - 1]
    }

    /// `V diag(values) V^T`.
    pub fn reconstruct(&self) -> Array2<f64> {
        let scaled = &self.vectors * &self.values.view().insert_axis(ndarray::Axis(0));
        scaled.dot(&self.vectors.t())
    }

    /// Coordinates of `v` in the eigenbasis, `V^T v`.
    pub fn project(&self, v: ArrayView1<f64>) -> Array1<f64> {
        self.vectors.t().dot(&v)
    }

    /// `V diag(f(lambda_i)) V^T v`.
    pub fn apply_fn(&self, v: ArrayView1<f64>, f: impl Fn(f64) -> f64) -> Result<Array1<f64>> {
        check_len("EigDecomposition::apply_fn", self.dim(), v.len())?;
        let mut coords = self.project(v);
        for (c, &lam) in coords.iter_mut().zip(self.values.iter()) {
            *c *= f(lam);
        }
        Ok(self.vectors.dot(&coords))
    }

    /// Threshold below which an eigenvalue counts as zero.
    pub fn null_threshold(&self) -> f64 {
        PINV_CUTOFF * self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    pub fn condition_number(&self) -> f64 {
        let max = self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let min = self.values.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()));
        max / min
    }

    /// True when some eigenvalue falls under the pseudo-inverse cutoff.
    pub fn is_singular(&self) -> bool {
        let thr = self.null_threshold();
        self.values.iter().any(|v| v.abs() <= thr)
    }

    /// Moore-Penrose pseudo-inverse applied to `v`. Logs a warning when the
    /// matrix is numerically singular.
    pub fn pinv_apply(&self, v: ArrayView1<f64>) -> Result<Array1<f64>> {
        let thr = self.null_threshold();
        if self.is_singular() {
            log::warn!(
                "pseudo-inverse of singular kernel (condition number {:.3e})",
                self.condition_number()
            );
        }
        self.apply_fn(v, |lam| if lam.abs() > thr { 1.0 / lam } else { 0.0 })
    }
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
pub fn sym_eig(a: &SymMatrix) -> EigDecomposition {
    let n = a.dim();
    let mut m: Vec<f64> = a.as_array().iter().copied().collect();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }

    let scale = m.iter().map(|x| x * x).sum::<f64>().sqrt();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| ((i + 1)..n).map(move |j| (i, j)))
            .map(|(i, j)| m[i * n + j] * m[i * n + j])
            .sum::<f64>()
            .sqrt();
        if off <= f64::EPSILON * 1e-3 * scale || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                // Skip rotations that cannot change either diagonal entry.
                if apq.abs() < 1e-300
                    || (app.abs() + 1e18 * apq.abs() == app.abs()
                        && aqq.abs() + 1e18 * apq.abs() == aqq.abs())
                {
                    m[p * n + q] = 0.0;
                    m[q * n + p] = 0.0;
                    continue;
                }
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                m[p * n + q] = 0.0;
                m[q * n + p] = 0.0;
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[j * n + j].total_cmp(&m[i * n + i]));
    let values = Array1::from_iter(order.iter().map(|&i| m[i * n + i]));
    let mut vectors = Array2::zeros((n, n));
    for (col, &src) in order.iter().enumerate() {
        for row in 0..n {
            vectors[[row, col]] = v[row * n + src];
        }
    }
    EigDecomposition { values, vectors }
}

/// Floor on the smallest eigenvalue of a matrix treated as positive semidefinite.
pub const PSD_FLOOR: f64 = -1e-10;

/// `exp(-A t) v` for symmetric positive semidefinite `A`, through the eigenbasis.
pub fn expm_action(a: &SymMatrix, t: f64, v: ArrayView1<f64>) -> Result<Array1<f64>> {
    check_len("expm_action", a.dim(), v.len())?;
    if t < 0.0 {
        return Err(Error::InvalidInput(format!("negative time {t}")));
    }
    if t == 0.0 {
        return Ok(v.to_owned());
    }
    let eig = sym_eig(a);
    check_psd(&eig)?;
    eig.apply_fn(v, |lam| (-lam * t).exp())
}

pub(crate) fn check_psd(eig: &EigDecomposition) -> Result<()> {
    let floor = PSD_FLOOR * eig.max_eigenvalue().abs().max(1.0);
    if eig.min_eigenvalue() < floor {
        return Err(Error::NotPsd {
            min_eigenvalue: eig.min_eigenvalue(),
        });
    }
    Ok(())
}

/// A reproducible random stream identified by `(seed, stream)`.
///
/// Backed by ChaCha8, whose stream parameter gives independent sequences for
/// the same seed. Parallel consumers take distinct stream ids.
#[derive(Clone, Debug)]
pub struct SeededRng {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self {
            seed,
            stream,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// A fresh generator on another stream of the same seed.
    pub fn fork(&self, stream: u64) -> Self {
        Self::new(self.seed, stream)
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// `n` i.i.d. standard normal draws.
pub fn gauss_sample(rng: &mut SeededRng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.normal()).collect()
}
