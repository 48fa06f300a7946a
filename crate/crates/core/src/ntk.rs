//! Neural tangent kernels: empirical (finite width) and infinite-width limit.
//!
//! The empirical kernel never materialises the `N x d` Jacobian. For layer `l`
//! the gradient block of sample `i` is `s_w delta_i (x) z_i`, so its
//! contribution to the Gram matrix is `s_w^2 (Delta Delta^T) o (Z Z^T)`
//! (Hadamard product) plus `s_b^2 Delta Delta^T` for the bias.

use std::io::Write;

use ndarray::{Array1, Array2, ArrayView2};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::network::{self, Activation, Architecture, NetworkParams, Scaling};
use crate::numerics::{sym_eig, SeededRng, SymMatrix};

/// Limit kernels at the read-out layer.
#[derive(Clone, Debug)]
pub struct KernelPair {
    /// Pre-activation covariance `Sigma^L(x, x') = sigma_w^2 k^L + sigma_b^2`.
    pub k: SymMatrix,
    /// Tangent kernel `Theta^L`.
    pub theta: SymMatrix,
    /// Number of weight layers the recursion ran through.
    pub layer: usize,
}

/// `Theta[i][j] = grad yhat(x_i) . grad yhat(x_j)`.
pub fn empirical_ntk(
    params: &NetworkParams,
    arch: &Architecture,
    x: ArrayView2<f64>,
) -> Result<SymMatrix> {
    let cache = network::forward_cache(params, arch, x)?;
    let n = x.nrows();
    let deltas = network::backward_deltas(params, arch, &cache, Array1::ones(n).view());
    let mut gram = Array2::<f64>::zeros((n, n));
    for (l, delta) in deltas.iter().enumerate() {
        let (ws, bs) = arch.layer_scales(l);
        let dd = delta.dot(&delta.t());
        let zz = cache.inputs[l].dot(&cache.inputs[l].t());
        gram.zip_mut_with(&(&dd * &zz * (ws * ws) + &dd * (bs * bs)), |g, v| *g += v);
    }
    Ok(SymMatrix::from_fn(n, |i, j| 0.5 * (gram[[i, j]] + gram[[j, i]])))
}

/// `E[relu(u) relu(v)]` and `E[1{u>0} 1{v>0}]` for centred Gaussians with
/// variances `s11`, `s22` and covariance `s12`.
pub fn relu_expectations(s11: f64, s22: f64, s12: f64) -> (f64, f64) {
    let norm = (s11 * s22).sqrt();
    if norm <= 0.0 {
        return (0.0, 0.0);
    }
    let rho = (s12 / norm).clamp(-1.0, 1.0);
    let gamma = rho.acos();
    let pi = std::f64::consts::PI;
    let k = norm / (2.0 * pi) * (gamma.sin() + (pi - gamma) * gamma.cos());
    let kdot = (pi - gamma) / (2.0 * pi);
    (k, kdot)
}

/// Infinite-width kernels of an NTK-parametrised network, through the layer
/// recursion
///
/// ```text
/// Sigma^1 = sigma_w^2 x.x' / n_0 + sigma_b^2,         Theta^1 = Sigma^1
/// Sigma^l = sigma_w^2 E[h(u) h(v)] + sigma_b^2,       (u, v) ~ N(0, Sigma^{l-1})
/// Theta^l = sigma_w^2 Theta^{l-1} E[h'(u) h'(v)] + Sigma^l
/// ```
///
/// Closed forms exist for ReLU (arc-cosine kernels) and the identity; other
/// activations must go through [`mc_limit_ntk`].
pub fn analytic_ntk(arch: &Architecture, x: ArrayView2<f64>) -> Result<KernelPair> {
    if x.ncols() != arch.input_dim() {
        return Err(Error::DimensionMismatch {
            context: "analytic_ntk",
            expected: arch.input_dim(),
            found: x.ncols(),
        });
    }
    let expect: fn(f64, f64, f64) -> (f64, f64) = match arch.activation {
        Activation::Relu => relu_expectations,
        Activation::Identity => |_, _, s12| (s12, 1.0),
        other => return Err(Error::NoClosedForm(other.name().into())),
    };
    let n = x.nrows();
    let (sw2, sb2) = (arch.sigma_w * arch.sigma_w, arch.sigma_b * arch.sigma_b);
    let n0 = arch.input_dim() as f64;
    let mut cov = x.dot(&x.t()) * (sw2 / n0) + sb2;
    let mut theta = cov.clone();
    for _ in 1..arch.depth() {
        let mut next_cov = Array2::zeros((n, n));
        let mut next_theta = Array2::zeros((n, n));
        for i in 0..n {
            for j in i..n {
                let (k, kdot) = expect(cov[[i, i]], cov[[j, j]], cov[[i, j]]);
                let c = sw2 * k + sb2;
                let t = sw2 * theta[[i, j]] * kdot + c;
                next_cov[[i, j]] = c;
                next_cov[[j, i]] = c;
                next_theta[[i, j]] = t;
                next_theta[[j, i]] = t;
            }
        }
        cov = next_cov;
        theta = next_theta;
    }
    Ok(KernelPair {
        k: clip_psd(SymMatrix::new(cov)?)?,
        theta: clip_psd(SymMatrix::new(theta)?)?,
        layer: arch.depth(),
    })
}

/// Relative eigenvalue floor tolerated before a kernel is declared indefinite.
pub const KERNEL_PSD_FLOOR: f64 = -1e-8;

/// Clips tiny negative eigenvalues produced by rounding, with a warning.
pub fn clip_psd(k: SymMatrix) -> Result<SymMatrix> {
    let eig = sym_eig(&k);
    let lam_max = eig.max_eigenvalue().max(0.0);
    let lam_min = eig.min_eigenvalue();
    if lam_min >= 0.0 {
        return Ok(k);
    }
    if lam_min < KERNEL_PSD_FLOOR * lam_max {
        return Err(Error::NotPsd {
            min_eigenvalue: lam_min,
        });
    }
    log::warn!("clipping kernel eigenvalue {lam_min:.3e} to 0");
    let clipped = eig.values.mapv(|v| v.max(0.0));
    let scaled = &eig.vectors * &clipped.view().insert_axis(ndarray::Axis(0));
    SymMatrix::new(scaled.dot(&eig.vectors.t()))
}

/// Seed-averaged empirical kernel with per-entry standard errors.
#[derive(Clone, Debug)]
pub struct McKernel {
    pub mean: SymMatrix,
    pub std_error: Array2<f64>,
    pub n_seeds: usize,
}

/// Mean of `empirical_ntk` over `n_seeds` independent NTK-parametrised
/// initialisations with every hidden layer of size `width`.
///
/// Seed `s` draws from stream `rng.stream() + s` of the same seed, and the
/// reduction runs in seed order regardless of scheduling.
pub fn mc_limit_ntk(
    arch: &Architecture,
    x: ArrayView2<f64>,
    width: usize,
    n_seeds: usize,
    rng: &SeededRng,
) -> Result<McKernel> {
    if width == 0 || n_seeds == 0 {
        return Err(Error::InvalidInput("width and n_seeds must be positive".into()));
    }
    let mut sizes = arch.layer_sizes.clone();
    let depth = arch.depth();
    for s in sizes.iter_mut().take(depth).skip(1) {
        *s = width;
    }
    let wide = Architecture::new(
        sizes,
        arch.activation,
        Scaling::Ntk,
        arch.sigma_w,
        arch.sigma_b,
    )?;
    let draws: Vec<Array2<f64>> = (0..n_seeds)
        .into_par_iter()
        .map(|s| {
            let mut r = rng.fork(rng.stream().wrapping_add(s as u64));
            let p = network::init_params(&wide, &mut r);
            empirical_ntk(&p, &wide, x).map(SymMatrix::into_array)
        })
        .collect::<Result<_>>()?;
    let n = x.nrows();
    let m = n_seeds as f64;
    let mut mean = Array2::<f64>::zeros((n, n));
    for d in &draws {
        mean += d;
    }
    mean /= m;
    let mut var = Array2::<f64>::zeros((n, n));
    if n_seeds > 1 {
        for d in &draws {
            var += &(d - &mean).mapv(|v| v * v);
        }
        var /= m - 1.0;
    }
    Ok(McKernel {
        mean: SymMatrix::new(mean)?,
        std_error: var.mapv(|v| (v / m).sqrt()),
        n_seeds,
    })
}

/// Writes a kernel as CSV: a `#` header line with dimensions and provenance,
/// then one comma-separated row per matrix row.
pub fn write_kernel_csv<W: Write>(mut out: W, k: &SymMatrix, provenance: &str) -> Result<()> {
    let n = k.dim();
    writeln!(out, "# rows={n} cols={n} source={provenance}")?;
    for i in 0..n {
        let row: Vec<String> = (0..n).map(|j| format!("{:.16e}", k.get(i, j))).collect();
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}
