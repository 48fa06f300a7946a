//! Lazy-regime dynamics: gradient flow of the first-order Taylor model
//! `yhat_lin = yhat_0 + grad yhat_0 (theta - theta_0)` under
//! `L = (1/2N) ||yhat - Y||^2`, solved in closed form in the eigenbasis of
//! the tangent kernel.
//!
//! Time is continuous with `eta` inside the flow, so every mode decays at
//! rate `(eta / N) lambda_i`. Inverses are pseudo-inverses with the cutoff of
//! [`crate::numerics::PINV_CUTOFF`].

use std::io::Write;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::network::{self, Architecture, NetworkParams};
use crate::numerics::{check_len, check_psd, sym_eig, EigDecomposition, SymMatrix};

#[derive(Clone, Debug)]
pub struct LinearizedState {
    /// Flat parameters at initialisation, when known.
    pub theta0: Option<Array1<f64>>,
    /// `N x d` parameter Jacobian at initialisation, when known.
    pub grad0: Option<Array2<f64>>,
    pub y0: Array1<f64>,
    pub y: Array1<f64>,
    pub kernel: SymMatrix,
    pub eta: f64,
    eig: EigDecomposition,
}

impl LinearizedState {
    /// State from an explicit Jacobian; the kernel is `grad0 grad0^T`.
    pub fn from_jacobian(
        theta0: Array1<f64>,
        grad0: Array2<f64>,
        y0: Array1<f64>,
        y: Array1<f64>,
        eta: f64,
    ) -> Result<Self> {
        check_len("LinearizedState theta0", grad0.ncols(), theta0.len())?;
        let kernel = SymMatrix::new(grad0.dot(&grad0.t()))?;
        let mut s = Self::from_kernel(kernel, y0, y, eta)?;
        s.theta0 = Some(theta0);
        s.grad0 = Some(grad0);
        Ok(s)
    }

    /// State of a network linearised at `params`.
    pub fn from_network(
        params: &NetworkParams,
        arch: &Architecture,
        x: ArrayView2<f64>,
        y: ArrayView1<f64>,
        eta: f64,
    ) -> Result<Self> {
        let grad0 = network::jacobian(params, arch, x)?;
        let y0 = network::forward_batch(params, arch, x)?;
        Self::from_jacobian(params.to_array(), grad0, y0, y.to_owned(), eta)
    }

    /// Output-space state from a kernel alone (e.g. the infinite-width one).
    /// Parameter-space operations are unavailable.
    pub fn from_kernel(kernel: SymMatrix, y0: Array1<f64>, y: Array1<f64>, eta: f64) -> Result<Self> {
        let n = kernel.dim();
        if n == 0 {
            return Err(Error::InvalidInput("empty training set".into()));
        }
        check_len("LinearizedState y0", n, y0.len())?;
        check_len("LinearizedState y", n, y.len())?;
        if !(eta.is_finite() && eta >= 0.0) {
            return Err(Error::InvalidInput(format!("learning rate {eta}")));
        }
        let eig = sym_eig(&kernel);
        check_psd(&eig)?;
        Ok(Self {
            theta0: None,
            grad0: None,
            y0,
            y,
            kernel,
            eta,
            eig,
        })
    }

    pub fn n_train(&self) -> usize {
        self.y.len()
    }

    pub fn eigen(&self) -> &EigDecomposition {
        &self.eig
    }

    /// Mode decay rate factor `eta / N`.
    pub fn rate(&self) -> f64 {
        self.eta / self.n_train() as f64
    }

    fn grad0(&self) -> Result<&Array2<f64>> {
        self.grad0
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("state has no parameter Jacobian".into()))
    }

    fn residual0(&self) -> Array1<f64> {
        &self.y0 - &self.y
    }

    fn check_time(t: f64) -> Result<()> {
        if t.is_finite() && t >= 0.0 {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("time {t}")))
        }
    }

    /// `K^+ (I - e^{-r K t}) (yhat_0 - Y)`: the coefficient vector shared by
    /// the weight solution and new-point prediction.
    fn flow_coefficients(&self, t: f64) -> Result<Array1<f64>> {
        let r = self.rate();
        let thr = self.eig.null_threshold();
        if self.eig.is_singular() {
            log::warn!(
                "pseudo-inverse of singular kernel (condition number {:.3e})",
                self.eig.condition_number()
            );
        }
        self.eig.apply_fn(self.residual0().view(), |lam| {
            if lam > thr {
                -(-r * lam * t).exp_m1() / lam
            } else {
                0.0
            }
        })
    }

    /// `yhat_t = Y + e^{-(eta/N) Theta t} (yhat_0 - Y)`.
    pub fn solve_output(&self, t: f64) -> Result<Array1<f64>> {
        Self::check_time(t)?;
        if t == 0.0 {
            return Ok(self.y0.clone());
        }
        let r = self.rate();
        let decayed = self
            .eig
            .apply_fn(self.residual0().view(), |lam| (-r * lam.max(0.0) * t).exp())?;
        Ok(&self.y + &decayed)
    }

    /// `theta_t = theta_0 - G^T K^+ (I - e^{-(eta/N) K t}) (yhat_0 - Y)`.
    pub fn solve_params(&self, t: f64) -> Result<Array1<f64>> {
        Self::check_time(t)?;
        let theta0 = self
            .theta0
            .as_ref()
            .ok_or_else(|| Error::InvalidInput("state has no initial parameters".into()))?;
        if t == 0.0 {
            return Ok(theta0.clone());
        }
        let alpha = self.flow_coefficients(t)?;
        Ok(theta0 - &self.grad0()?.t().dot(&alpha))
    }

    /// Per-mode decomposition of `||yhat_t - Y||^2`.
    pub fn mse_spectrum(&self, t: f64) -> Result<Spectrum> {
        self.noisy_spectrum(0.0, 0.0, t)
    }

    /// `theta_inf - theta_0 = -G^T K^+ (yhat_0 - Y)`.
    pub fn min_norm_solution(&self) -> Result<Array1<f64>> {
        let g = self.grad0()?;
        let alpha = self.eig.pinv_apply(self.residual0().view())?;
        Ok(-g.t().dot(&alpha))
    }

    /// Outputs under the flow with the pull `-(eta/N) lambda (theta - theta_0)`:
    /// `e^{-r(Theta+lambda)t} yhat_0 + (Theta+lambda)^{-1}(Theta Y + lambda yhat_0)(I - e^{-r(Theta+lambda)t})`.
    pub fn solve_regularized_output(&self, lambda: f64, t: f64) -> Result<Array1<f64>> {
        Self::check_time(t)?;
        check_lambda(lambda)?;
        if lambda == 0.0 {
            return self.solve_output(t);
        }
        let (p0, py) = (self.eig.project(self.y0.view()), self.eig.project(self.y.view()));
        let coords = self.regularized_modes(lambda, t, &p0, &py);
        Ok(self.eig.vectors.dot(&coords))
    }

    fn regularized_modes(&self, lambda: f64, t: f64, p0: &Array1<f64>, py: &Array1<f64>) -> Array1<f64> {
        let r = self.rate();
        Array1::from_iter(self.eig.values.iter().enumerate().map(|(i, &lam)| {
            let lam = lam.max(0.0);
            let a = lam + lambda;
            if a == 0.0 {
                return p0[i];
            }
            let target = (lam * py[i] + lambda * p0[i]) / a;
            let decay = (-r * a * t).exp();
            decay * p0[i] + target * (1.0 - decay)
        }))
    }

    /// `E ||yhat_t - Y||^2` under function-space noise of scale `sigma`:
    /// the deterministic decay plus `sigma^2 (eta/N)^2 sum_i lambda_i^2 (1 - e^{-2 r lambda_i t}) / (2 r lambda_i)`.
    pub fn expected_noisy_mse(&self, sigma: f64, t: f64) -> Result<f64> {
        Ok(self.noisy_spectrum(0.0, sigma, t)?.total)
    }

    /// Per-mode expected squared error with both the ridge pull `lambda` and
    /// function-space noise `sigma`.
    pub fn noisy_spectrum(&self, lambda: f64, sigma: f64, t: f64) -> Result<Spectrum> {
        Self::check_time(t)?;
        check_lambda(lambda)?;
        if !(sigma.is_finite() && sigma >= 0.0) {
            return Err(Error::InvalidInput(format!("noise scale {sigma}")));
        }
        let r = self.rate();
        let p0 = self.eig.project(self.y0.view());
        let py = self.eig.project(self.y.view());
        let mean_modes = if lambda == 0.0 {
            let res = &p0 - &py;
            Array1::from_iter(
                self.eig
                    .values
                    .iter()
                    .zip(res.iter())
                    .map(|(&lam, &e)| (-r * lam.max(0.0) * t).exp() * e),
            )
        } else {
            self.regularized_modes(lambda, t, &p0, &py) - &py
        };
        let mut modes = Vec::with_capacity(self.n_train());
        for (&lam, &m) in self.eig.values.iter().zip(mean_modes.iter()) {
            let lam = lam.max(0.0);
            let a = lam + lambda;
            let noise = if sigma > 0.0 && lam > 0.0 && a > 0.0 {
                // sigma^2 r^2 lam^2 int_0^t e^{-2 r a s} ds
                sigma * sigma * r * r * lam * lam * (-(-2.0 * r * a * t).exp_m1()) / (2.0 * r * a)
            } else {
                0.0
            };
            modes.push(ModeTerm {
                eigenvalue: lam,
                mean_term: m * m,
                noise_term: noise,
            });
        }
        let total = modes.iter().map(|m| m.mean_term + m.noise_term).sum();
        Ok(Spectrum { modes, total })
    }

    /// The noise integral of [`Self::expected_noisy_mse`] by the trapezoid
    /// rule on `nodes` points, without the per-mode antiderivative.
    pub fn expected_noisy_mse_quadrature(&self, sigma: f64, t: f64, nodes: usize) -> Result<f64> {
        Self::check_time(t)?;
        if nodes < 2 {
            return Err(Error::InvalidInput("quadrature needs at least 2 nodes".into()));
        }
        let det = self.mse_spectrum(t)?.total;
        let r = self.rate();
        let h = t / (nodes - 1) as f64;
        let integrand = |s: f64| -> f64 {
            self.eig
                .values
                .iter()
                .map(|&lam| {
                    let lam = lam.max(0.0);
                    lam * lam * (-2.0 * r * lam * (t - s)).exp()
                })
                .sum()
        };
        let mut acc = 0.5 * (integrand(0.0) + integrand(t));
        for k in 1..nodes - 1 {
            acc += integrand(k as f64 * h);
        }
        Ok(det + sigma * sigma * r * r * acc * h)
    }

    /// `yhat_t(x*) = yhat_0(x*) - Theta(x*, X) Theta^+ (I - e^{-(eta/N) Theta t})(yhat_0 - Y)`.
    pub fn predict_new_point(&self, theta_row: ArrayView1<f64>, y0_star: f64, t: f64) -> Result<f64> {
        Self::check_time(t)?;
        check_len("predict_new_point", self.n_train(), theta_row.len())?;
        if t == 0.0 {
            return Ok(y0_star);
        }
        Ok(y0_star - theta_row.dot(&self.flow_coefficients(t)?))
    }

    /// Input gradient of [`Self::predict_new_point`] at `x_star`. The kernel
    /// row derivative is taken by central differences of `kernel_row` with
    /// step `1e-4 (1 + |x_i|)` per coordinate.
    pub fn new_point_input_jacobian<F>(
        &self,
        x_star: ArrayView1<f64>,
        y0_grad: ArrayView1<f64>,
        kernel_row: F,
        t: f64,
    ) -> Result<Array1<f64>>
    where
        F: Fn(ArrayView1<f64>) -> Result<Array1<f64>>,
    {
        Self::check_time(t)?;
        check_len("new_point_input_jacobian", x_star.len(), y0_grad.len())?;
        if t == 0.0 {
            return Ok(y0_grad.to_owned());
        }
        let alpha = self.flow_coefficients(t)?;
        let mut jac = y0_grad.to_owned();
        let mut xp = x_star.to_owned();
        for i in 0..x_star.len() {
            let h = 1e-4 * (1.0 + x_star[i].abs());
            xp[i] = x_star[i] + h;
            let up = kernel_row(xp.view())?;
            xp[i] = x_star[i] - h;
            let down = kernel_row(xp.view())?;
            xp[i] = x_star[i];
            check_len("kernel_row", self.n_train(), up.len())?;
            jac[i] -= (&up - &down).dot(&alpha) / (2.0 * h);
        }
        Ok(jac)
    }

    /// Lazy weight Hessian `(1/N) G^T G`. Noise does not enter.
    pub fn lazy_expected_hessian(&self, mode: HessianOutput) -> Result<LazyHessian> {
        let g = self.grad0()?;
        let n = self.n_train() as f64;
        Ok(match mode {
            HessianOutput::Full => LazyHessian::Full(SymMatrix::new(g.t().dot(g) / n)?),
            HessianOutput::TraceOnly => LazyHessian::Trace(g.iter().map(|v| v * v).sum::<f64>() / n),
        })
    }

    /// Evaluates the expected squared error on a `(t, lambda, sigma)` grid.
    /// Rows come back in grid order (t outermost, sigma innermost).
    pub fn sweep(&self, ts: &[f64], lambdas: &[f64], sigmas: &[f64]) -> Result<Vec<SweepRow>> {
        let points: Vec<(f64, f64, f64)> = ts
            .iter()
            .flat_map(|&t| lambdas.iter().flat_map(move |&l| sigmas.iter().map(move |&s| (t, l, s))))
            .collect();
        let n = self.n_train() as f64;
        points
            .into_par_iter()
            .map(|(t, lambda, sigma)| {
                let spec = self.noisy_spectrum(lambda, sigma, t)?;
                Ok(SweepRow {
                    t,
                    lambda,
                    sigma,
                    sq_error: spec.total,
                    train_mse: spec.total / (2.0 * n),
                    modes: spec.modes.iter().map(|m| m.mean_term + m.noise_term).collect(),
                })
            })
            .collect()
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda.is_finite() && lambda >= 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("regularisation {lambda}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ModeTerm {
    pub eigenvalue: f64,
    /// Squared mean residual along the mode.
    pub mean_term: f64,
    /// Noise variance along the mode.
    pub noise_term: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Spectrum {
    /// Ordered like the kernel eigenvalues (descending).
    pub modes: Vec<ModeTerm>,
    pub total: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HessianOutput {
    Full,
    TraceOnly,
}

#[derive(Clone, Debug)]
pub enum LazyHessian {
    Full(SymMatrix),
    Trace(f64),
}

impl LazyHessian {
    pub fn trace(&self) -> f64 {
        match self {
            LazyHessian::Full(h) => h.trace(),
            LazyHessian::Trace(t) => *t,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub t: f64,
    pub lambda: f64,
    pub sigma: f64,
    /// `E ||yhat_t - Y||^2`.
    pub sq_error: f64,
    /// `sq_error / 2N`, the training loss.
    pub train_mse: f64,
    pub modes: Vec<f64>,
}

/// CSV with columns `t,lambda,sigma,sq_error,train_mse` and, when
/// `with_modes`, one `mode_i` column per eigenmode.
pub fn write_sweep_csv<W: Write>(mut out: W, rows: &[SweepRow], with_modes: bool) -> Result<()> {
    let n_modes = rows.first().map_or(0, |r| r.modes.len());
    let mut header = String::from("t,lambda,sigma,sq_error,train_mse");
    if with_modes {
        for i in 0..n_modes {
            header.push_str(&format!(",mode_{i}"));
        }
    }
    writeln!(out, "{header}")?;
    for r in rows {
        let mut line = format!(
            "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
            r.t, r.lambda, r.sigma, r.sq_error, r.train_mse
        );
        if with_modes {
            for m in &r.modes {
                line.push_str(&format!(",{m:.16e}"));
            }
        }
        writeln!(out, "{line}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SeededRng;
    use ndarray::array;

    fn random_state(seed: u64, n: usize, d: usize, eta: f64) -> LinearizedState {
        let mut rng = SeededRng::new(seed, 0);
        let g = Array2::from_shape_fn((n, d), |_| rng.normal() / (d as f64).sqrt());
        let theta0 = Array1::from_shape_fn(d, |_| rng.normal());
        let y0 = Array1::from_shape_fn(n, |_| rng.normal());
        let y = Array1::from_shape_fn(n, |_| rng.normal());
        LinearizedState::from_jacobian(theta0, g, y0, y, eta).unwrap()
    }

    fn rel(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
        let d = (a - b).mapv(|v| v * v).sum().sqrt();
        d / b.mapv(|v| v * v).sum().sqrt().max(1e-300)
    }

    // Explicit Euler on the output ODE, with optional ridge pull.
    fn euler_outputs(s: &LinearizedState, lambda: f64, t: f64, dt: f64) -> Array1<f64> {
        let r = s.rate();
        let steps = (t / dt).round() as usize;
        let mut yh = s.y0.clone();
        for _ in 0..steps {
            let drift = s.kernel.matvec((&yh - &s.y).view()).unwrap() * (-r) - (&yh - &s.y0) * (r * lambda);
            yh = yh + drift * dt;
        }
        yh
    }

    #[test]
    fn output_identity_and_limit() {
        let s = random_state(1, 6, 20, 0.5);
        assert_eq!(s.solve_output(0.0).unwrap(), s.y0);
        let t = 1e6 / (s.eta * s.eigen().min_eigenvalue());
        let yt = s.solve_output(t).unwrap();
        assert!((yt - &s.y).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v)) < 1e-8);
    }

    #[test]
    fn output_matches_euler() {
        let s = random_state(2, 10, 30, 1.0);
        let yc = s.solve_output(1.0).unwrap();
        let ye = euler_outputs(&s, 0.0, 1.0, 1e-4);
        assert!(rel(&(&ye - &s.y), &(&yc - &s.y)) < 1e-4);
    }

    #[test]
    fn params_consistent_with_outputs() {
        let s = random_state(3, 5, 12, 2.0);
        assert_eq!(s.solve_params(0.0).unwrap(), s.theta0.clone().unwrap());
        for t in [0.3, 2.0, 50.0] {
            let th = s.solve_params(t).unwrap();
            let lin = &s.y0 + &s.grad0.as_ref().unwrap().dot(&(&th - s.theta0.as_ref().unwrap()));
            let out = s.solve_output(t).unwrap();
            assert!((lin - out).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v)) < 1e-8);
        }
    }

    #[test]
    fn spectrum_identities() {
        let s = random_state(4, 10, 25, 0.7);
        let r0 = &s.y0 - &s.y;
        assert!((s.mse_spectrum(0.0).unwrap().total - r0.dot(&r0)).abs() < 1e-12 * r0.dot(&r0));
        for t in [0.1, 1.0, 7.0] {
            let direct = s.solve_output(t).unwrap() - &s.y;
            let want = direct.dot(&direct);
            let got = s.mse_spectrum(t).unwrap().total;
            assert!((got - want).abs() < 1e-8 * want);
        }
        let one = LinearizedState::from_kernel(
            SymMatrix::new(array![[2.0]]).unwrap(),
            array![1.5],
            array![0.5],
            0.3,
        )
        .unwrap();
        let got = one.mse_spectrum(4.0).unwrap().total;
        assert!((got - (-2.0 * 0.3 * 2.0 * 4.0f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn min_norm_hand_case() {
        let s = LinearizedState::from_jacobian(
            array![0.0, 0.0],
            array![[1.0, 0.0]],
            array![0.0],
            array![1.0],
            1.0,
        )
        .unwrap();
        let d = s.min_norm_solution().unwrap();
        assert_eq!(d, array![1.0, 0.0]);
        let zero = LinearizedState::from_jacobian(
            array![0.0, 0.0],
            array![[1.0, 3.0]],
            array![2.0],
            array![2.0],
            1.0,
        )
        .unwrap();
        assert_eq!(zero.min_norm_solution().unwrap(), array![0.0, 0.0]);
    }

    #[test]
    fn regularized_limits() {
        let s = random_state(5, 8, 20, 1.0);
        for t in [0.0, 0.5, 3.0] {
            assert_eq!(s.solve_regularized_output(0.0, t).unwrap(), s.solve_output(t).unwrap());
        }
        let lam = 0.4;
        let big = s.solve_regularized_output(lam, 1e9).unwrap();
        let k = s.kernel.shifted(lam);
        let rhs = s.kernel.matvec(s.y.view()).unwrap() + &s.y0 * lam;
        let want = sym_eig(&k).pinv_apply(rhs.view()).unwrap();
        assert!(rel(&big, &want) < 1e-10);
        let ye = euler_outputs(&s, lam, 1.0, 1e-4);
        let yc = s.solve_regularized_output(lam, 1.0).unwrap();
        assert!(rel(&ye, &yc) < 1e-4);
    }

    #[test]
    fn regularization_slows_convergence() {
        let mut s = random_state(6, 8, 20, 1.0);
        s.y0.fill(0.0);
        for t in [0.5, 2.0, 10.0, 100.0] {
            let mut prev = 0.0;
            for lam in [0.0, 0.1, 1.0, 10.0] {
                let e = s.solve_regularized_output(lam, t).unwrap() - &s.y;
                let norm = e.dot(&e).sqrt();
                assert!(norm >= prev - 1e-12);
                prev = norm;
            }
        }
    }

    #[test]
    fn noisy_mse_reduces_and_limits() {
        let s = random_state(7, 6, 15, 0.5);
        for t in [0.0, 1.0, 20.0] {
            assert_eq!(s.expected_noisy_mse(0.0, t).unwrap(), s.mse_spectrum(t).unwrap().total);
        }
        let one = LinearizedState::from_kernel(
            SymMatrix::new(array![[1.7]]).unwrap(),
            array![0.2],
            array![-0.1],
            0.1,
        )
        .unwrap();
        let t = 50.0 / (0.1 * 1.7);
        let got = one.expected_noisy_mse(0.3, t).unwrap();
        let want = 0.5 * 0.09 * 0.1 * 1.7;
        assert!((got - want).abs() < 1e-6 * want);
    }

    #[test]
    fn noisy_mse_quadrature_cross_check_and_monotone() {
        let s = random_state(8, 7, 15, 0.9);
        let closed = s.expected_noisy_mse(0.4, 3.0).unwrap();
        let quad = s.expected_noisy_mse_quadrature(0.4, 3.0, 10_000).unwrap();
        assert!((closed - quad).abs() < 1e-7 * closed);
        let mut prev = 0.0;
        for sig in [0.0, 0.1, 0.2, 0.5, 1.0] {
            let v = s.expected_noisy_mse(sig, 2.0).unwrap();
            assert!(v >= prev);
            prev = v;
        }
    }

    #[test]
    fn new_point_prediction_limits() {
        let s = random_state(9, 5, 20, 1.0);
        let g = s.grad0.clone().unwrap();
        let row = g.dot(&g.row(2));
        assert_eq!(s.predict_new_point(row.view(), 0.7, 0.0).unwrap(), 0.7);
        let t = 1e6 / (s.rate() * s.eigen().min_eigenvalue());
        let p = s.predict_new_point(row.view(), s.y0[2], t).unwrap();
        assert!((p - s.y[2]).abs() < 1e-8);
    }

    #[test]
    fn new_point_jacobian_matches_fd_of_prediction() {
        // Linear-in-features kernel with a nonlinear feature map.
        let xs = array![[0.1, -0.4], [0.8, 0.3], [-0.5, 0.9], [0.2, 0.2]];
        let feats = |x: ArrayView1<f64>| array![x[0], x[1].sin(), x[0] * x[1], 1.0, (0.5 * x[0]).cos()];
        let g = Array2::from_shape_fn((4, 5), |(i, j)| feats(xs.row(i))[j]);
        let theta0 = array![0.3, -0.2, 0.5, 0.1, 0.0];
        let y0 = g.dot(&theta0);
        let y = array![1.0, -1.0, 0.5, 0.0];
        let s = LinearizedState::from_jacobian(theta0.clone(), g.clone(), y0, y, 0.8).unwrap();
        let row = |x: ArrayView1<f64>| -> Result<Array1<f64>> { Ok(g.dot(&feats(x))) };
        let pred = |x: ArrayView1<f64>, t: f64| {
            s.predict_new_point(row(x).unwrap().view(), feats(x).dot(&theta0), t).unwrap()
        };
        let x_star = array![0.35, -0.6];
        let y0_grad = {
            let h = 1e-6;
            Array1::from_shape_fn(2, |i| {
                let mut a = x_star.clone();
                let mut b = x_star.clone();
                a[i] += h;
                b[i] -= h;
                (feats(a.view()).dot(&theta0) - feats(b.view()).dot(&theta0)) / (2.0 * h)
            })
        };
        let t = 3.0;
        let jac = s.new_point_input_jacobian(x_star.view(), y0_grad.view(), row, t).unwrap();
        for i in 0..2 {
            let h = 1e-5;
            let mut a = x_star.clone();
            let mut b = x_star.clone();
            a[i] += h;
            b[i] -= h;
            let fd = (pred(a.view(), t) - pred(b.view(), t)) / (2.0 * h);
            assert!((fd - jac[i]).abs() < 1e-3 * fd.abs().max(1e-3), "{fd} vs {}", jac[i]);
        }
        let j0 = s.new_point_input_jacobian(x_star.view(), y0_grad.view(), row, 0.0).unwrap();
        assert_eq!(j0, y0_grad);
    }

    #[test]
    fn lazy_hessian_single_sample_and_trace_identity() {
        let s = LinearizedState::from_jacobian(
            array![0.0, 0.0, 0.0],
            array![[1.0, -2.0, 0.5]],
            array![0.0],
            array![1.0],
            1.0,
        )
        .unwrap();
        let LazyHessian::Full(h) = s.lazy_expected_hessian(HessianOutput::Full).unwrap() else {
            panic!()
        };
        assert_eq!(h.get(0, 1), -2.0);
        assert_eq!(h.get(2, 2), 0.25);
        let tr = s.lazy_expected_hessian(HessianOutput::TraceOnly).unwrap().trace();
        assert!((tr - 5.25).abs() < 1e-15);
        let r = random_state(10, 6, 14, 1.0);
        let tr = r.lazy_expected_hessian(HessianOutput::TraceOnly).unwrap().trace();
        assert!((tr - r.kernel.trace() / 6.0).abs() < 1e-12);
        let full = r.lazy_expected_hessian(HessianOutput::Full).unwrap().trace();
        assert!((tr - full).abs() < 1e-12);
    }

    #[test]
    fn parameter_ops_need_jacobian() {
        let s = LinearizedState::from_kernel(SymMatrix::identity(2), array![0.0, 0.0], array![1.0, 1.0], 1.0)
            .unwrap();
        assert!(s.solve_params(1.0).is_err());
        assert!(s.min_norm_solution().is_err());
        assert!(s.solve_output(-1.0).is_err());
    }

    #[test]
    fn sweep_csv_layout() {
        let s = random_state(11, 3, 6, 1.0);
        let rows = s.sweep(&[0.0, 1.0], &[0.0, 0.5], &[0.0, 0.1, 0.2]).unwrap();
        assert_eq!(rows.len(), 12);
        assert_eq!((rows[1].t, rows[1].lambda, rows[1].sigma), (0.0, 0.0, 0.1));
        assert_eq!(rows[6].t, 1.0);
        let mut buf = Vec::new();
        write_sweep_csv(&mut buf, &rows, true).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("t,lambda,sigma,sq_error,train_mse,mode_0,mode_1,mode_2\n"));
        assert_eq!(text.lines().count(), 13);
    }
}
