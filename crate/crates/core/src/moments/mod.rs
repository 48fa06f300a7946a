//! Perturbative moments of the scalar-weight diffusion
//!
//! ```text
//! d theta = mu(theta) dt + sigma dW,   mu(theta) = sum_n mu_bar_n (theta - theta_bar)^n
//! ```
//!
//! where `mu` is the gradient-descent drift `-(eta/N) d_theta yhat^T (yhat - Y)`
//! of a network whose output is replaced by its order-`N` Taylor polynomial in
//! a single weight. The generator splits into `A_0 = mu_bar_0 d + sigma^2/2 d^2`
//! and perturbations `A_n = mu_bar_n x^n d`, with `x = theta - theta_bar`.
//!
//! The leading moment `u_m^0 = E[(x + mu_bar_0 dt + sigma sqrt(dt) Z)^m]` is
//! Gaussian. Correction `n` sums, over compositions `(i_1, ..., i_k)` of `n`,
//! nested time integrals of
//!
//! ```text
//! G_{i_1}(r_1) ... G_{i_k}(r_k) u_m^0,   0 <= r_1 <= ... <= r_k <= dt,
//! G_i(r) = mu_bar_i (x + mu_bar_0 r + sigma^2 r d)^i d,
//! ```
//!
//! the rightmost operator acting first. Everything is carried out exactly on
//! [`poly::SymPoly`] and only evaluated numerically at the end.

pub mod poly;

use std::collections::HashMap;
use std::io::Write;
use std::sync::{Arc, Mutex, OnceLock};

use ndarray::{Array1, ArrayView1};
use serde::Serialize;

use crate::error::{Error, Result};
use poly::{CompiledPoly, Rational, Var, MAX_DRIFT_INDEX, NUM_VARS};
#[cfg(test)]
use poly::Monomial;
pub use poly::SymPoly;

/// Highest raw moment the engine generates.
pub const MAX_MOMENT: usize = 6;
/// Highest correction index `2N - 1`.
pub const MAX_CORRECTION: usize = MAX_DRIFT_INDEX;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DriftCoefficients {
    /// Taylor order `N` of the output.
    pub order: usize,
    /// `mu_bar_0 .. mu_bar_{2N-1}`, including the `-eta/N` factor.
    pub mu_bar: Vec<f64>,
    pub theta_bar: f64,
    pub eta: f64,
    pub n_train: usize,
}

impl DriftCoefficients {
    /// Coefficients given directly, e.g. for a process with known drift.
    /// `mu_bar.len()` must be `2N`.
    pub fn from_values(mu_bar: Vec<f64>, theta_bar: f64) -> Result<Self> {
        if mu_bar.is_empty() || mu_bar.len() % 2 != 0 {
            return Err(Error::InvalidInput(format!(
                "need an even, nonzero number of drift coefficients, got {}",
                mu_bar.len()
            )));
        }
        if mu_bar.len() - 1 > MAX_CORRECTION {
            return Err(Error::UnsupportedDepth(mu_bar.len() - 1));
        }
        if mu_bar.iter().any(|v| !v.is_finite()) || !theta_bar.is_finite() {
            return Err(Error::InvalidInput("non-finite drift coefficient".into()));
        }
        Ok(Self {
            order: mu_bar.len() / 2,
            mu_bar,
            theta_bar,
            eta: f64::NAN,
            n_train: 0,
        })
    }

    /// Highest correction index `2N - 1`.
    pub fn depth(&self) -> usize {
        self.mu_bar.len() - 1
    }

    /// The truncated drift polynomial at `theta`.
    pub fn drift_at(&self, theta: f64) -> f64 {
        let x = theta - self.theta_bar;
        self.mu_bar.iter().rev().fold(0.0, |acc, &c| acc * x + c)
    }
}

fn factorial(k: usize) -> f64 {
    (1..=k).map(|v| v as f64).product()
}

/// Drift coefficients of `-(eta/N) d yhat^T (yhat - Y)` with `yhat` replaced
/// by its order-`order` Taylor polynomial around `theta_bar`:
///
/// ```text
/// mu_bar_n = -(eta/N) sum_{k <= N-1, j <= N, k + j = n}
///            (d^{k+1} yhat / k!)^T (d^j yhat / j! - [j = 0] Y)
/// ```
///
/// `derivs[k]` holds `d^k yhat(X)` at `theta_bar` for `k = 0..=order`.
pub fn drift_coefficients(
    derivs: &[Array1<f64>],
    y: ArrayView1<f64>,
    eta: f64,
    order: usize,
    theta_bar: f64,
) -> Result<DriftCoefficients> {
    if order == 0 {
        return Err(Error::InvalidInput("expansion order must be at least 1".into()));
    }
    if 2 * order - 1 > MAX_CORRECTION {
        return Err(Error::UnsupportedDepth(2 * order - 1));
    }
    if derivs.len() < order + 1 {
        return Err(Error::MissingDerivatives {
            needed: order + 1,
            supplied: derivs.len(),
        });
    }
    let n = y.len();
    if n == 0 {
        return Err(Error::InvalidInput("empty training set".into()));
    }
    for d in &derivs[..=order] {
        crate::numerics::check_len("drift_coefficients", n, d.len())?;
    }
    let scale = -eta / n as f64;
    let mut mu_bar = vec![0.0; 2 * order];
    for k in 0..order {
        let left = &derivs[k + 1] / factorial(k);
        for j in 0..=order {
            let mut right = &derivs[j] / factorial(j);
            if j == 0 {
                right -= &y;
            }
            mu_bar[k + j] += scale * left.dot(&right);
        }
    }
    let mut c = DriftCoefficients::from_values(mu_bar, theta_bar)?;
    c.eta = eta;
    c.n_train = n;
    Ok(c)
}

/// Normal law of the leading-order weight.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GaussianLaw {
    pub mean: f64,
    pub variance: f64,
}

impl GaussianLaw {
    pub fn new(mean: f64, variance: f64) -> Result<Self> {
        if !(variance >= 0.0) || !mean.is_finite() || !variance.is_finite() {
            return Err(Error::InvalidInput(format!("Gaussian({mean}, {variance})")));
        }
        Ok(Self { mean, variance })
    }

    /// Law of `theta_t - theta_bar` when only `A_0` acts.
    pub fn leading_order(theta: f64, coeffs: &DriftCoefficients, sigma: f64, dt: f64) -> Result<Self> {
        Self::new(theta - coeffs.theta_bar + coeffs.mu_bar[0] * dt, sigma * sigma * dt)
    }

    /// `E[X^m]` via `M_k = mean M_{k-1} + (k-1) variance M_{k-2}`.
    pub fn raw_moment(&self, m: usize) -> f64 {
        let (mut prev, mut cur) = (0.0, 1.0);
        for k in 1..=m {
            let next = self.mean * cur + (k - 1) as f64 * self.variance * prev;
            prev = cur;
            cur = next;
        }
        cur
    }
}

/// `E[(theta_t^0 - theta_bar)^m]` under the leading-order Gaussian law.
pub fn base_moment(m: usize, theta: f64, coeffs: &DriftCoefficients, sigma: f64, dt: f64) -> Result<f64> {
    if m > MAX_MOMENT {
        return Err(Error::InvalidInput(format!("moment order {m} above {MAX_MOMENT}")));
    }
    if !(dt >= 0.0) {
        return Err(Error::InvalidInput(format!("elapsed time {dt}")));
    }
    Ok(GaussianLaw::leading_order(theta, coeffs, sigma, dt)?.raw_moment(m))
}

/// One term `coeff * x^power * d^order`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct OperatorTerm {
    pub coeff: f64,
    pub power: usize,
    pub order: usize,
}

/// Differential operator with polynomial coefficients in `x`.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct PolyDiffOperator {
    terms: Vec<OperatorTerm>,
}

impl PolyDiffOperator {
    /// Canonical form: sorted by `(power, order)`, equal pairs merged, zeros dropped.
    pub fn new(terms: impl IntoIterator<Item = OperatorTerm>) -> Self {
        let mut merged: Vec<OperatorTerm> = Vec::new();
        let mut all: Vec<OperatorTerm> = terms.into_iter().collect();
        all.sort_by_key(|t| (t.power, t.order));
        for t in all {
            match merged.last_mut() {
                Some(last) if last.power == t.power && last.order == t.order => last.coeff += t.coeff,
                _ => merged.push(t),
            }
        }
        merged.retain(|t| t.coeff != 0.0);
        Self { terms: merged }
    }

    pub fn terms(&self) -> &[OperatorTerm] {
        &self.terms
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    /// Applies the operator to `sum_i p[i] x^i`.
    pub fn apply(&self, p: &[f64]) -> Vec<f64> {
        let mut out: Vec<f64> = Vec::new();
        for t in &self.terms {
            for (i, &c) in p.iter().enumerate().skip(t.order) {
                if c == 0.0 {
                    continue;
                }
                let falling: f64 = ((i - t.order + 1)..=i).map(|v| v as f64).product();
                let deg = i - t.order + t.power;
                if out.len() <= deg {
                    out.resize(deg + 1, 0.0);
                }
                out[deg] += t.coeff * falling * c;
            }
        }
        out
    }
}

/// `A_0 = mu_bar_0 d + sigma^2/2 d^2` and `A_n = mu_bar_n x^n d` for `n = 1..=2N-1`.
pub fn build_operators(coeffs: &DriftCoefficients, sigma: f64) -> Vec<PolyDiffOperator> {
    coeffs
        .mu_bar
        .iter()
        .enumerate()
        .map(|(n, &mu)| {
            let mut terms = vec![OperatorTerm { coeff: mu, power: n, order: 1 }];
            if n == 0 {
                terms.push(OperatorTerm { coeff: 0.5 * sigma * sigma, power: 0, order: 2 });
            }
            PolyDiffOperator::new(terms)
        })
        .collect()
}

fn int(v: i128) -> Rational {
    Rational::from_integer(v)
}

/// `E[(x + mu0 dt + sqrt(s2 dt) Z)^m]` as a polynomial.
fn symbolic_base(m: usize) -> SymPoly {
    let shifted = SymPoly::var(Var::Offset) + SymPoly::var(Var::Drift(0)).shift(Var::Elapsed, 1);
    let diffusion = SymPoly::var(Var::NoiseVar).shift(Var::Elapsed, 1);
    // Hermite recurrence M_k = a M_{k-1} + (k-1) v M_{k-2}.
    let (mut prev, mut cur) = (SymPoly::zero(), SymPoly::constant(int(1)));
    for k in 1..=m {
        let next = &shifted * &cur + (&diffusion * &prev).scale(int(k as i128 - 1));
        prev = cur;
        cur = next;
    }
    cur
}

/// `G_i(r) p = mu_bar_i (x + mu_bar_0 r + s2 r d)^i d p` at integration time `r`.
fn apply_g(p: &SymPoly, i: usize, r: Var) -> SymPoly {
    let shift = SymPoly::var(Var::Offset) + SymPoly::var(Var::Drift(0)).shift(r, 1);
    let mut q = p.derivative(Var::Offset);
    for _ in 0..i {
        let diffusion = q.derivative(Var::Offset).shift(Var::NoiseVar, 1).shift(r, 1);
        q = &shift * &q + diffusion;
    }
    q.shift(Var::Drift(i), 1)
}

/// Integrates the simplex `dt >= s_1 >= s_2 >= ... >= s_k >= 0`, where `s_1`
/// belongs to the operator applied first.
fn integrate_simplex(p: &SymPoly, k: usize) -> SymPoly {
    let mut out = p.clone();
    for level in (1..=k).rev() {
        let upper = if level == 1 { Var::Elapsed } else { Var::Time(level - 1) };
        out = out.integrate(Var::Time(level), None, Some(upper));
    }
    out
}

fn correction_symbolic(m: usize, n: usize) -> SymPoly {
    let base = symbolic_base(m);
    if n == 0 {
        return base;
    }
    // by_depth[k] accumulates compositions with k operators before integration.
    let mut by_depth = vec![SymPoly::zero(); n + 1];
    fn walk(p: &SymPoly, remaining: usize, depth: usize, by_depth: &mut [SymPoly]) {
        for i in 1..=remaining {
            let q = apply_g(p, i, Var::Time(depth + 1));
            if q.is_zero() {
                continue;
            }
            if i == remaining {
                by_depth[depth + 1] += &q;
            } else {
                walk(&q, remaining - i, depth + 1, by_depth);
            }
        }
    }
    walk(&base, n, 0, &mut by_depth);
    let mut total = SymPoly::zero();
    for (k, p) in by_depth.iter().enumerate().skip(1) {
        if !p.is_zero() {
            total += &integrate_simplex(p, k);
        }
    }
    total
}

/// Closed form of `u_m^n` in `x`, `dt`, `mu0..mu5` and `s2`. Results are cached.
pub fn symbolic_term(m: usize, n: usize) -> Result<Arc<SymPoly>> {
    if m > MAX_MOMENT {
        return Err(Error::InvalidInput(format!("moment order {m} above {MAX_MOMENT}")));
    }
    if n > MAX_CORRECTION {
        return Err(Error::UnsupportedDepth(n));
    }
    static CACHE: OnceLock<Mutex<HashMap<(usize, usize), Arc<SymPoly>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    if let Some(p) = cache.lock().unwrap().get(&(m, n)) {
        return Ok(Arc::clone(p));
    }
    let p = Arc::new(correction_symbolic(m, n));
    cache.lock().unwrap().insert((m, n), Arc::clone(&p));
    Ok(p)
}

/// `u_m^0 .. u_m^{2N-1}` bound to a set of drift coefficients.
#[derive(Clone, Debug)]
pub struct MomentExpansion {
    pub m: usize,
    pub sigma: f64,
    pub coeffs: DriftCoefficients,
    symbolic: Vec<Arc<SymPoly>>,
    compiled: Vec<CompiledPoly>,
}

/// Builds the expansion of the `m`-th moment for the operators of `coeffs`.
pub fn correction_terms(coeffs: &DriftCoefficients, sigma: f64, m: usize) -> Result<MomentExpansion> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidInput(format!("noise scale {sigma}")));
    }
    let depth = coeffs.depth();
    if depth > MAX_CORRECTION {
        return Err(Error::UnsupportedDepth(depth));
    }
    let symbolic = (0..=depth)
        .map(|n| symbolic_term(m, n))
        .collect::<Result<Vec<_>>>()?;
    let compiled = symbolic.iter().map(|p| p.compile()).collect();
    Ok(MomentExpansion {
        m,
        sigma,
        coeffs: coeffs.clone(),
        symbolic,
        compiled,
    })
}

impl MomentExpansion {
    pub fn order(&self) -> usize {
        self.coeffs.order
    }

    pub fn num_terms(&self) -> usize {
        self.symbolic.len()
    }

    pub fn symbolic(&self, n: usize) -> &SymPoly {
        &self.symbolic[n]
    }

    fn assignment(&self, theta: f64, dt: f64, sigma: f64) -> [f64; NUM_VARS] {
        let mut v = [0.0; NUM_VARS];
        v[Var::Offset.index()] = theta - self.coeffs.theta_bar;
        v[Var::Elapsed.index()] = dt;
        v[Var::NoiseVar.index()] = sigma * sigma;
        for (i, &mu) in self.coeffs.mu_bar.iter().enumerate() {
            v[Var::Drift(i).index()] = mu;
        }
        v
    }

    /// `u_m^0 .. u_m^{2N-1}` at the start weight `theta` after time `dt`.
    pub fn terms_at(&self, theta: f64, dt: f64) -> Vec<f64> {
        self.terms_with_sigma(theta, dt, self.sigma)
    }

    pub fn terms_with_sigma(&self, theta: f64, dt: f64, sigma: f64) -> Vec<f64> {
        let a = self.assignment(theta, dt, sigma);
        self.compiled.iter().map(|p| p.eval(&a)).collect()
    }

    /// `u_m^{(N)} = sum_n u_m^n`.
    pub fn value(&self, theta: f64, dt: f64) -> f64 {
        self.terms_at(theta, dt).iter().sum()
    }

    /// Partial sum through correction `upto`.
    pub fn partial(&self, theta: f64, dt: f64, upto: usize) -> f64 {
        self.terms_at(theta, dt).iter().take(upto + 1).sum()
    }

    /// One line per term, `u_m^n = ...`.
    pub fn pretty(&self) -> String {
        let mut s = String::new();
        for (n, p) in self.symbolic.iter().enumerate() {
            s.push_str(&format!("u_{}^{} = {}\n", self.m, n, p));
        }
        s
    }
}

/// Term table as CSV: one row per monomial with its rational coefficient and
/// the exponent of every variable.
pub fn write_term_csv<W: Write>(mut out: W, expansions: &[&MomentExpansion]) -> Result<()> {
    let names: Vec<String> = [Var::Offset, Var::Elapsed]
        .into_iter()
        .chain((0..=MAX_DRIFT_INDEX).map(Var::Drift))
        .chain([Var::NoiseVar])
        .map(Var::name)
        .collect();
    writeln!(out, "moment,correction,coefficient,value,{}", names.join(","))?;
    for e in expansions {
        for (n, p) in e.symbolic.iter().enumerate() {
            for (mono, c) in p.terms() {
                let exps: Vec<String> = (0..names.len()).map(|i| mono[i].to_string()).collect();
                let value = *c.numer() as f64 / *c.denom() as f64;
                writeln!(out, "{},{},{},{:.16e},{}", e.m, n, c, value, exps.join(","))?;
            }
        }
    }
    Ok(())
}

fn check_expansions(order: usize, moments: &[MomentExpansion], needed: usize) -> Result<()> {
    if moments.len() < needed {
        return Err(Error::OrderMismatch(format!(
            "need moments 0..={} , got {}",
            needed - 1,
            moments.len()
        )));
    }
    for (k, e) in moments.iter().take(needed).enumerate() {
        if e.m != k {
            return Err(Error::OrderMismatch(format!("slot {k} holds moment {}", e.m)));
        }
        if e.order() != order {
            return Err(Error::OrderMismatch(format!(
                "moment {k} expanded at order {}, derivatives at order {order}",
                e.order()
            )));
        }
    }
    Ok(())
}

/// `E[yhat_t^{(N)}] = sum_{n <= N} (d^n yhat / n!) u_n^{(N)}` per data point.
/// `moments[n]` must be the expansion of the `n`-th moment.
pub fn expected_output(
    derivs: &[Array1<f64>],
    moments: &[MomentExpansion],
    theta: f64,
    dt: f64,
) -> Result<Array1<f64>> {
    let order = derivs.len().checked_sub(1).ok_or_else(|| Error::OrderMismatch("no derivatives".into()))?;
    check_expansions(order, moments, order + 1)?;
    let mut out = Array1::zeros(derivs[0].len());
    for (n, d) in derivs.iter().enumerate() {
        crate::numerics::check_len("expected_output", out.len(), d.len())?;
        out.scaled_add(moments[n].value(theta, dt) / factorial(n), d);
    }
    Ok(out)
}

/// Coefficients `c_p` of the loss Hessian `d^2/dtheta^2 (1/2N)||yhat^{(N)} - Y||^2 = sum_p c_p x^p`.
pub fn hessian_polynomial(derivs: &[Array1<f64>], y: ArrayView1<f64>) -> Result<Vec<f64>> {
    let order = derivs.len().checked_sub(1).ok_or_else(|| Error::OrderMismatch("no derivatives".into()))?;
    let n = y.len();
    if n == 0 {
        return Err(Error::InvalidInput("empty training set".into()));
    }
    for d in derivs {
        crate::numerics::check_len("hessian_polynomial", n, d.len())?;
    }
    let scale = 1.0 / n as f64;
    let mut c = vec![0.0; 2 * order.max(1) - 1];
    // second derivative of yhat times residual
    for k in 0..order.saturating_sub(1) {
        let left = &derivs[k + 2] / factorial(k);
        for (j, d) in derivs.iter().enumerate() {
            let mut right = d / factorial(j);
            if j == 0 {
                right -= &y;
            }
            c[k + j] += scale * left.dot(&right);
        }
    }
    // squared first derivative
    for k in 0..order {
        let left = &derivs[k + 1] / factorial(k);
        for j in 0..order {
            c[k + j] += scale * left.dot(&(&derivs[j + 1] / factorial(j)));
        }
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct HessianProxy {
    pub total: f64,
    /// Value with the same drift and `sigma = 0`.
    pub sigma_free: f64,
    /// `total - sigma_free`.
    pub sigma_part: f64,
}

/// Expected loss Hessian of the order-`N` Taylor model, with `x^p` replaced
/// by `u_p^{(N)}`. `moments[p]` must cover `p = 0..=2N-2`.
pub fn expected_hessian_proxy(
    derivs: &[Array1<f64>],
    y: ArrayView1<f64>,
    moments: &[MomentExpansion],
    theta: f64,
    dt: f64,
) -> Result<HessianProxy> {
    let c = hessian_polynomial(derivs, y)?;
    let order = derivs.len() - 1;
    check_expansions(order, moments, c.len())?;
    let mut total = 0.0;
    let mut free = 0.0;
    for (p, &cp) in c.iter().enumerate() {
        let e = &moments[p];
        total += cp * e.value(theta, dt);
        free += cp * e.terms_with_sigma(theta, dt, 0.0).iter().sum::<f64>();
    }
    Ok(HessianProxy {
        total,
        sigma_free: free,
        sigma_part: total - free,
    })
}

/// Scalar-weight model `yhat_i(theta) = a_i + b_i theta + c_i theta^2 / 2`.
/// Its gradient-descent drift is cubic, so the order-2 expansion represents
/// it without truncation.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticModel {
    pub a: Array1<f64>,
    pub b: Array1<f64>,
    pub c: Array1<f64>,
    pub y: Array1<f64>,
}

impl QuadraticModel {
    pub fn new(a: Array1<f64>, b: Array1<f64>, c: Array1<f64>, y: Array1<f64>) -> Result<Self> {
        let n = y.len();
        for v in [&a, &b, &c] {
            crate::numerics::check_len("QuadraticModel", n, v.len())?;
        }
        Ok(Self { a, b, c, y })
    }

    pub fn output(&self, theta: f64) -> Array1<f64> {
        &self.a + &(&self.b * theta) + &(&self.c * (0.5 * theta * theta))
    }

    /// `d^k yhat` at `theta` for `k = 0..=order`.
    pub fn derivatives(&self, theta: f64, order: usize) -> Vec<Array1<f64>> {
        (0..=order)
            .map(|k| match k {
                0 => self.output(theta),
                1 => &self.b + &(&self.c * theta),
                2 => self.c.clone(),
                _ => Array1::zeros(self.y.len()),
            })
            .collect()
    }

    /// `-(eta/N) d yhat^T (yhat - Y)`.
    pub fn drift(&self, theta: f64, eta: f64) -> f64 {
        let n = self.y.len() as f64;
        let g = &self.b + &(&self.c * theta);
        -eta / n * g.dot(&(self.output(theta) - &self.y))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn poly(s: &str) -> SymPoly {
        s.parse().unwrap()
    }

    fn monomial(powers: &[(Var, u8)]) -> Monomial {
        let mut m = [0u8; NUM_VARS];
        for &(v, e) in powers {
            m[v.index()] += e;
        }
        m
    }

    fn coeffs(mu: &[f64]) -> DriftCoefficients {
        DriftCoefficients::from_values(mu.to_vec(), 0.0).unwrap()
    }

    #[test]
    fn drift_order_one_linear_model() {
        let d = vec![array![0.5, -1.0, 2.0], array![1.0, 2.0, -0.5]];
        let y = array![0.0, 1.0, 1.0];
        let c = drift_coefficients(&d, y.view(), 0.3, 1, 0.0).unwrap();
        let r = -0.3 / 3.0;
        assert!((c.mu_bar[0] - r * d[1].dot(&(&d[0] - &y))).abs() < 1e-15);
        assert!((c.mu_bar[1] - r * d[1].dot(&d[1])).abs() < 1e-15);
        let fit = drift_coefficients(&[y.clone(), d[1].clone()], y.view(), 0.3, 1, 0.0).unwrap();
        assert_eq!(fit.mu_bar[0], 0.0);
    }

    #[test]
    fn drift_order_two_matches_expanded_formulas() {
        let (y0, g, h) = (array![0.3, -0.2], array![1.1, 0.4], array![-0.5, 0.8]);
        let y = array![1.0, 0.5];
        let c = drift_coefficients(&[y0.clone(), g.clone(), h.clone()], y.view(), 0.7, 2, 0.0).unwrap();
        let r = -0.7 / 2.0;
        let res = &y0 - &y;
        let want = [
            r * g.dot(&res),
            r * (h.dot(&res) + g.dot(&g)),
            r * (0.5 * g.dot(&h) + h.dot(&g)),
            r * 0.5 * h.dot(&h),
        ];
        for (a, b) in c.mu_bar.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(matches!(
            drift_coefficients(&[y0, g], y.view(), 0.7, 2, 0.0),
            Err(Error::MissingDerivatives { needed: 3, supplied: 2 })
        ));
    }

    #[test]
    fn quadratic_model_drift_is_the_cubic() {
        let m = QuadraticModel::new(array![0.1, -0.3], array![0.8, 0.5], array![0.6, -0.4], array![0.5, 0.2])
            .unwrap();
        let tb = 0.25;
        let c = drift_coefficients(&m.derivatives(tb, 2), m.y.view(), 0.9, 2, tb).unwrap();
        for th in [-1.0, 0.0, 0.4, 2.0] {
            assert!((c.drift_at(th) - m.drift(th, 0.9)).abs() < 1e-13);
        }
    }

    #[test]
    fn gaussian_moments() {
        let std = GaussianLaw::new(0.0, 1.0).unwrap();
        let want = [1.0, 0.0, 1.0, 0.0, 3.0, 0.0, 15.0];
        for (m, w) in want.iter().enumerate() {
            assert_eq!(std.raw_moment(m), *w);
        }
        assert!(GaussianLaw::new(0.0, -1.0).is_err());
    }

    #[test]
    fn base_moment_cases() {
        let c = DriftCoefficients::from_values(vec![0.4, 0.0], 1.0).unwrap();
        assert!((base_moment(3, 1.5, &c, 0.3, 0.0).unwrap() - 0.125).abs() < 1e-15);
        let z = coeffs(&[0.0, 0.0]);
        assert!((base_moment(2, 0.0, &z, 0.5, 2.0).unwrap() - 0.5).abs() < 1e-15);
        assert!(base_moment(7, 0.0, &z, 0.5, 2.0).is_err());
    }

    #[test]
    fn fourth_moment_against_quadrature() {
        let c = coeffs(&[-0.6, 0.0]);
        let (theta, sigma, dt) = (0.3, 0.8, 0.7);
        let got = base_moment(4, theta, &c, sigma, dt).unwrap();
        let mean = theta - 0.6 * dt;
        let sd = sigma * dt.sqrt();
        // composite Simpson over +-12 sd
        let (a, b, n) = (mean - 12.0 * sd, mean + 12.0 * sd, 20_000);
        let h = (b - a) / n as f64;
        let f = |x: f64| {
            x.powi(4) * (-(x - mean).powi(2) / (2.0 * sd * sd)).exp() / (sd * (2.0 * std::f64::consts::PI).sqrt())
        };
        let mut acc = f(a) + f(b);
        for i in 1..n {
            acc += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        let quad = acc * h / 3.0;
        assert!((got - quad).abs() < 1e-8 * quad.abs());
    }

    #[test]
    fn operators_structure() {
        let zero = build_operators(&coeffs(&[0.0, 0.0, 0.0, 0.0]), 0.0);
        assert!(zero.iter().all(PolyDiffOperator::is_zero));
        let ops = build_operators(&coeffs(&[0.1, 0.2, 0.3, 0.4]), 0.5);
        assert_eq!(ops.len(), 4);
        for (n, (op, mu)) in ops.iter().zip([0.1, 0.2, 0.3, 0.4]).enumerate().skip(1) {
            assert_eq!(op.terms(), &[OperatorTerm { coeff: mu, power: n, order: 1 }]);
        }
        // A_0 (x^2) = 2 mu0 x + sigma^2
        let out = ops[0].apply(&[0.0, 0.0, 1.0]);
        assert!((out[0] - 0.25).abs() < 1e-15 && (out[1] - 0.2).abs() < 1e-15);
        let merged = PolyDiffOperator::new([
            OperatorTerm { coeff: 1.0, power: 1, order: 1 },
            OperatorTerm { coeff: 2.0, power: 1, order: 1 },
            OperatorTerm { coeff: 0.0, power: 0, order: 2 },
        ]);
        assert_eq!(merged.terms(), &[OperatorTerm { coeff: 3.0, power: 1, order: 1 }]);
    }

    #[test]
    fn hand_derived_terms() {
        assert_eq!(*symbolic_term(1, 0).unwrap(), poly("x + mu0*dt"));
        assert_eq!(*symbolic_term(1, 1).unwrap(), poly("mu1*x*dt + 1/2*mu1*mu0*dt^2"));
        assert_eq!(*symbolic_term(2, 0).unwrap(), poly("x^2 + 2*mu0*x*dt + mu0^2*dt^2 + s2*dt"));
        assert_eq!(
            *symbolic_term(2, 1).unwrap(),
            poly("2*mu1*x^2*dt + 3*mu1*mu0*x*dt^2 + mu1*mu0^2*dt^3 + mu1*s2*dt^2")
        );
        assert_eq!(
            *symbolic_term(1, 2).unwrap(),
            poly(
                "mu2*x^2*dt + mu2*mu0*x*dt^2 + 1/3*mu2*mu0^2*dt^3 + 1/2*mu2*s2*dt^2 \
                 + 1/2*mu1^2*x*dt^2 + 1/6*mu1^2*mu0*dt^3"
            )
        );
        assert!(symbolic_term(0, 3).unwrap().is_zero());
        assert!(matches!(symbolic_term(1, 6), Err(Error::UnsupportedDepth(6))));
    }

    #[test]
    fn first_order_mean_has_no_noise() {
        for n in 0..=1 {
            assert_eq!(symbolic_term(1, n).unwrap().degree_in(Var::NoiseVar), 0);
        }
        let s2 = monomial(&[(Var::Drift(2), 1), (Var::NoiseVar, 1), (Var::Elapsed, 2)]);
        assert_eq!(symbolic_term(1, 2).unwrap().coefficient(&s2), Rational::new(1, 2));
    }

    // Independent route: integrate the hierarchy
    //   d/dt u^n = A_0 u^n + sum_{k=1..n} A_k u^{n-k},  u^0(0) = x^m, u^n(0) = 0,
    // with classical RK4 on dense polynomial coefficients.
    fn hierarchy_rk4(ops: &[PolyDiffOperator], m: usize, dt: f64, steps: usize) -> Vec<Vec<f64>> {
        let depth = ops.len() - 1;
        let deg = m + 4 * depth + 2;
        let pad = |mut v: Vec<f64>| {
            v.resize(deg.max(v.len()), 0.0);
            v.truncate(deg);
            v
        };
        let rhs = |u: &[Vec<f64>]| -> Vec<Vec<f64>> {
            (0..=depth)
                .map(|n| {
                    let mut acc = pad(ops[0].apply(&u[n]));
                    for k in 1..=n {
                        for (a, b) in acc.iter_mut().zip(pad(ops[k].apply(&u[n - k]))) {
                            *a += b;
                        }
                    }
                    acc
                })
                .collect()
        };
        let axpy = |u: &[Vec<f64>], k: &[Vec<f64>], h: f64| -> Vec<Vec<f64>> {
            u.iter()
                .zip(k)
                .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + h * y).collect())
                .collect()
        };
        let mut u: Vec<Vec<f64>> = (0..=depth).map(|_| vec![0.0; deg]).collect();
        u[0][m] = 1.0;
        let h = dt / steps as f64;
        for _ in 0..steps {
            let k1 = rhs(&u);
            let k2 = rhs(&axpy(&u, &k1, h / 2.0));
            let k3 = rhs(&axpy(&u, &k2, h / 2.0));
            let k4 = rhs(&axpy(&u, &k3, h));
            for n in 0..=depth {
                for i in 0..deg {
                    u[n][i] += h / 6.0 * (k1[n][i] + 2.0 * k2[n][i] + 2.0 * k3[n][i] + k4[n][i]);
                }
            }
        }
        u
    }

    #[test]
    fn corrections_match_hierarchy_integration() {
        let c = DriftCoefficients::from_values(vec![-0.3, 0.5, -0.7, 0.4, 0.25, -0.6], 0.2).unwrap();
        let sigma = 0.6;
        let ops = build_operators(&c, sigma);
        let dt = 0.8;
        for m in 1..=4 {
            let e = correction_terms(&c, sigma, m).unwrap();
            let u = hierarchy_rk4(&ops, m, dt, 400);
            for theta in [0.2, -0.5, 1.1] {
                let x = theta - c.theta_bar;
                let terms = e.terms_at(theta, dt);
                for (n, un) in u.iter().enumerate() {
                    let oracle: f64 = un.iter().rev().fold(0.0, |acc, &v| acc * x + v);
                    let got = terms[n];
                    assert!(
                        (got - oracle).abs() < 1e-9 * (1.0 + oracle.abs()),
                        "m={m} n={n} theta={theta}: {got} vs {oracle}"
                    );
                }
            }
        }
    }

    #[test]
    fn ou_mean_and_variance() {
        // d theta = -a (theta - target) dt + sigma dW, expanded at theta0.
        let (a, target, theta0, sigma) = (1.0, 2.0, 0.5, 0.4);
        for order in 1..=3 {
            let mut mu = vec![0.0; 2 * order];
            mu[0] = -a * (theta0 - target);
            mu[1] = -a;
            let c = DriftCoefficients::from_values(mu, theta0).unwrap();
            let m1 = correction_terms(&c, sigma, 1).unwrap();
            let m2 = correction_terms(&c, sigma, 2).unwrap();
            for dt in [0.02, 0.05, 0.1] {
                let mean = target + (theta0 - target) * (-a * dt).exp();
                let var = sigma * sigma * (1.0 - (-2.0 * a * dt).exp()) / (2.0 * a);
                let got_mean = theta0 + m1.value(theta0, dt);
                assert!((got_mean - mean).abs() < 0.01 * mean.abs());
                let want_second = (mean - theta0).powi(2) + var;
                let got_second = m2.value(theta0, dt);
                assert!((got_second - want_second).abs() < 0.01 * want_second, "order {order} dt {dt}");
            }
        }
    }

    #[test]
    fn zero_perturbation_and_consistency() {
        let c = coeffs(&[0.4, 0.0, 0.0, 0.0]);
        for m in 0..=4 {
            let e = correction_terms(&c, 0.0, m).unwrap();
            let t = e.terms_at(0.3, 0.5);
            assert!(t[1..].iter().all(|&v| v == 0.0));
            let base = base_moment(m, 0.3, &c, 0.0, 0.5).unwrap();
            assert!((e.value(0.3, 0.5) - base).abs() <= 1e-15 * base.abs().max(1.0));
        }
    }

    #[test]
    fn expected_output_identity_and_sigma_independence() {
        let m = QuadraticModel::new(array![0.1, -0.3], array![0.8, 0.5], array![0.6, -0.4], array![0.5, 0.2])
            .unwrap();
        let tb = 0.1;
        let d2 = m.derivatives(tb, 2);
        let c2 = drift_coefficients(&d2, m.y.view(), 1.0, 2, tb).unwrap();
        let ex: Vec<_> = (0..=2).map(|k| correction_terms(&c2, 0.3, k).unwrap()).collect();
        let theta = 0.35;
        let at0 = expected_output(&d2, &ex, theta, 0.0).unwrap();
        let taylor = m.output(theta);
        assert!((at0 - taylor).mapv(f64::abs).sum() < 1e-14);

        let d1 = m.derivatives(tb, 1);
        let c1 = drift_coefficients(&d1, m.y.view(), 1.0, 1, tb).unwrap();
        let lo: Vec<_> = (0..=1).map(|k| correction_terms(&c1, 0.0, k).unwrap()).collect();
        let hi: Vec<_> = (0..=1).map(|k| correction_terms(&c1, 0.9, k).unwrap()).collect();
        assert_eq!(
            expected_output(&d1, &lo, tb, 0.3).unwrap(),
            expected_output(&d1, &hi, tb, 0.3).unwrap()
        );
        assert!(matches!(expected_output(&d2, &lo, tb, 0.3), Err(Error::OrderMismatch(_))));
    }

    #[test]
    fn hessian_proxy_reduces_to_gauss_newton() {
        let g = array![1.0, -2.0, 0.5];
        let y = array![0.3, 0.1, -0.2];
        let y0 = array![0.0, 0.4, 0.2];
        let d1 = vec![y0.clone(), g.clone()];
        let c1 = drift_coefficients(&d1, y.view(), 0.5, 1, 0.0).unwrap();
        let m1: Vec<_> = (0..=0).map(|k| correction_terms(&c1, 0.7, k).unwrap()).collect();
        let h1 = expected_hessian_proxy(&d1, y.view(), &m1, 0.0, 0.4).unwrap();
        assert!((h1.total - g.dot(&g) / 3.0).abs() < 1e-15);
        assert_eq!(h1.sigma_part, 0.0);

        let d2 = vec![y0, g.clone(), Array1::zeros(3)];
        let c2 = drift_coefficients(&d2, y.view(), 0.5, 2, 0.0).unwrap();
        let m2: Vec<_> = (0..=2).map(|k| correction_terms(&c2, 0.7, k).unwrap()).collect();
        let h2 = expected_hessian_proxy(&d2, y.view(), &m2, 0.0, 0.4).unwrap();
        assert!((h2.total - h1.total).abs() < 1e-14);
    }

    #[test]
    fn hessian_polynomial_matches_finite_differences() {
        let m = QuadraticModel::new(array![0.1, -0.3], array![0.8, 0.5], array![0.6, -0.4], array![0.5, 0.2])
            .unwrap();
        let tb = -0.2;
        let c = hessian_polynomial(&m.derivatives(tb, 2), m.y.view()).unwrap();
        let loss = |th: f64| {
            let r = m.output(th) - &m.y;
            r.dot(&r) / 4.0
        };
        for th in [-0.5, 0.0, 0.7] {
            let h = 1e-4;
            let fd = (loss(th + h) - 2.0 * loss(th) + loss(th - h)) / (h * h);
            let x = th - tb;
            let poly: f64 = c.iter().rev().fold(0.0, |acc, &v| acc * x + v);
            assert!((fd - poly).abs() < 1e-6, "{fd} vs {poly}");
        }
    }

    #[test]
    fn pretty_and_csv() {
        let c = coeffs(&[0.1, 0.2]);
        let e = correction_terms(&c, 0.1, 1).unwrap();
        let text = e.pretty();
        assert!(text.starts_with("u_1^0 = x + mu0*dt\n"));
        assert!(text.contains("u_1^1 = mu1*x*dt + 1/2*mu0*mu1*dt^2"));
        let mut buf = Vec::new();
        write_term_csv(&mut buf, &[&e]).unwrap();
        let csv = String::from_utf8(buf).unwrap();
        assert!(csv.starts_with("moment,correction,coefficient,value,x,dt,mu0,"));
        assert_eq!(csv.lines().count(), 1 + 2 + 2);
    }
}
