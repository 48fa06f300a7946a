//! Fully connected scalar-output networks.
//!
//! Two parametrisations share one parameter layout:
//!
//! * `Standard`: `a^l = W^l z^{l-1} + b^l`, with `W ~ N(0, sigma_w^2 / n_{l-1})`
//!   and `b ~ N(0, sigma_b^2)` at initialisation.
//! * `Ntk`: `a^l = (sigma_w / sqrt(n_{l-1})) W^l z^{l-1} + sigma_b b^l`, with
//!   unit-variance `W` and `b`.
//!
//! The flat parameter vector is layer-major, weights before biases, and each
//! weight matrix is stored row-major with shape `(n_l, n_{l-1})` (row = output
//! unit). Hidden layers apply the activation; the read-out layer is linear.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::SeededRng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative; the ReLU kink at 0 gets derivative 0.
    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
            Activation::Identity => 1.0,
        }
    }

    /// Second derivative; zero for ReLU away from the kink.
    #[inline]
    pub fn second_derivative(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = x.tanh();
                -2.0 * t * (1.0 - t * t)
            }
            _ => 0.0,
        }
    }

    /// Whether the output restricted to one layer's weights is piecewise linear.
    pub fn is_piecewise_linear(self) -> bool {
        matches!(self, Activation::Relu | Activation::Identity)
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scaling {
    Standard,
    Ntk,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    /// `(n_0, ..., n_L)`, with `n_L = 1`.
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub scaling: Scaling,
    pub sigma_w: f64,
    pub sigma_b: f64,
}

impl Architecture {
    pub fn new(
        layer_sizes: Vec<usize>,
        activation: Activation,
        scaling: Scaling,
        sigma_w: f64,
        sigma_b: f64,
    ) -> Result<Self> {
        let arch = Self {
            layer_sizes,
            activation,
            scaling,
            sigma_w,
            sigma_b,
        };
        arch.validate()?;
        Ok(arch)
    }

    /// `n_0 -> width -> ... -> width -> 1` with `depth` weight layers.
    pub fn uniform(
        input: usize,
        width: usize,
        depth: usize,
        activation: Activation,
        scaling: Scaling,
        sigma_w: f64,
        sigma_b: f64,
    ) -> Result<Self> {
        let mut sizes = vec![input];
        sizes.extend(std::iter::repeat_n(width, depth.saturating_sub(1)));
        sizes.push(1);
        Self::new(sizes, activation, scaling, sigma_w, sigma_b)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(Error::InvalidInput("need at least one layer".into()));
        }
        if self.layer_sizes.contains(&0) {
            return Err(Error::InvalidInput("layer sizes must be positive".into()));
        }
        if *self.layer_sizes.last().unwrap() != 1 {
            return Err(Error::InvalidInput("output width must be 1".into()));
        }
        if !(self.sigma_w >= 0.0 && self.sigma_b >= 0.0) {
            return Err(Error::InvalidInput("sigma_w and sigma_b must be >= 0".into()));
        }
        Ok(())
    }

    /// Number of weight layers `L`.
    pub fn depth(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn num_params(&self) -> usize {
        self.layer_sizes
            .windows(2)
            .map(|w| (w[0] + 1) * w[1])
            .sum()
    }

    /// Forward-pass multipliers `(weight, bias)` of layer `l` (0-based).
    pub fn layer_scales(&self, l: usize) -> (f64, f64) {
        match self.scaling {
            Scaling::Standard => (1.0, 1.0),
            Scaling::Ntk => (
                self.sigma_w / (self.layer_sizes[l] as f64).sqrt(),
                self.sigma_b,
            ),
        }
    }

    /// Offsets `(weights, bias, end)` of layer `l` in the flat vector.
    pub fn layer_offsets(&self, l: usize) -> (usize, usize, usize) {
        let start: usize = self.layer_sizes[..=l]
            .windows(2)
            .map(|w| (w[0] + 1) * w[1])
            .sum();
        let (n_in, n_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
        (start, start + n_in * n_out, start + (n_in + 1) * n_out)
    }
}

/// All weights and biases as one flat vector laid out per [`Architecture`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkParams {
    layer_sizes: Vec<usize>,
    flat: Vec<f64>,
}

impl NetworkParams {
    pub fn zeros(arch: &Architecture) -> Self {
        Self {
            layer_sizes: arch.layer_sizes.clone(),
            flat: vec![0.0; arch.num_params()],
        }
    }

    pub fn from_flat(arch: &Architecture, flat: Vec<f64>) -> Result<Self> {
        if flat.len() != arch.num_params() {
            return Err(Error::DimensionMismatch {
                context: "NetworkParams::from_flat",
                expected: arch.num_params(),
                found: flat.len(),
            });
        }
        Ok(Self {
            layer_sizes: arch.layer_sizes.clone(),
            flat,
        })
    }

    pub fn len(&self) -> usize {
        self.flat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flat.is_empty()
    }

    pub fn flat(&self) -> &[f64] {
        &self.flat
    }

    pub fn flat_mut(&mut self) -> &mut [f64] {
        &mut self.flat
    }

    pub fn to_array(&self) -> Array1<f64> {
        Array1::from(self.flat.clone())
    }

    pub fn into_flat(self) -> Vec<f64> {
        self.flat
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    fn offsets(&self, l: usize) -> (usize, usize, usize) {
        let start: usize = self.layer_sizes[..=l]
            .windows(2)
            .map(|w| (w[0] + 1) * w[1])
            .sum();
        let (n_in, n_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
        (start, start + n_in * n_out, start + (n_in + 1) * n_out)
    }

    pub fn weights(&self, l: usize) -> ArrayView2<'_, f64> {
        let (w, b, _) = self.offsets(l);
        ArrayView2::from_shape((self.layer_sizes[l + 1], self.layer_sizes[l]), &self.flat[w..b])
            .expect("layout")
    }

    pub fn bias(&self, l: usize) -> ArrayView1<'_, f64> {
        let (_, b, e) = self.offsets(l);
        ArrayView1::from(&self.flat[b..e])
    }

    pub fn weights_mut(&mut self, l: usize) -> ArrayViewMut2<'_, f64> {
        let (w, b, _) = self.offsets(l);
        let shape = (self.layer_sizes[l + 1], self.layer_sizes[l]);
        ArrayViewMut2::from_shape(shape, &mut self.flat[w..b]).expect("layout")
    }

    pub fn bias_mut(&mut self, l: usize) -> ArrayViewMut1<'_, f64> {
        let (_, b, e) = self.offsets(l);
        ArrayViewMut1::from(&mut self.flat[b..e])
    }

    /// `self + step * direction`.
    pub fn offset_by(&self, direction: ArrayView1<f64>, step: f64) -> Self {
        let mut out = self.clone();
        for (p, d) in out.flat.iter_mut().zip(direction.iter()) {
            *p += step * d;
        }
        out
    }

    fn check(&self, arch: &Architecture) -> Result<()> {
        if self.layer_sizes != arch.layer_sizes {
            return Err(Error::InvalidInput(format!(
                "parameters built for {:?}, architecture is {:?}",
                self.layer_sizes, arch.layer_sizes
            )));
        }
        Ok(())
    }
}

/// Draws initial parameters in layer-major flat order.
pub fn init_params(arch: &Architecture, rng: &mut SeededRng) -> NetworkParams {
    let mut params = NetworkParams::zeros(arch);
    for l in 0..arch.depth() {
        let (ws, bs) = match arch.scaling {
            Scaling::Standard => (arch.sigma_w / (arch.layer_sizes[l] as f64).sqrt(), arch.sigma_b),
            Scaling::Ntk => (1.0, 1.0),
        };
        params.weights_mut(l).iter_mut().for_each(|w| *w = ws * rng.normal());
        params.bias_mut(l).iter_mut().for_each(|b| *b = bs * rng.normal());
    }
    params
}

/// Activations kept from a batched forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    /// `z^0 = X, z^1, ..., z^{L-1}`, each `batch x n_l`.
    pub inputs: Vec<Array2<f64>>,
    /// Pre-activations `a^1, ..., a^L`.
    pub pre: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> Array1<f64> {
        self.pre.last().unwrap().column(0).to_owned()
    }
}

pub fn forward_cache(
    params: &NetworkParams,
    arch: &Architecture,
    x: ArrayView2<f64>,
) -> Result<ForwardCache> {
    params.check(arch)?;
    if x.ncols() != arch.input_dim() {
        return Err(Error::DimensionMismatch {
            context: "forward",
            expected: arch.input_dim(),
            found: x.ncols(),
        });
    }
    let depth = arch.depth();
    let mut inputs = Vec::with_capacity(depth);
    let mut pre = Vec::with_capacity(depth);
    let mut z = x.to_owned();
    for l in 0..depth {
        let (ws, bs) = arch.layer_scales(l);
        let mut a = z.dot(&params.weights(l).t());
        if ws != 1.0 {
            a *= ws;
        }
        let b = params.bias(l);
        for mut row in a.rows_mut() {
            row.scaled_add(bs, &b);
        }
        let next = if l + 1 < depth {
            a.mapv(|v| arch.activation.apply(v))
        } else {
            Array2::zeros((0, 0))
        };
        inputs.push(z);
        pre.push(a);
        z = next;
    }
    Ok(ForwardCache { inputs, pre })
}

pub fn forward_batch(
    params: &NetworkParams,
    arch: &Architecture,
    x: ArrayView2<f64>,
) -> Result<Array1<f64>> {
    Ok(forward_cache(params, arch, x)?.output())
}

pub fn forward(params: &NetworkParams, arch: &Architecture, x: ArrayView1<f64>) -> Result<f64> {
    let xs = x.insert_axis(Axis(0));
    Ok(forward_batch(params, arch, xs)?[0])
}

/// Backpropagates per-sample output cotangents, returning `delta^l = c_i d yhat_i / d a^l`
/// for every layer (`batch x n_l`).
pub fn backward_deltas(
    params: &NetworkParams,
    arch: &Architecture,
    cache: &ForwardCache,
    cot: ArrayView1<f64>,
) -> Vec<Array2<f64>> {
    let depth = arch.depth();
    let mut deltas = vec![Array2::zeros((0, 0)); depth];
    let mut delta = cot.to_owned().insert_axis(Axis(1));
    for l in (0..depth).rev() {
        if l > 0 {
            let (ws, _) = arch.layer_scales(l);
            let mut prev = delta.dot(&params.weights(l));
            let act = arch.activation;
            ndarray::Zip::from(&mut prev)
                .and(&cache.pre[l - 1])
                .for_each(|d, &a| *d *= ws * act.derivative(a));
            deltas[l] = delta;
            delta = prev;
        } else {
            deltas[l] = std::mem::take(&mut delta);
        }
    }
    deltas
}

/// `sum_i cot_i * grad_theta yhat(x_i)`, flat.
pub fn vjp(
    params: &NetworkParams,
    arch: &Architecture,
    cache: &ForwardCache,
    cot: ArrayView1<f64>,
) -> Array1<f64> {
    let deltas = backward_deltas(params, arch, cache, cot);
    let mut grad = Array1::zeros(arch.num_params());
    for (l, delta) in deltas.iter().enumerate() {
        let (ws, bs) = arch.layer_scales(l);
        let (w0, b0, e0) = arch.layer_offsets(l);
        let gw = delta.t().dot(&cache.inputs[l]) * ws;
        grad.slice_mut(s![w0..b0])
            .assign(&Array1::from_iter(gw.iter().copied()));
        grad.slice_mut(s![b0..e0]).assign(&(delta.sum_axis(Axis(0)) * bs));
    }
    grad
}

/// Gradient of `yhat(x)` with respect to the flat parameters.
pub fn param_gradient(
    params: &NetworkParams,
    arch: &Architecture,
    x: ArrayView1<f64>,
) -> Result<Array1<f64>> {
    let cache = forward_cache(params, arch, x.insert_axis(Axis(0)))?;
    Ok(vjp(params, arch, &cache, ndarray::aview1(&[1.0])))
}

/// Per-sample gradients as rows of an `N x d` matrix.
pub fn jacobian(
    params: &NetworkParams,
    arch: &Architecture,
    x: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    let cache = forward_cache(params, arch, x)?;
    let n = x.nrows();
    let deltas = backward_deltas(params, arch, &cache, Array1::ones(n).view());
    let mut jac = Array2::zeros((n, arch.num_params()));
    for (l, delta) in deltas.iter().enumerate() {
        let (ws, bs) = arch.layer_scales(l);
        let (w0, b0, _) = arch.layer_offsets(l);
        let (n_out, n_in) = (arch.layer_sizes[l + 1], arch.layer_sizes[l]);
        for i in 0..n {
            let z = cache.inputs[l].row(i);
            let d = delta.row(i);
            let mut row = jac.row_mut(i);
            for o in 0..n_out {
                let dw = ws * d[o];
                let mut block = row.slice_mut(s![w0 + o * n_in..w0 + (o + 1) * n_in]);
                block.scaled_add(dw, &z);
                row[b0 + o] = bs * d[o];
            }
        }
    }
    Ok(jac)
}

/// Mean-squared loss `(1/2N) ||yhat - y||^2` and its flat gradient.
pub fn loss_and_gradient(
    params: &NetworkParams,
    arch: &Architecture,
    x: ArrayView2<f64>,
    y: ArrayView1<f64>,
) -> Result<(f64, Array1<f64>)> {
    if x.nrows() == 0 {
        return Err(Error::InvalidInput("empty dataset".into()));
    }
    let cache = forward_cache(params, arch, x)?;
    let resid = cache.output() - y;
    let n = x.nrows() as f64;
    let loss = resid.dot(&resid) / (2.0 * n);
    let grad = vjp(params, arch, &cache, (resid / n).view());
    Ok((loss, grad))
}

/// Gradient of `yhat` with respect to the input.
pub fn input_jacobian(
    params: &NetworkParams,
    arch: &Architecture,
    x: ArrayView1<f64>,
) -> Result<Array1<f64>> {
    let cache = forward_cache(params, arch, x.insert_axis(Axis(0)))?;
    let deltas = backward_deltas(params, arch, &cache, ndarray::aview1(&[1.0]));
    let (ws, _) = arch.layer_scales(0);
    Ok(deltas[0].row(0).dot(&params.weights(0)) * ws)
}

/// The network restricted to the line `base + s * direction`.
#[derive(Clone, Debug)]
pub struct ScalarSlice {
    pub base: NetworkParams,
    pub direction: Array1<f64>,
    pub offset: f64,
}

impl ScalarSlice {
    pub fn new(base: NetworkParams, direction: Array1<f64>, offset: f64) -> Result<Self> {
        if direction.len() != base.len() {
            return Err(Error::DimensionMismatch {
                context: "ScalarSlice::new",
                expected: base.len(),
                found: direction.len(),
            });
        }
        let norm = direction.dot(&direction).sqrt();
        if (norm - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidInput(format!("direction norm {norm} is not 1")));
        }
        Ok(Self {
            base,
            direction,
            offset,
        })
    }

    /// Normalises `direction` first. Fails on a zero direction.
    pub fn along(base: NetworkParams, direction: ArrayView1<f64>) -> Result<Self> {
        let norm = direction.dot(&direction).sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::InvalidInput("direction must be nonzero".into()));
        }
        Self::new(base, direction.mapv(|v| v / norm), 0.0)
    }

    pub fn params_at(&self, s: f64) -> NetworkParams {
        self.base.offset_by(self.direction.view(), s)
    }
}

/// Relative finite-difference steps per derivative order.
const SLICE_STEPS: [f64; 5] = [0.0, 0.0, 1e-3, 5e-3, 2e-2];

/// `(d/ds)^k yhat(base + s v)` at the slice offset, for `k = 0..=max_order`.
///
/// Order 1 is exact (gradient dotted with the direction). Orders 2 to 4 use
/// central differences with one level of Richardson extrapolation, which
/// are tested against the derivatives of polynomial slices.
pub fn slice_derivatives(
    slice: &ScalarSlice,
    arch: &Architecture,
    x: ArrayView1<f64>,
    max_order: usize,
) -> Result<Vec<f64>> {
    if max_order > 4 {
        return Err(Error::InvalidInput(format!("max_order {max_order} > 4")));
    }
    let s0 = slice.offset;
    let at = |s: f64| forward(&slice.params_at(s), arch, x);
    let mut out = vec![at(s0)?];
    if max_order >= 1 {
        let g = param_gradient(&slice.params_at(s0), arch, x)?;
        out.push(g.dot(&slice.direction));
    }
    for k in 2..=max_order {
        let h = SLICE_STEPS[k] * (1.0 + s0.abs());
        if s0 + h == s0 || !h.is_finite() {
            return Err(Error::StepUnderflow { offset: s0, order: k });
        }
        let d_h = central_difference(&at, s0, h, k)?;
        let d_h2 = central_difference(&at, s0, h / 2.0, k)?;
        let v = (4.0 * d_h2 - d_h) / 3.0;
        if !v.is_finite() {
            return Err(Error::StepUnderflow { offset: s0, order: k });
        }
        out.push(v);
    }
    Ok(out)
}

/// Value, first and second derivative of `s -> yhat(params + s v)` at
/// `s = 0` for every row of `x`, by exact second-order forward mode.
pub fn directional_derivatives(
    params: &NetworkParams,
    arch: &Architecture,
    x: ArrayView2<f64>,
    direction: ArrayView1<f64>,
) -> Result<[Array1<f64>; 3]> {
    let dir = NetworkParams::from_flat(arch, direction.to_vec())?;
    let cache = forward_cache(params, arch, x)?;
    let act = arch.activation;
    let mut z1 = Array2::<f64>::zeros(x.raw_dim());
    let mut z2 = Array2::<f64>::zeros(x.raw_dim());
    let depth = arch.depth();
    let (mut a1, mut a2) = (z1.clone(), z2.clone());
    for l in 0..depth {
        let (ws, bs) = arch.layer_scales(l);
        let (w, dw) = (params.weights(l), dir.weights(l));
        let z = &cache.inputs[l];
        a1 = (z.dot(&dw.t()) + z1.dot(&w.t())) * ws;
        let db = dir.bias(l);
        for mut row in a1.rows_mut() {
            row.scaled_add(bs, &db);
        }
        a2 = (z1.dot(&dw.t()) * 2.0 + z2.dot(&w.t())) * ws;
        if l + 1 < depth {
            let a = &cache.pre[l];
            z2 = Array2::from_shape_fn(a.raw_dim(), |ij| {
                act.second_derivative(a[ij]) * a1[ij] * a1[ij] + act.derivative(a[ij]) * a2[ij]
            });
            z1 = Array2::from_shape_fn(a.raw_dim(), |ij| act.derivative(a[ij]) * a1[ij]);
        }
    }
    Ok([cache.output(), a1.column(0).to_owned(), a2.column(0).to_owned()])
}

fn central_difference(
    f: &impl Fn(f64) -> Result<f64>,
    s: f64,
    h: f64,
    order: usize,
) -> Result<f64> {
    Ok(match order {
        2 => (f(s + h)? - 2.0 * f(s)? + f(s - h)?) / (h * h),
        3 => {
            (f(s + 2.0 * h)? - 2.0 * f(s + h)? + 2.0 * f(s - h)? - f(s - 2.0 * h)?)
                / (2.0 * h * h * h)
        }
        4 => {
            (f(s + 2.0 * h)? - 4.0 * f(s + h)? + 6.0 * f(s)? - 4.0 * f(s - h)?
                + f(s - 2.0 * h)?)
                / (h * h * h * h)
        }
        _ => unreachable!("orders 2..=4 only"),
    })
}

/// How the trace of a layer's weight Hessian is evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum TraceMode {
    /// Central differences of the loss gradient along every coordinate.
    Exact,
    /// Rademacher probes through finite-difference Hessian-vector products.
    Hutchinson { probes: usize, seed: u64 },
    /// `(1/N) sum_i ||grad_W yhat_i||^2`. Equals the Hessian trace almost
    /// everywhere for ReLU and identity activations, where the output is
    /// piecewise linear in any single layer's weights.
    GaussNewton,
    /// `Exact` up to [`EXACT_TRACE_LIMIT`] parameters, `Hutchinson` above.
    Auto,
}

pub const EXACT_TRACE_LIMIT: usize = 5000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEstimate {
    pub value: f64,
    /// Zero for the deterministic modes.
    pub std_error: f64,
}

/// Trace of `d^2 L / dW^2` for the weights of `layer` (biases excluded unless
/// `include_bias`), with `L = (1/2N) ||yhat(X) - Y||^2`.
pub fn layer_hessian_trace(
    params: &NetworkParams,
    arch: &Architecture,
    x: ArrayView2<f64>,
    y: ArrayView1<f64>,
    layer: usize,
    include_bias: bool,
    mode: TraceMode,
) -> Result<TraceEstimate> {
    if layer >= arch.depth() {
        return Err(Error::LayerOutOfRange {
            layer,
            layers: arch.depth(),
        });
    }
    if x.nrows() == 0 {
        return Err(Error::InvalidInput("empty dataset".into()));
    }
    if x.nrows() != y.len() {
        return Err(Error::DimensionMismatch {
            context: "layer_hessian_trace",
            expected: x.nrows(),
            found: y.len(),
        });
    }
    let (w0, b0, e0) = arch.layer_offsets(layer);
    let block = w0..if include_bias { e0 } else { b0 };
    let mode = match mode {
        TraceMode::Auto if block.len() <= EXACT_TRACE_LIMIT => TraceMode::Exact,
        TraceMode::Auto => TraceMode::Hutchinson {
            probes: 200,
            seed: 0,
        },
        m => m,
    };
    let grad_at = |p: &NetworkParams| loss_and_gradient(p, arch, x, y).map(|(_, g)| g);

    match mode {
        TraceMode::Exact => {
            let mut trace = 0.0;
            let mut p = params.clone();
            for c in block {
                let w = params.flat[c];
                let h = 1e-4 * (1.0 + w.abs());
                p.flat[c] = w + h;
                let gp = grad_at(&p)?[c];
                p.flat[c] = w - h;
                let gm = grad_at(&p)?[c];
                p.flat[c] = w;
                trace += (gp - gm) / (2.0 * h);
            }
            Ok(TraceEstimate {
                value: trace,
                std_error: 0.0,
            })
        }
        TraceMode::Hutchinson { probes, seed } => {
            if probes < 2 {
                return Err(Error::InvalidInput("Hutchinson needs >= 2 probes".into()));
            }
            let mut rng = SeededRng::new(seed, layer as u64);
            let scale = params.flat[block.clone()]
                .iter()
                .fold(0.0f64, |m, v| m.max(v.abs()));
            let h = 1e-4 * (1.0 + scale);
            let mut samples = Vec::with_capacity(probes);
            for _ in 0..probes {
                let mut z = Array1::<f64>::zeros(params.len());
                for c in block.clone() {
                    z[c] = if rand::Rng::random::<bool>(&mut rng) { 1.0 } else { -1.0 };
                }
                let gp = grad_at(&params.offset_by(z.view(), h))?;
                let gm = grad_at(&params.offset_by(z.view(), -h))?;
                let hz = (gp - gm) / (2.0 * h);
                samples.push(z.dot(&hz));
            }
            let (mean, se) = mean_and_se(&samples);
            Ok(TraceEstimate {
                value: mean,
                std_error: se,
            })
        }
        TraceMode::GaussNewton => {
            let cache = forward_cache(params, arch, x)?;
            let n = x.nrows();
            let deltas = backward_deltas(params, arch, &cache, Array1::ones(n).view());
            let (ws, bs) = arch.layer_scales(layer);
            let d = &deltas[layer];
            let z = &cache.inputs[layer];
            let mut total = 0.0;
            for i in 0..n {
                let dd = d.row(i).dot(&d.row(i));
                let zz = z.row(i).dot(&z.row(i));
                total += ws * ws * dd * zz;
                if include_bias {
                    total += bs * bs * dd;
                }
            }
            Ok(TraceEstimate {
                value: total / n as f64,
                std_error: 0.0,
            })
        }
        TraceMode::Auto => unreachable!(),
    }
}

pub(crate) fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}
