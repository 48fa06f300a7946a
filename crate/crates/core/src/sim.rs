//! Simulation oracles and trainers.
//!
//! Trainers map continuous time to iterations one-to-one, with the learning
//! rate inside the update: `theta_{k+1} = theta_k - eta g_k`.

use std::io::Write;
use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::network::{self, Architecture, NetworkParams, TraceEstimate, TraceMode};
use crate::numerics::SeededRng;

/// `d theta = drift(theta) dt + sigma dW`, started at `theta0`.
pub struct ScalarSde<F> {
    pub drift: F,
    pub sigma: f64,
    pub theta0: f64,
}

impl<F: Fn(f64) -> f64 + Sync> ScalarSde<F> {
    pub fn new(drift: F, sigma: f64, theta0: f64) -> Result<Self> {
        if !(sigma >= 0.0) || !sigma.is_finite() || !theta0.is_finite() {
            return Err(Error::InvalidInput(format!("sde sigma {sigma}, theta0 {theta0}")));
        }
        Ok(Self { drift, sigma, theta0 })
    }
}

/// Paths whose state leaves this bound are dropped.
pub const OVERFLOW_BOUND: f64 = 1e100;
/// Highest raw moment estimated.
pub const MAX_SIM_MOMENT: usize = 6;

/// Terminal states of an Euler-Maruyama ensemble.
#[derive(Clone, Debug)]
pub struct TerminalSample {
    /// Terminal states of the kept paths, in path order.
    pub values: Vec<f64>,
    /// Terminal states on the doubled-step grid driven by the same noise, if
    /// a coupled run was requested.
    pub coarse: Option<Vec<f64>>,
    pub excluded: usize,
    pub step: f64,
}

/// An ensemble mean with its Monte-Carlo standard error and, for coupled
/// runs, the weak discretisation error estimate `|E_h[f] - E_{2h}[f]|`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_error: f64,
    pub bias: f64,
}

impl Estimate {
    /// `sqrt(std_error^2 + bias^2)`.
    pub fn error_bar(&self) -> f64 {
        self.std_error.hypot(self.bias)
    }
}

impl TerminalSample {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Ensemble estimate of `E[f(theta_T)]`.
    pub fn estimate(&self, f: impl Fn(f64) -> f64) -> Estimate {
        let fine: Vec<f64> = self.values.iter().map(|&v| f(v)).collect();
        let (mean, std_error) = network::mean_and_se(&fine);
        let bias = match &self.coarse {
            Some(c) => {
                let diff: Vec<f64> = fine.iter().zip(c).map(|(a, &b)| a - f(b)).collect();
                network::mean_and_se(&diff).0.abs()
            }
            None => 0.0,
        };
        Estimate { mean, std_error, bias }
    }
}

/// Raw moments `E[(theta_T - center)^m]`, `m = 0..=6`, with standard errors.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MomentEstimate {
    pub center: f64,
    pub moments: Vec<Estimate>,
    pub n_paths: usize,
    pub excluded: usize,
}

fn step_count(dt: f64, horizon: f64) -> Result<usize> {
    if !(dt > 0.0) || !(horizon > 0.0) {
        return Err(Error::InvalidInput(format!("step {dt}, horizon {horizon}")));
    }
    if dt > horizon / 10.0 * (1.0 + 1e-12) {
        return Err(Error::InvalidInput(format!(
            "step {dt} coarser than a tenth of the horizon {horizon}"
        )));
    }
    let steps = (horizon / dt).round() as usize;
    if ((steps as f64) * dt - horizon).abs() > 1e-9 * horizon {
        return Err(Error::InvalidInput(format!("horizon {horizon} is not a multiple of step {dt}")));
    }
    Ok(steps)
}

/// Euler-Maruyama terminal states. Path `p` draws its increments from
/// stream `rng.stream() + p`, so results do not depend on scheduling. With
/// `coupled`, every path is also advanced on the grid of step `2 dt` using
/// the pairwise sums of the same increments (the step count must be even).
pub fn simulate_terminal<F: Fn(f64) -> f64 + Sync>(
    sde: &ScalarSde<F>,
    dt: f64,
    horizon: f64,
    n_paths: usize,
    rng: &SeededRng,
    coupled: bool,
) -> Result<TerminalSample> {
    let steps = step_count(dt, horizon)?;
    if n_paths < 100 {
        return Err(Error::InvalidInput(format!("{n_paths} paths, need at least 100")));
    }
    if coupled && steps % 2 != 0 {
        return Err(Error::InvalidInput("coupled run needs an even step count".into()));
    }
    let h = horizon / steps as f64;
    let sq = h.sqrt();
    let sigma = sde.sigma;
    let paths: Vec<Option<(f64, f64)>> = (0..n_paths)
        .into_par_iter()
        .map(|p| {
            let mut r = rng.fork(rng.stream().wrapping_add(p as u64));
            let mut fine = sde.theta0;
            let mut coarse = sde.theta0;
            let mut pending = 0.0;
            for k in 0..steps {
                let dw = if sigma > 0.0 { sq * r.normal() } else { 0.0 };
                fine += (sde.drift)(fine) * h + sigma * dw;
                if coupled {
                    pending += dw;
                    if k % 2 == 1 {
                        coarse += (sde.drift)(coarse) * 2.0 * h + sigma * pending;
                        pending = 0.0;
                    }
                }
                if !fine.is_finite() || fine.abs() > OVERFLOW_BOUND {
                    return None;
                }
            }
            if coupled && (!coarse.is_finite() || coarse.abs() > OVERFLOW_BOUND) {
                return None;
            }
            Some((fine, coarse))
        })
        .collect();
    let excluded = paths.iter().filter(|p| p.is_none()).count();
    if excluded * 100 > n_paths {
        return Err(Error::ExcessiveExclusions {
            excluded,
            total: n_paths,
        });
    }
    if excluded > 0 {
        log::warn!("{excluded} of {n_paths} paths overflowed and were dropped");
    }
    let kept: Vec<(f64, f64)> = paths.into_iter().flatten().collect();
    Ok(TerminalSample {
        values: kept.iter().map(|p| p.0).collect(),
        coarse: coupled.then(|| kept.iter().map(|p| p.1).collect()),
        excluded,
        step: h,
    })
}

/// Ensemble estimates of `E[(theta_T - theta0)^m]` for `m <= 6`.
pub fn euler_maruyama<F: Fn(f64) -> f64 + Sync>(
    sde: &ScalarSde<F>,
    dt: f64,
    horizon: f64,
    n_paths: usize,
    rng: &SeededRng,
) -> Result<MomentEstimate> {
    let sample = simulate_terminal(sde, dt, horizon, n_paths, rng, false)?;
    Ok(moment_estimate(&sample, sde.theta0))
}

pub fn moment_estimate(sample: &TerminalSample, center: f64) -> MomentEstimate {
    MomentEstimate {
        center,
        moments: (0..=MAX_SIM_MOMENT)
            .map(|m| sample.estimate(|v| (v - center).powi(m as i32)))
            .collect(),
        n_paths: sample.len(),
        excluded: sample.excluded,
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BatchSize {
    #[default]
    Full,
    Size(usize),
}

impl BatchSize {
    pub fn resolve(self, n: usize) -> Result<usize> {
        match self {
            BatchSize::Full => Ok(n),
            BatchSize::Size(m) if (1..=n).contains(&m) => Ok(m),
            BatchSize::Size(m) => Err(Error::InvalidInput(format!("batch size {m} outside 1..={n}"))),
        }
    }
}

impl Serialize for BatchSize {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            BatchSize::Full => s.serialize_str("full"),
            BatchSize::Size(m) => s.serialize_u64(*m as u64),
        }
    }
}

impl<'de> Deserialize<'de> for BatchSize {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Size(u64),
            Name(String),
        }
        match Raw::deserialize(d)? {
            Raw::Size(m) => Ok(BatchSize::Size(m as usize)),
            Raw::Name(s) if s == "full" => Ok(BatchSize::Full),
            Raw::Name(s) => Err(serde::de::Error::custom(format!(
                "batch must be \"full\" or a positive integer, got {s:?}"
            ))),
        }
    }
}

/// Which iterations get a log entry. The final iteration is always logged.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogSchedule {
    /// 0, 1, 2, 4, 8, ...
    #[default]
    Geometric,
    Every(usize),
}

impl LogSchedule {
    pub fn iterations(self, iters: usize) -> Vec<usize> {
        let mut out = match self {
            LogSchedule::Geometric => {
                let mut v = vec![0];
                let mut k = 1;
                while k < iters {
                    v.push(k);
                    k *= 2;
                }
                v
            }
            LogSchedule::Every(step) => (0..iters).step_by(step.max(1)).collect(),
        };
        out.push(iters);
        out.dedup();
        out
    }
}

fn default_hessian_mode() -> TraceMode {
    TraceMode::GaussNewton
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub eta: f64,
    pub iters: usize,
    /// Pull towards initialisation, `-(eta/N) lambda (theta - theta_0)`.
    #[serde(default)]
    pub lambda: f64,
    /// Function-space noise: each step uses residuals `yhat - Y + eps`,
    /// `eps ~ N(0, sigma^2)` per training point.
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub batch: BatchSize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub log: LogSchedule,
    /// Layers whose weight Hessian trace is logged.
    #[serde(default)]
    pub hessian_layers: Vec<usize>,
    #[serde(default = "default_hessian_mode")]
    pub hessian_mode: TraceMode,
    /// Training rows whose outputs are logged.
    #[serde(default)]
    pub probe_points: Vec<usize>,
    /// Keep parameter snapshots at every log point.
    #[serde(default)]
    pub keep_snapshots: bool,
}

impl TrainConfig {
    pub fn new(eta: f64, iters: usize) -> Self {
        Self {
            eta,
            iters,
            lambda: 0.0,
            noise_sigma: 0.0,
            batch: BatchSize::Full,
            seed: 0,
            log: LogSchedule::Geometric,
            hessian_layers: Vec::new(),
            hessian_mode: TraceMode::GaussNewton,
            probe_points: Vec::new(),
            keep_snapshots: false,
        }
    }

    pub fn validate(&self, n_train: usize) -> Result<()> {
        if !(self.eta >= 0.0) || !self.eta.is_finite() {
            return Err(Error::InvalidInput(format!("learning rate {}", self.eta)));
        }
        if self.iters == 0 {
            return Err(Error::InvalidInput("iters must be at least 1".into()));
        }
        if !(self.lambda >= 0.0) || !(self.noise_sigma >= 0.0) {
            return Err(Error::InvalidInput("lambda and noise_sigma must be nonnegative".into()));
        }
        self.batch.resolve(n_train)?;
        if let Some(&p) = self.probe_points.iter().find(|&&p| p >= n_train) {
            return Err(Error::InvalidInput(format!("probe point {p} outside training set")));
        }
        Ok(())
    }
}

/// Borrowed train and optional test split.
#[derive(Clone, Copy, Debug)]
pub struct TrainData<'a> {
    pub x: ArrayView2<'a, f64>,
    pub y: ArrayView1<'a, f64>,
    pub x_test: Option<ArrayView2<'a, f64>>,
    pub y_test: Option<ArrayView1<'a, f64>>,
}

impl<'a> TrainData<'a> {
    pub fn train_only(x: ArrayView2<'a, f64>, y: ArrayView1<'a, f64>) -> Self {
        Self { x, y, x_test: None, y_test: None }
    }

    pub fn n_train(&self) -> usize {
        self.y.len()
    }

    fn check(&self) -> Result<()> {
        if self.x.nrows() == 0 {
            return Err(Error::InvalidInput("empty training set".into()));
        }
        crate::numerics::check_len("TrainData", self.x.nrows(), self.y.len())?;
        match (self.x_test, self.y_test) {
            (Some(x), Some(y)) => crate::numerics::check_len("TrainData test", x.nrows(), y.len()),
            (None, None) => Ok(()),
            _ => Err(Error::InvalidInput("test inputs and targets must come together".into())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub iteration: usize,
    pub train_mse: f64,
    pub test_mse: Option<f64>,
    pub probe_outputs: Vec<f64>,
    /// One per entry of `hessian_layers`.
    pub hessian_traces: Vec<TraceEstimate>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub iteration: usize,
    pub params: NetworkParams,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: TrainConfig,
    pub architecture: Architecture,
    /// Function-space noise and minibatch order streams derive from this.
    pub seed: u64,
    pub entries: Vec<LogEntry>,
    #[serde(skip)]
    pub snapshots: Vec<Snapshot>,
    #[serde(skip)]
    pub final_params: Option<NetworkParams>,
    /// Seconds since the start of training at each log entry.
    #[serde(skip)]
    pub wall_time: Vec<f64>,
}

impl RunRecord {
    pub fn last(&self) -> &LogEntry {
        self.entries.last().expect("a run logs at least its final iteration")
    }

    pub fn final_params(&self) -> &NetworkParams {
        self.final_params.as_ref().expect("trainers always set final parameters")
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// `iteration,train_mse,test_mse,trace_<layer>...,probe_<row>...`.
pub fn write_trajectory_csv<W: Write>(mut out: W, run: &RunRecord) -> Result<()> {
    let mut header = vec!["iteration".to_string(), "train_mse".into(), "test_mse".into()];
    header.extend(run.config.hessian_layers.iter().map(|l| format!("trace_{l}")));
    header.extend(run.config.probe_points.iter().map(|p| format!("probe_{p}")));
    writeln!(out, "{}", header.join(","))?;
    for e in &run.entries {
        let mut row = vec![
            e.iteration.to_string(),
            format!("{:.16e}", e.train_mse),
            e.test_mse.map_or_else(String::new, |v| format!("{v:.16e}")),
        ];
        row.extend(e.hessian_traces.iter().map(|t| format!("{:.16e}", t.value)));
        row.extend(e.probe_outputs.iter().map(|v| format!("{v:.16e}")));
        writeln!(out, "{}", row.join(","))?;
    }
    Ok(())
}

/// Loss above which training is declared divergent.
pub const DIVERGENCE_LOSS: f64 = 1e6;

const NOISE_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 2;

/// Minibatch indices drawn without replacement, reshuffled every epoch.
/// Rows left over at the end of an epoch (when `M` does not divide `N`) are
/// dropped for that epoch. With `M = N` the natural order is used.
pub struct EpochSampler {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: SeededRng,
}

impl EpochSampler {
    pub fn new(n: usize, batch: usize, rng: SeededRng) -> Self {
        let mut s = Self {
            order: (0..n).collect(),
            pos: n,
            batch,
            rng,
        };
        if batch == n {
            s.pos = 0;
        }
        s
    }

    pub fn next_batch(&mut self) -> &[usize] {
        let n = self.order.len();
        if self.batch == n {
            return &self.order;
        }
        if self.pos + self.batch > n {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let b = &self.order[self.pos..self.pos + self.batch];
        self.pos += self.batch;
        b
    }
}

/// `(1/M) sum_{i in batch} (yhat_i - y_i) grad yhat_i` and the batch loss.
pub fn minibatch_gradient(
    params: &NetworkParams,
    arch: &Architecture,
    x: ArrayView2<f64>,
    y: ArrayView1<f64>,
    batch: &[usize],
) -> Result<(f64, Array1<f64>)> {
    let xb = x.select(Axis(0), batch);
    let yb = y.select(Axis(0), batch);
    network::loss_and_gradient(params, arch, xb.view(), yb.view())
}

fn log_entry(
    params: &NetworkParams,
    arch: &Architecture,
    data: &TrainData,
    cfg: &TrainConfig,
    iteration: usize,
) -> Result<LogEntry> {
    let out = network::forward_batch(params, arch, data.x)?;
    let train_mse = crate::metrics::mse(out.view(), data.y)?;
    let test_mse = match (data.x_test, data.y_test) {
        (Some(x), Some(y)) => Some(crate::metrics::mse(network::forward_batch(params, arch, x)?.view(), y)?),
        _ => None,
    };
    let hessian_traces = cfg
        .hessian_layers
        .iter()
        .map(|&l| network::layer_hessian_trace(params, arch, data.x, data.y, l, false, cfg.hessian_mode))
        .collect::<Result<_>>()?;
    Ok(LogEntry {
        iteration,
        train_mse,
        test_mse,
        probe_outputs: cfg.probe_points.iter().map(|&p| out[p]).collect(),
        hessian_traces,
    })
}

/// General trainer: minibatch `M`, pull `lambda` and function-space noise
/// `noise_sigma` all at once. The named trainers below fix the knobs they do
/// not use.
pub fn train(
    params: &NetworkParams,
    arch: &Architecture,
    data: &TrainData,
    cfg: &TrainConfig,
) -> Result<RunRecord> {
    data.check()?;
    cfg.validate(data.n_train())?;
    let n = data.n_train();
    let m = cfg.batch.resolve(n)?;
    let theta0 = params.to_array();
    let mut p = params.clone();
    let mut noise = SeededRng::new(cfg.seed, NOISE_STREAM);
    let mut sampler = EpochSampler::new(n, m, SeededRng::new(cfg.seed, SHUFFLE_STREAM));
    let schedule = cfg.log.iterations(cfg.iters);
    let mut next_log = 0;
    let start = Instant::now();
    let mut rec = RunRecord {
        config: cfg.clone(),
        architecture: arch.clone(),
        seed: cfg.seed,
        entries: Vec::with_capacity(schedule.len()),
        snapshots: Vec::new(),
        final_params: None,
        wall_time: Vec::new(),
    };
    for it in 0..=cfg.iters {
        if schedule.get(next_log) == Some(&it) {
            next_log += 1;
            let entry = log_entry(&p, arch, data, cfg, it)?;
            if !(entry.train_mse <= DIVERGENCE_LOSS) {
                return Err(Error::Divergence {
                    iteration: it,
                    loss: entry.train_mse,
                });
            }
            rec.entries.push(entry);
            rec.wall_time.push(start.elapsed().as_secs_f64());
            if cfg.keep_snapshots {
                rec.snapshots.push(Snapshot {
                    iteration: it,
                    params: p.clone(),
                });
            }
        }
        if it == cfg.iters {
            break;
        }
        let (loss, mut grad) = if cfg.noise_sigma > 0.0 {
            // residual with eps: (1/N) G^T (yhat - Y + eps)
            let cache = network::forward_cache(&p, arch, data.x)?;
            let out = cache.output();
            let resid = &out - &data.y;
            let loss = resid.dot(&resid) / (2.0 * n as f64);
            let eps = Array1::from_shape_fn(n, |_| cfg.noise_sigma * noise.normal());
            let cot = (resid + eps) / n as f64;
            (loss, network::vjp(&p, arch, &cache, cot.view()))
        } else if m == n {
            network::loss_and_gradient(&p, arch, data.x, data.y)?
        } else {
            minibatch_gradient(&p, arch, data.x, data.y, sampler.next_batch())?
        };
        if !(loss <= DIVERGENCE_LOSS) {
            return Err(Error::Divergence { iteration: it, loss });
        }
        if cfg.lambda > 0.0 {
            let pull = (p.to_array() - &theta0) * (cfg.lambda / n as f64);
            grad += &pull;
        }
        for (w, g) in p.flat_mut().iter_mut().zip(grad.iter()) {
            *w -= cfg.eta * g;
        }
    }
    rec.final_params = Some(p);
    Ok(rec)
}

fn with(cfg: &TrainConfig, f: impl FnOnce(&mut TrainConfig)) -> TrainConfig {
    let mut c = cfg.clone();
    f(&mut c);
    c
}

/// Full-batch gradient descent on `(1/2N) ||yhat - Y||^2`.
pub fn train_gd(params: &NetworkParams, arch: &Architecture, data: &TrainData, cfg: &TrainConfig) -> Result<RunRecord> {
    let c = with(cfg, |c| {
        c.lambda = 0.0;
        c.noise_sigma = 0.0;
        c.batch = BatchSize::Full;
    });
    train(params, arch, data, &c)
}

/// Full-batch descent with the pull `-(eta/N) lambda (theta - theta_0)`.
pub fn train_gd_regularized(
    params: &NetworkParams,
    arch: &Architecture,
    data: &TrainData,
    cfg: &TrainConfig,
) -> Result<RunRecord> {
    let c = with(cfg, |c| {
        c.noise_sigma = 0.0;
        c.batch = BatchSize::Full;
    });
    train(params, arch, data, &c)
}

/// Full-batch descent with Gaussian noise added to the residual of every
/// training point at every step.
pub fn train_noisy_function_space(
    params: &NetworkParams,
    arch: &Architecture,
    data: &TrainData,
    cfg: &TrainConfig,
) -> Result<RunRecord> {
    let c = with(cfg, |c| {
        c.lambda = 0.0;
        c.batch = BatchSize::Full;
    });
    train(params, arch, data, &c)
}

/// Minibatch SGD with `g = (1/M) sum_{i in S} grad L_i`.
pub fn train_sgd(params: &NetworkParams, arch: &Architecture, data: &TrainData, cfg: &TrainConfig) -> Result<RunRecord> {
    let c = with(cfg, |c| {
        c.lambda = 0.0;
        c.noise_sigma = 0.0;
    });
    train(params, arch, data, &c)
}

/// Runs `f` for every seed in parallel; results come back in seed order.
pub fn ensemble<T: Send>(seeds: &[u64], f: impl Fn(u64) -> Result<T> + Sync) -> Result<Vec<T>> {
    seeds.par_iter().map(|&s| f(s)).collect()
}

/// Outputs of the linear model `y0 + G (theta - theta0)` trained by the same
/// discrete noisy update as [`train_noisy_function_space`].
pub fn train_linearized_noisy(
    grad0: &Array2<f64>,
    y0: ArrayView1<f64>,
    y: ArrayView1<f64>,
    eta: f64,
    sigma: f64,
    iters: usize,
    rng: &mut SeededRng,
) -> Result<Array1<f64>> {
    let n = y.len();
    crate::numerics::check_len("train_linearized_noisy", n, grad0.nrows())?;
    crate::numerics::check_len("train_linearized_noisy", n, y0.len())?;
    // Work in output space: yhat <- yhat - (eta/N) K (yhat - Y + eps).
    let k = grad0.dot(&grad0.t());
    let mut out = y0.to_owned();
    let r = eta / n as f64;
    for _ in 0..iters {
        let mut resid = &out - &y;
        if sigma > 0.0 {
            resid.mapv_inplace(|v| v + sigma * rng.normal());
        }
        out.scaled_add(-r, &k.dot(&resid));
    }
    Ok(out)
}
