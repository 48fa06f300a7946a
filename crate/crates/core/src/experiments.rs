//! Experiment configurations and per-seed drivers.
//!
//! A driver returns the files it wants written and a flat map of scalar
//! metrics; persistence, hashing and aggregation across seeds live in the CLI.
//!
//! Run seeds share one initialisation (`architecture.init_seed`) and differ in
//! the training noise, the minibatch order and, unless pinned, the sine noise.

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;

use ndarray::{s, Array1};
use serde::{Deserialize, Serialize};

use crate::datasets::{self, Standardizer, WindowedDataset};
use crate::error::{Error, Result};
use crate::lin_dynamics::{self, LinearizedState};
use crate::metrics;
use crate::moments::{self, QuadraticModel};
use crate::network::{self, Activation, Architecture, NetworkParams, Scaling};
use crate::ntk;
use crate::numerics::SeededRng;
use crate::sim::{self, BatchSize, RunRecord, ScalarSde, TrainConfig};

/// Stream of the parameter initialisation.
pub const INIT_STREAM: u64 = 0;
/// Base stream of the Monte-Carlo kernel draws.
pub const NTK_STREAM: u64 = 1 << 20;
/// Base stream of the Euler-Maruyama paths.
pub const SDE_STREAM: u64 = 1 << 40;
/// Stream of the sine noise.
pub const DATA_STREAM: u64 = 7;

/// How noise enters the noisy trainers; recorded in every manifest.
pub const NOISE_RULE: &str = "function-space residual noise eps ~ N(0, sigma^2) per point and step";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentId {
    NtkConvergence,
    LinDynamics,
    Moments,
    LazyNoise,
    NonlazyNoise,
    SgdBatch,
    TaylorDivergence,
}

impl ExperimentId {
    pub const ALL: [ExperimentId; 7] = [
        ExperimentId::NtkConvergence,
        ExperimentId::LinDynamics,
        ExperimentId::Moments,
        ExperimentId::LazyNoise,
        ExperimentId::NonlazyNoise,
        ExperimentId::SgdBatch,
        ExperimentId::TaylorDivergence,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ExperimentId::NtkConvergence => "ntk-convergence",
            ExperimentId::LinDynamics => "lin-dynamics",
            ExperimentId::Moments => "moments",
            ExperimentId::LazyNoise => "lazy-noise",
            ExperimentId::NonlazyNoise => "nonlazy-noise",
            ExperimentId::SgdBatch => "sgd-batch",
            ExperimentId::TaylorDivergence => "taylor-divergence",
        }
    }
}

impl fmt::Display for ExperimentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    #[default]
    Sine,
    Csv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub source: DataSource,
    /// Sine noise level `c`.
    pub noise: f64,
    /// CSV file; relative paths resolve against `$LAZYDYN_DATA`.
    pub path: Option<PathBuf>,
    pub column: String,
    pub window: usize,
    pub n_train: usize,
    pub n_test: usize,
    /// Defaults to on for CSV data and off for the sine series.
    pub standardize: Option<bool>,
    /// Seed of the sine noise. Unset, every run seed draws its own noise.
    pub seed: Option<u64>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            source: DataSource::Sine,
            noise: 0.3,
            path: None,
            column: "Temp".into(),
            window: 5,
            n_train: 100,
            n_test: 100,
            standardize: None,
            seed: None,
        }
    }
}

impl DatasetConfig {
    pub fn standardizes(&self) -> bool {
        self.standardize.unwrap_or(self.source == DataSource::Csv)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PreparedData {
    pub data: WindowedDataset,
    pub transform: Standardizer,
    pub source: String,
    pub dropped_rows: usize,
}

/// Builds the dataset of one run; `run_seed` drives the sine noise unless
/// the config pins it.
pub fn prepare_dataset(cfg: &DatasetConfig, run_seed: u64) -> Result<PreparedData> {
    let needed = cfg.n_train + cfg.n_test + cfg.window;
    let (series, dropped_rows) = match cfg.source {
        DataSource::Sine => {
            let mut rng = SeededRng::new(cfg.seed.unwrap_or(run_seed), DATA_STREAM);
            (datasets::gen_sine(cfg.noise, needed, &mut rng)?, 0)
        }
        DataSource::Csv => {
            let path = cfg
                .path
                .as_ref()
                .ok_or_else(|| Error::InvalidInput("csv dataset needs a path".into()))?;
            let loaded = datasets::load_csv_series(path, &cfg.column)?;
            (loaded.series, loaded.dropped)
        }
    };
    let data = datasets::window(&series, cfg.window, cfg.n_train, cfg.n_test)?;
    let (data, transform) = if cfg.standardizes() {
        datasets::standardize(&data)?
    } else {
        (data, Standardizer::identity())
    };
    Ok(PreparedData {
        data,
        transform,
        source: series.source,
        dropped_rows,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    /// Number of weight layers.
    pub depth: usize,
    pub width: usize,
    pub activation: Activation,
    pub scaling: Scaling,
    pub sigma_w: f64,
    pub sigma_b: f64,
    /// Initialisation seed, shared by every run seed.
    pub init_seed: u64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            depth: 5,
            width: 200,
            activation: Activation::Relu,
            scaling: Scaling::Ntk,
            sigma_w: 1.0,
            sigma_b: 0.1,
            init_seed: 0,
        }
    }
}

impl ArchConfig {
    pub fn build(&self, input: usize) -> Result<Architecture> {
        self.build_with_width(input, self.width)
    }

    pub fn build_with_width(&self, input: usize, width: usize) -> Result<Architecture> {
        if self.depth == 0 {
            return Err(Error::InvalidInput("depth must be at least 1".into()));
        }
        Architecture::uniform(input, width, self.depth, self.activation, self.scaling, self.sigma_w, self.sigma_b)
    }
}

/// Sweep axes. Absent axes take the experiment's default grid; an axis given
/// as an empty list is rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub sigma: Option<Vec<f64>>,
    pub lambda: Option<Vec<f64>>,
    pub eta: Option<Vec<f64>>,
    pub t: Option<Vec<f64>>,
    pub width: Option<Vec<usize>>,
    pub batch: Option<Vec<BatchSize>>,
    pub iters: Option<Vec<usize>>,
}

impl SweepConfig {
    fn check(&self) -> Result<()> {
        let lens = [
            ("sigma", self.sigma.as_ref().map(Vec::len)),
            ("lambda", self.lambda.as_ref().map(Vec::len)),
            ("eta", self.eta.as_ref().map(Vec::len)),
            ("t", self.t.as_ref().map(Vec::len)),
            ("width", self.width.as_ref().map(Vec::len)),
            ("batch", self.batch.as_ref().map(Vec::len)),
            ("iters", self.iters.as_ref().map(Vec::len)),
        ];
        if let Some((name, _)) = lens.iter().find(|(_, l)| *l == Some(0)) {
            return Err(Error::InvalidInput(format!("sweep.{name} has no points")));
        }
        let nonneg = |v: &Option<Vec<f64>>| v.iter().flatten().all(|x| *x >= 0.0 && x.is_finite());
        if !nonneg(&self.sigma) || !nonneg(&self.lambda) || !nonneg(&self.t) || !nonneg(&self.eta) {
            return Err(Error::InvalidInput("sweep values must be finite and nonnegative".into()));
        }
        if self.width.iter().flatten().any(|&w| w == 0) || self.iters.iter().flatten().any(|&i| i == 0) {
            return Err(Error::InvalidInput("sweep widths and iteration counts must be positive".into()));
        }
        Ok(())
    }

    fn f64_or(axis: &Option<Vec<f64>>, default: &[f64]) -> Vec<f64> {
        axis.clone().unwrap_or_else(|| default.to_vec())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NtkConfig {
    /// Initialisations averaged per width.
    pub n_seeds: usize,
    /// Leading training rows used as kernel inputs.
    pub n_points: usize,
}

impl Default for NtkConfig {
    fn default() -> Self {
        Self { n_seeds: 50, n_points: 10 }
    }
}

/// Scalar-weight toy `yhat_i = a_i + b_i theta + c_i theta^2 / 2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MomentsConfig {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub targets: Vec<f64>,
    pub eta: f64,
    pub theta_bar: f64,
    pub theta0: f64,
    pub order: usize,
    pub max_moment: usize,
    pub n_paths: usize,
    /// Euler-Maruyama steps per horizon.
    pub em_steps: usize,
}

impl Default for MomentsConfig {
    fn default() -> Self {
        Self {
            a: vec![0.2, -0.1, 0.4],
            b: vec![1.0, 0.5, -0.3],
            c: vec![0.2, -0.1, 0.3],
            targets: vec![1.0, 0.0, 0.5],
            eta: 1.0,
            theta_bar: 0.0,
            theta0: 0.0,
            order: 2,
            max_moment: 2,
            n_paths: 100_000,
            em_steps: 100,
        }
    }
}

impl MomentsConfig {
    pub fn model(&self) -> Result<QuadraticModel> {
        QuadraticModel::new(
            Array1::from(self.a.clone()),
            Array1::from(self.b.clone()),
            Array1::from(self.c.clone()),
            Array1::from(self.targets.clone()),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentId,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub architecture: ArchConfig,
    pub train: TrainConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub ntk: NtkConfig,
    #[serde(default)]
    pub moments: MomentsConfig,
}

fn default_seeds() -> Vec<u64> {
    vec![0]
}

impl ExperimentConfig {
    /// Checks everything that does not need the dataset on disk.
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::InvalidInput("seeds has no entries".into()));
        }
        self.sweep.check()?;
        self.architecture.build(self.dataset.window.max(1))?;
        let d = &self.dataset;
        if d.window == 0 || d.n_train == 0 {
            return Err(Error::InvalidInput("dataset window and n_train must be positive".into()));
        }
        if d.source == DataSource::Csv && d.path.is_none() {
            return Err(Error::InvalidInput("dataset.path is required for csv data".into()));
        }
        self.train.validate(d.n_train)?;
        for b in self.sweep.batch.iter().flatten() {
            b.resolve(d.n_train)?;
        }
        if self.experiment == ExperimentId::NtkConvergence && (self.ntk.n_seeds == 0 || self.ntk.n_points == 0) {
            return Err(Error::InvalidInput("ntk.n_seeds and ntk.n_points must be positive".into()));
        }
        if self.experiment == ExperimentId::Moments {
            let m = &self.moments;
            m.model()?;
            if m.targets.is_empty() || !(1..=moments::MAX_MOMENT).contains(&m.max_moment) {
                return Err(Error::InvalidInput("moments needs data points and 1 <= max_moment <= 6".into()));
            }
            if m.em_steps < 10 || m.em_steps % 2 != 0 {
                return Err(Error::InvalidInput("moments.em_steps must be even and at least 10".into()));
            }
        }
        Ok(())
    }
}

/// One file produced by a driver, relative to the run directory.
#[derive(Clone, Debug, PartialEq)]
pub struct Artifact {
    pub name: String,
    pub contents: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SeedOutput {
    pub artifacts: Vec<Artifact>,
    pub metrics: BTreeMap<String, f64>,
    pub dropped_rows: usize,
    pub standardizer: Option<Standardizer>,
}

impl SeedOutput {
    fn file(&mut self, name: impl Into<String>, write: impl FnOnce(&mut Vec<u8>) -> Result<()>) -> Result<()> {
        let mut buf = Vec::new();
        write(&mut buf)?;
        self.artifacts.push(Artifact {
            name: name.into(),
            contents: String::from_utf8(buf).expect("drivers write UTF-8"),
        });
        Ok(())
    }

    fn metric(&mut self, name: impl Into<String>, value: f64) {
        self.metrics.insert(name.into(), value);
    }
}

fn tag(v: f64) -> String {
    format!("{v}")
}

fn batch_tag(b: BatchSize) -> String {
    match b {
        BatchSize::Full => "full".into(),
        BatchSize::Size(m) => m.to_string(),
    }
}

/// Runs one seed of the configured experiment.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<SeedOutput> {
    cfg.validate()?;
    let mut out = SeedOutput::default();
    if cfg.experiment == ExperimentId::Moments {
        run_moments(cfg, seed, &mut out)?;
        return Ok(out);
    }
    let prepared = prepare_dataset(&cfg.dataset, seed)?;
    out.dropped_rows = prepared.dropped_rows;
    if cfg.dataset.standardizes() {
        out.standardizer = Some(prepared.transform);
    }
    let data = &prepared.data;
    let mut train = cfg.train.clone();
    train.seed = seed;
    match cfg.experiment {
        ExperimentId::NtkConvergence => run_ntk(cfg, seed, data, &mut out)?,
        ExperimentId::LinDynamics => run_lin(cfg, data, &train, &mut out)?,
        ExperimentId::LazyNoise | ExperimentId::NonlazyNoise => run_noise(cfg, data, &train, &mut out)?,
        ExperimentId::SgdBatch => run_sgd(cfg, data, &train, &mut out)?,
        ExperimentId::TaylorDivergence => run_taylor(cfg, data, &train, &mut out)?,
        ExperimentId::Moments => unreachable!(),
    }
    Ok(out)
}

fn init(cfg: &ExperimentConfig, arch: &Architecture) -> NetworkParams {
    network::init_params(arch, &mut SeededRng::new(cfg.architecture.init_seed, INIT_STREAM))
}

fn record_files(out: &mut SeedOutput, stem: &str, rec: &RunRecord) -> Result<()> {
    out.file(format!("trajectory_{stem}.csv"), |w| sim::write_trajectory_csv(w, rec))?;
    let json = rec.to_json()?;
    out.file(format!("run_{stem}.json"), |w| {
        w.extend_from_slice(json.as_bytes());
        w.push(b'\n');
        Ok(())
    })
}

fn final_metrics(out: &mut SeedOutput, stem: &str, rec: &RunRecord, layers: &[usize]) {
    let last = rec.last();
    out.metric(format!("train_mse_{stem}"), last.train_mse);
    if let Some(t) = last.test_mse {
        out.metric(format!("test_mse_{stem}"), t);
    }
    for (l, t) in layers.iter().zip(&last.hessian_traces) {
        out.metric(format!("trace_l{l}_{stem}"), t.value);
    }
}

fn with_trace_layers(train: &TrainConfig, depth: usize) -> TrainConfig {
    let mut t = train.clone();
    if t.hessian_layers.is_empty() {
        t.hessian_layers = vec![0, depth - 1];
        t.hessian_layers.dedup();
    }
    t
}

fn run_ntk(cfg: &ExperimentConfig, seed: u64, data: &WindowedDataset, out: &mut SeedOutput) -> Result<()> {
    let n = cfg.ntk.n_points.min(data.n_train());
    let x = data.x_train.slice(s![..n, ..]);
    let arch = cfg.architecture.build(data.window)?;
    let analytic = ntk::analytic_ntk(&arch, x)?;
    out.file("kernel_analytic.csv", |w| ntk::write_kernel_csv(w, &analytic.theta, "analytic"))?;
    let widths = cfg.sweep.width.clone().unwrap_or_else(|| vec![50, 200, 1000]);
    let mut rows = Vec::new();
    for &width in &widths {
        let rng = SeededRng::new(seed, NTK_STREAM);
        let mc = ntk::mc_limit_ntk(&arch, x, width, cfg.ntk.n_seeds, &rng)?;
        let diff = mc.mean.as_array() - analytic.theta.as_array();
        let sup = diff.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let rel = diff.mapv(|v| v * v).sum().sqrt() / analytic.theta.frobenius();
        out.file(format!("kernel_mc_w{width}.csv"), |w| {
            ntk::write_kernel_csv(w, &mc.mean, &format!("mc width={width} seeds={}", cfg.ntk.n_seeds))
        })?;
        out.metric(format!("sup_dev_w{width}"), sup);
        out.metric(format!("rel_frob_w{width}"), rel);
        rows.push((width, sup, rel));
    }
    out.file("convergence.csv", |w| {
        use std::io::Write;
        writeln!(w, "width,sup_dev,rel_frob")?;
        for (width, sup, rel) in &rows {
            writeln!(w, "{width},{sup:.16e},{rel:.16e}")?;
        }
        Ok(())
    })
}

fn run_lin(
    cfg: &ExperimentConfig,
    data: &WindowedDataset,
    train: &TrainConfig,
    out: &mut SeedOutput,
) -> Result<()> {
    let arch = cfg.architecture.build(data.window)?;
    let p = init(cfg, &arch);
    let state = LinearizedState::from_network(&p, &arch, data.x_train.view(), data.y_train.view(), train.eta)?;
    let ts = SweepConfig::f64_or(&cfg.sweep.t, &[0.0, 1.0, 10.0, 100.0, train.iters as f64]);
    let lambdas = SweepConfig::f64_or(&cfg.sweep.lambda, &[0.0]);
    let sigmas = SweepConfig::f64_or(&cfg.sweep.sigma, &[0.0]);
    let rows = state.sweep(&ts, &lambdas, &sigmas)?;
    out.file("lin_sweep.csv", |w| lin_dynamics::write_sweep_csv(w, &rows, true))?;
    let rec = sim::train_gd(&p, &arch, &data.train_view(), train)?;
    let net = network::forward_batch(rec.final_params(), &arch, data.x_train.view())?;
    let lin = state.solve_output(train.iters as f64)?;
    let scale = state.y0.iter().chain(net.iter()).fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    let gap = (&net - &lin).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    out.metric("train_mse_network", rec.last().train_mse);
    out.metric("train_mse_linear", metrics::mse(lin.view(), data.y_train.view())?);
    out.metric("output_gap_rel", gap / scale);
    record_files(out, "gd", &rec)
}

fn run_noise(
    cfg: &ExperimentConfig,
    data: &WindowedDataset,
    train: &TrainConfig,
    out: &mut SeedOutput,
) -> Result<()> {
    let arch = cfg.architecture.build(data.window)?;
    let p = init(cfg, &arch);
    let train = with_trace_layers(train, arch.depth());
    for sigma in SweepConfig::f64_or(&cfg.sweep.sigma, &[0.0, 0.1, 0.3]) {
        let mut c = train.clone();
        c.noise_sigma = sigma;
        let rec = sim::train_noisy_function_space(&p, &arch, &data.train_view(), &c)?;
        let stem = format!("sigma{}", tag(sigma));
        final_metrics(out, &stem, &rec, &c.hessian_layers);
        record_files(out, &stem, &rec)?;
    }
    Ok(())
}

fn run_sgd(
    cfg: &ExperimentConfig,
    data: &WindowedDataset,
    train: &TrainConfig,
    out: &mut SeedOutput,
) -> Result<()> {
    let arch = cfg.architecture.build(data.window)?;
    let p = init(cfg, &arch);
    let train = with_trace_layers(train, arch.depth());
    let batches = cfg.sweep.batch.clone().unwrap_or_else(|| vec![BatchSize::Size(1), BatchSize::Full]);
    for b in batches {
        let mut c = train.clone();
        c.batch = b;
        let rec = sim::train_sgd(&p, &arch, &data.train_view(), &c)?;
        let stem = format!("batch{}", batch_tag(b));
        final_metrics(out, &stem, &rec, &c.hessian_layers);
        if data.n_test() > 0 {
            let jac = metrics::input_jacobian_norm(rec.final_params(), &arch, data.x_test.view())?;
            out.metric(format!("input_jacobian_{stem}"), jac);
        }
        record_files(out, &stem, &rec)?;
    }
    Ok(())
}

fn run_taylor(
    cfg: &ExperimentConfig,
    data: &WindowedDataset,
    train: &TrainConfig,
    out: &mut SeedOutput,
) -> Result<()> {
    let widths = cfg.sweep.width.clone().unwrap_or_else(|| vec![50, 200, 1000]);
    let iters = cfg.sweep.iters.clone().unwrap_or_else(|| vec![500, 10_000]);
    for &width in &widths {
        let arch = cfg.architecture.build_with_width(data.window, width)?;
        let p = init(cfg, &arch);
        for &n in &iters {
            let mut c = train.clone();
            c.iters = n;
            c.keep_snapshots = true;
            let rec = sim::train_gd(&p, &arch, &data.train_view(), &c)?;
            let d1 = metrics::taylor_divergence(&rec, &arch, data.x_train.view(), 0, 1)?;
            let d2 = metrics::taylor_divergence(&rec, &arch, data.x_train.view(), 0, 2)?;
            let stem = format!("w{width}_it{n}");
            let outputs = network::forward_batch(rec.final_params(), &arch, data.x_train.view())?;
            out.metric(format!("div1_max_{stem}"), d1.max());
            out.metric(format!("div2_max_{stem}"), d2.max());
            out.metric(format!("output_var_{stem}"), outputs.var(0.0));
            out.file(format!("divergence_{stem}.csv"), |w| metrics::write_divergence_csv(w, &[d1, d2]))?;
        }
    }
    Ok(())
}

/// Expansion values and Euler-Maruyama estimates of `E[(theta_dt - theta_bar)^m]`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MomentComparison {
    pub dt: f64,
    pub sigma: f64,
    pub moment: usize,
    pub expansion: f64,
    pub mc: sim::Estimate,
}

impl MomentComparison {
    /// `|expansion - mc| / error_bar`; infinite when the error bar is 0 and
    /// the values differ.
    pub fn z_score(&self) -> f64 {
        let diff = (self.expansion - self.mc.mean).abs();
        if diff == 0.0 {
            0.0
        } else {
            diff / self.mc.error_bar()
        }
    }
}

/// Compares the moment expansion of the quadratic toy with coupled
/// Euler-Maruyama ensembles driven by the toy's exact drift.
pub fn compare_moments(m: &MomentsConfig, dt: f64, sigma: f64, seed: u64) -> Result<Vec<MomentComparison>> {
    let model = m.model()?;
    let derivs = model.derivatives(m.theta_bar, m.order);
    let coeffs = moments::drift_coefficients(&derivs, model.y.view(), m.eta, m.order, m.theta_bar)?;
    let eta = m.eta;
    let sde = ScalarSde::new(|th: f64| model.drift(th, eta), sigma, m.theta0)?;
    let rng = SeededRng::new(seed, SDE_STREAM);
    let sample = sim::simulate_terminal(&sde, dt / m.em_steps as f64, dt, m.n_paths, &rng, true)?;
    (1..=m.max_moment)
        .map(|k| {
            let exp = moments::correction_terms(&coeffs, sigma, k)?;
            Ok(MomentComparison {
                dt,
                sigma,
                moment: k,
                expansion: exp.value(m.theta0, dt),
                mc: sample.estimate(|v| (v - m.theta_bar).powi(k as i32)),
            })
        })
        .collect()
}

fn run_moments(cfg: &ExperimentConfig, seed: u64, out: &mut SeedOutput) -> Result<()> {
    let m = &cfg.moments;
    let dts = SweepConfig::f64_or(&cfg.sweep.t, &[0.05, 0.1, 0.2]);
    let sigmas = SweepConfig::f64_or(&cfg.sweep.sigma, &[0.0, 0.1, 0.3]);
    let mut rows = Vec::new();
    for &dt in &dts {
        for &sigma in &sigmas {
            rows.extend(compare_moments(m, dt, sigma, seed)?);
        }
    }
    let model = m.model()?;
    let coeffs = moments::drift_coefficients(
        &model.derivatives(m.theta_bar, m.order),
        model.y.view(),
        m.eta,
        m.order,
        m.theta_bar,
    )?;
    let sigma0 = sigmas[0];
    let exps = (1..=m.max_moment)
        .map(|k| moments::correction_terms(&coeffs, sigma0, k))
        .collect::<Result<Vec<_>>>()?;
    out.file("terms.csv", |w| moments::write_term_csv(w, &exps.iter().collect::<Vec<_>>()))?;
    for r in &rows {
        out.metric(format!("z_m{}_dt{}_sigma{}", r.moment, tag(r.dt), tag(r.sigma)), r.z_score());
    }
    out.file("moments.csv", |w| {
        use std::io::Write;
        writeln!(w, "dt,sigma,moment,expansion,mc_mean,mc_std_error,mc_bias")?;
        for r in &rows {
            writeln!(
                w,
                "{},{},{},{:.16e},{:.16e},{:.16e},{:.16e}",
                r.dt, r.sigma, r.moment, r.expansion, r.mc.mean, r.mc.std_error, r.mc.bias
            )?;
        }
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base(exp: ExperimentId) -> ExperimentConfig {
        let mut train = TrainConfig::new(0.5, 8);
        train.log = sim::LogSchedule::Every(4);
        ExperimentConfig {
            experiment: exp,
            seeds: vec![0],
            dataset: DatasetConfig {
                n_train: 12,
                n_test: 6,
                ..DatasetConfig::default()
            },
            architecture: ArchConfig {
                depth: 3,
                width: 8,
                ..ArchConfig::default()
            },
            train,
            sweep: SweepConfig::default(),
            ntk: NtkConfig { n_seeds: 3, n_points: 4 },
            moments: MomentsConfig {
                n_paths: 200,
                em_steps: 10,
                ..MomentsConfig::default()
            },
        }
    }

    #[test]
    fn every_experiment_runs_small() {
        for exp in ExperimentId::ALL {
            let mut cfg = base(exp);
            if exp == ExperimentId::TaylorDivergence || exp == ExperimentId::NtkConvergence {
                cfg.sweep.width = Some(vec![4, 8]);
                cfg.sweep.iters = Some(vec![4]);
            }
            let out = run_seed(&cfg, 3).unwrap_or_else(|e| panic!("{exp}: {e}"));
            assert!(!out.artifacts.is_empty(), "{exp}");
            assert!(!out.metrics.is_empty(), "{exp}");
            assert!(out.metrics.values().all(|v| v.is_finite()), "{exp}: {:?}", out.metrics);
            let again = run_seed(&cfg, 3).unwrap();
            assert_eq!(out, again, "{exp}");
        }
    }

    #[test]
    fn empty_grid_rejected() {
        let mut cfg = base(ExperimentId::LazyNoise);
        cfg.sweep.sigma = Some(vec![]);
        assert!(cfg.validate().is_err());
        cfg.sweep.sigma = None;
        cfg.seeds.clear();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn csv_source_needs_path() {
        let mut cfg = base(ExperimentId::SgdBatch);
        cfg.dataset.source = DataSource::Csv;
        assert!(cfg.validate().is_err());
        assert!(cfg.dataset.standardizes());
        assert!(!DatasetConfig::default().standardizes());
    }

    #[test]
    fn experiment_names_round_trip() {
        for exp in ExperimentId::ALL {
            let s = serde_json::to_string(&exp).unwrap();
            assert_eq!(s, format!("\"{}\"", exp.name()));
        }
    }
}
