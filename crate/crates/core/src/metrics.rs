//! Measurements taken on trained networks.

use std::io::Write;

use ndarray::{Array1, ArrayView1, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{self, Architecture, TraceEstimate, TraceMode};
use crate::numerics::check_len;
use crate::sim::RunRecord;

/// `(1/2N) ||outputs - targets||^2`.
pub fn mse(outputs: ArrayView1<f64>, targets: ArrayView1<f64>) -> Result<f64> {
    check_len("mse", targets.len(), outputs.len())?;
    if targets.is_empty() {
        return Err(Error::InvalidInput("mse of an empty set".into()));
    }
    let sq: f64 = outputs.iter().zip(targets).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sq / (2.0 * targets.len() as f64))
}

/// Squared gap between the network and its Taylor polynomial at `theta_0`
/// on one probe input.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceCurve {
    pub iterations: Vec<usize>,
    pub values: Vec<f64>,
    pub order: usize,
    pub probe: usize,
    pub seed: u64,
}

impl DivergenceCurve {
    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    pub fn last(&self) -> f64 {
        self.values.last().copied().unwrap_or(0.0)
    }
}

/// Divergence of the order-1 or order-2 expansion around the first snapshot.
///
/// Order 1 is the exact linearisation `yhat_0 + grad yhat_0 . (theta_t - theta_0)`.
/// Order 2 adds half the exact second derivative along the realised
/// displacement.
pub fn taylor_divergence(
    run: &RunRecord,
    arch: &Architecture,
    x: ArrayView2<f64>,
    probe: usize,
    order: usize,
) -> Result<DivergenceCurve> {
    if !(1..=2).contains(&order) {
        return Err(Error::InvalidInput(format!("expansion order {order} not in 1..=2")));
    }
    let first = run.snapshots.first().ok_or(Error::MissingSnapshots)?;
    if first.iteration != 0 {
        return Err(Error::MissingSnapshots);
    }
    if probe >= x.nrows() {
        return Err(Error::InvalidInput(format!("probe row {probe} outside inputs")));
    }
    let xp = x.row(probe);
    let theta0 = first.params.to_array();
    let y0 = network::forward(&first.params, arch, xp)?;
    let g0 = network::param_gradient(&first.params, arch, xp)?;
    let values = run
        .snapshots
        .par_iter()
        .map(|snap| {
            if snap.iteration == 0 {
                return Ok(0.0);
            }
            let disp = snap.params.to_array() - &theta0;
            let actual = network::forward(&snap.params, arch, xp)?;
            let mut approx = y0 + g0.dot(&disp);
            if order == 2 {
                let xs = xp.insert_axis(Axis(0));
                let [_, _, d2] = network::directional_derivatives(&first.params, arch, xs, disp.view())?;
                approx += 0.5 * d2[0];
            }
            Ok((actual - approx).powi(2))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(DivergenceCurve {
        iterations: run.snapshots.iter().map(|s| s.iteration).collect(),
        values,
        order,
        probe,
        seed: run.seed,
    })
}

/// Per-snapshot weight Hessian traces: `traces[k][j]` is layer `layers[j]`
/// at snapshot `k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceCurve {
    pub iterations: Vec<usize>,
    pub layers: Vec<usize>,
    pub traces: Vec<Vec<TraceEstimate>>,
}

pub fn hessian_trace_curve(
    run: &RunRecord,
    arch: &Architecture,
    x: ArrayView2<f64>,
    y: ArrayView1<f64>,
    layers: &[usize],
    mode: TraceMode,
) -> Result<TraceCurve> {
    if run.snapshots.is_empty() {
        return Err(Error::MissingSnapshots);
    }
    if x.nrows() == 0 {
        return Err(Error::InvalidInput("empty dataset".into()));
    }
    let traces = run
        .snapshots
        .par_iter()
        .map(|s| {
            layers
                .iter()
                .map(|&l| network::layer_hessian_trace(&s.params, arch, x, y, l, false, mode))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TraceCurve {
        iterations: run.snapshots.iter().map(|s| s.iteration).collect(),
        layers: layers.to_vec(),
        traces,
    })
}

/// Mean Euclidean norm of the input Jacobian over the rows of `x`.
pub fn input_jacobian_norm(
    params: &network::NetworkParams,
    arch: &Architecture,
    x: ArrayView2<f64>,
) -> Result<f64> {
    if x.nrows() == 0 {
        return Err(Error::InvalidInput("empty dataset".into()));
    }
    let mut total = 0.0;
    for row in x.rows() {
        let j: Array1<f64> = network::input_jacobian(params, arch, row)?;
        total += j.dot(&j).sqrt();
    }
    Ok(total / x.nrows() as f64)
}

/// `iteration,value,order,seed`, one row per point of every curve.
pub fn write_divergence_csv<W: Write>(mut out: W, curves: &[DivergenceCurve]) -> Result<()> {
    writeln!(out, "iteration,value,order,seed")?;
    for c in curves {
        for (it, v) in c.iterations.iter().zip(&c.values) {
            writeln!(out, "{it},{v:.16e},{},{}", c.order, c.seed)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{init_params, Activation, Scaling};
    use crate::numerics::SeededRng;
    use crate::sim::{train_gd, TrainConfig, TrainData};
    use ndarray::{array, Array2};

    #[test]
    fn mse_examples() {
        assert_eq!(mse(array![1.0, 2.0].view(), array![1.0, 2.0].view()).unwrap(), 0.0);
        assert_eq!(mse(array![3.0].view(), array![1.0].view()).unwrap(), 2.0);
        assert!(mse(array![1.0].view(), array![1.0, 2.0].view()).is_err());
        let mut rng = SeededRng::new(0, 0);
        let a = Array1::from_shape_fn(17, |_| rng.normal());
        let b = Array1::from_shape_fn(17, |_| rng.normal());
        let mut brute = 0.0;
        for i in 0..17 {
            brute += 0.5 * (a[i] - b[i]) * (a[i] - b[i]) / 17.0;
        }
        assert!((mse(a.view(), b.view()).unwrap() - brute).abs() < 1e-14);
    }

    fn run(act: Activation, width: usize) -> (Architecture, Array2<f64>, RunRecord) {
        let arch = Architecture::uniform(3, width, 3, act, Scaling::Ntk, 1.2, 0.1).unwrap();
        let p = init_params(&arch, &mut SeededRng::new(0, 0));
        let mut rng = SeededRng::new(1, 0);
        let x = Array2::from_shape_fn((6, 3), |_| rng.normal());
        let y = Array1::from_shape_fn(6, |_| rng.normal());
        let mut cfg = TrainConfig::new(0.5, 64);
        cfg.keep_snapshots = true;
        let rec = train_gd(&p, &arch, &TrainData::train_only(x.view(), y.view()), &cfg).unwrap();
        (arch, x, rec)
    }

    #[test]
    fn divergence_properties() {
        let (arch, x, rec) = run(Activation::Tanh, 20);
        let d1 = taylor_divergence(&rec, &arch, x.view(), 0, 1).unwrap();
        let d2 = taylor_divergence(&rec, &arch, x.view(), 0, 2).unwrap();
        assert_eq!(d1.values[0], 0.0);
        assert_eq!(d2.values[0], 0.0);
        assert!(d1.values.iter().all(|&v| v >= 0.0));
        assert!(d1.last() > 0.0);
        assert!(d2.last() < d1.last());
        assert!(taylor_divergence(&rec, &arch, x.view(), 0, 3).is_err());
    }

    #[test]
    fn linear_network_has_no_first_order_divergence() {
        let arch = Architecture::new(vec![3, 1], Activation::Identity, Scaling::Ntk, 1.0, 0.5).unwrap();
        let p = init_params(&arch, &mut SeededRng::new(2, 0));
        let x = array![[1.0, 0.0, 2.0], [0.5, -1.0, 0.0]];
        let y = array![1.0, -1.0];
        let mut cfg = TrainConfig::new(0.3, 16);
        cfg.keep_snapshots = true;
        let rec = train_gd(&p, &arch, &TrainData::train_only(x.view(), y.view()), &cfg).unwrap();
        let d = taylor_divergence(&rec, &arch, x.view(), 1, 1).unwrap();
        assert!(d.max() < 1e-24, "{d:?}");
    }

    #[test]
    fn missing_snapshots() {
        let (arch, x, mut rec) = run(Activation::Tanh, 4);
        rec.snapshots.clear();
        assert!(matches!(
            taylor_divergence(&rec, &arch, x.view(), 0, 1),
            Err(Error::MissingSnapshots)
        ));
    }

    #[test]
    fn trace_curve_and_snapshot_integrity() {
        let (arch, x, rec) = run(Activation::Relu, 8);
        let y = Array1::zeros(6);
        let c = hessian_trace_curve(&rec, &arch, x.view(), y.view(), &[0, 2], TraceMode::GaussNewton).unwrap();
        assert_eq!(c.traces.len(), rec.snapshots.len());
        assert!(c.traces.iter().flatten().all(|t| t.value > 0.0));
        let empty = Array2::<f64>::zeros((0, 3));
        assert!(hessian_trace_curve(&rec, &arch, empty.view(), Array1::zeros(0).view(), &[0], TraceMode::GaussNewton).is_err());
    }

    #[test]
    fn divergence_csv_layout() {
        let c = DivergenceCurve {
            iterations: vec![0, 1],
            values: vec![0.0, 0.25],
            order: 2,
            probe: 0,
            seed: 7,
        };
        let mut buf = Vec::new();
        write_divergence_csv(&mut buf, &[c]).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "iteration,value,order,seed\n0,0.0000000000000000e0,2,7\n1,2.5000000000000000e-1,2,7\n"
        );
    }
}
