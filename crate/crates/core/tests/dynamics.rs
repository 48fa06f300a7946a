use lazydyn::lin_dynamics::LinearizedState;
use lazydyn::network::{self, Activation, Architecture, NetworkParams, Scaling};
use lazydyn::numerics::sym_eig;
use lazydyn::sim::{self, LogSchedule, TrainConfig, TrainData};
use lazydyn::{SeededRng, SymMatrix};
use ndarray::{Array1, Array2, Axis};

struct Linear {
    arch: Architecture,
    p0: NetworkParams,
    x: Array2<f64>,
    y: Array1<f64>,
    state: LinearizedState,
    lmax: f64,
}

/// Single-layer identity network: exactly linear in its parameters.
fn linear(n: usize, d: usize, seed: u64) -> Linear {
    let mut rng = SeededRng::new(seed, 0);
    let arch = Architecture::uniform(d, 1, 1, Activation::Identity, Scaling::Ntk, 1.0, 0.5).unwrap();
    let p0 = network::init_params(&arch, &mut rng);
    let x = Array2::from_shape_fn((n, d), |_| rng.normal());
    let y = Array1::from_shape_fn(n, |_| rng.normal());
    let state = LinearizedState::from_network(&p0, &arch, x.view(), y.view(), 1.0).unwrap();
    let lmax = state.eigen().max_eigenvalue();
    Linear {
        arch,
        p0,
        x,
        y,
        state,
        lmax,
    }
}

fn rel(a: &Array1<f64>, b: &Array1<f64>) -> f64 {
    (a - b).mapv(|v| v * v).sum().sqrt() / b.mapv(|v| v * v).sum().sqrt()
}

fn gd(l: &Linear, eta: f64, iters: usize) -> sim::RunRecord {
    let mut c = TrainConfig::new(eta, iters);
    c.log = LogSchedule::Every(iters);
    sim::train_gd(&l.p0, &l.arch, &TrainData::train_only(l.x.view(), l.y.view()), &c).unwrap()
}

#[test]
fn linear_model_follows_closed_form_weights() {
    let l = linear(6, 4, 1);
    let n = l.y.len() as f64;
    let eta = 0.01 * n / l.lmax;
    let iters = 400;
    let rec = gd(&l, eta, iters);
    let state = LinearizedState::from_network(&l.p0, &l.arch, l.x.view(), l.y.view(), eta).unwrap();
    let flow = state.solve_params(iters as f64).unwrap();
    let disp_gd = rec.final_params().to_array() - l.p0.to_array();
    let disp_flow = &flow - &l.p0.to_array();
    assert!(rel(&disp_gd, &disp_flow) < 1e-2, "{}", rel(&disp_gd, &disp_flow));
}

#[test]
fn discretisation_error_halves_with_the_step() {
    let l = linear(6, 4, 2);
    let n = l.y.len() as f64;
    let err = |eta: f64, iters: usize| {
        let rec = gd(&l, eta, iters);
        let out = network::forward_batch(rec.final_params(), &l.arch, l.x.view()).unwrap();
        let state = LinearizedState::from_network(&l.p0, &l.arch, l.x.view(), l.y.view(), eta).unwrap();
        let flow = state.solve_output(iters as f64).unwrap();
        (&out - &flow).mapv(f64::abs).sum()
    };
    let coarse = err(0.04 * n / l.lmax, 50);
    let fine = err(0.02 * n / l.lmax, 100);
    let ratio = coarse / fine;
    assert!((1.8..2.2).contains(&ratio), "ratio {ratio}");
}

#[test]
fn zero_pull_matches_plain_gradient_descent() {
    let l = linear(5, 3, 3);
    let mut c = TrainConfig::new(0.1, 30);
    c.log = LogSchedule::Every(10);
    let data = TrainData::train_only(l.x.view(), l.y.view());
    let plain = sim::train_gd(&l.p0, &l.arch, &data, &c).unwrap();
    let pulled = sim::train_gd_regularized(&l.p0, &l.arch, &data, &c).unwrap();
    assert_eq!(plain.final_params(), pulled.final_params());
    for t in [0.0, 0.5, 7.0] {
        assert_eq!(
            l.state.solve_regularized_output(0.0, t).unwrap(),
            l.state.solve_output(t).unwrap()
        );
    }
}

#[test]
fn noisy_linear_ensemble_matches_expected_error() {
    let l = linear(8, 12, 4);
    let n = l.y.len() as f64;
    let eta = 0.01 * n / l.lmax;
    let (sigma, iters) = (0.3, 300);
    let grad0 = network::jacobian(&l.p0, &l.arch, l.x.view()).unwrap();
    let state = LinearizedState::from_jacobian(l.p0.to_array(), grad0.clone(), l.state.y0.clone(), l.y.clone(), eta)
        .unwrap();
    let want = state.expected_noisy_mse(sigma, iters as f64).unwrap();
    let errs: Vec<f64> = (0..200)
        .map(|s| {
            let mut rng = SeededRng::new(s, 1);
            let out = sim::train_linearized_noisy(&grad0, state.y0.view(), l.y.view(), eta, sigma, iters, &mut rng).unwrap();
            (&out - &l.y).mapv(|v| v * v).sum()
        })
        .collect();
    let m = errs.iter().sum::<f64>() / 200.0;
    let se = (errs.iter().map(|e| (e - m) * (e - m)).sum::<f64>() / 199.0 / 200.0).sqrt();
    // Discrete steps shift the noise term by O(eta lambda / N) = 1%.
    assert!((m - want).abs() < 3.0 * se + 0.02 * want, "mean {m}, expected {want}, se {se}");
}

fn subsets(n: usize, m: usize) -> Vec<Vec<usize>> {
    fn go(start: usize, n: usize, m: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if cur.len() == m {
            out.push(cur.clone());
            return;
        }
        for i in start..n {
            cur.push(i);
            go(i + 1, n, m, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    go(0, n, m, &mut Vec::new(), &mut out);
    out
}

fn small_net(n: usize, seed: u64) -> (Architecture, NetworkParams, Array2<f64>, Array1<f64>) {
    let mut rng = SeededRng::new(seed, 0);
    let arch = Architecture::uniform(3, 6, 2, Activation::Tanh, Scaling::Ntk, 1.2, 0.1).unwrap();
    let p = network::init_params(&arch, &mut rng);
    let x = Array2::from_shape_fn((n, 3), |_| rng.normal());
    let y = Array1::from_shape_fn(n, |_| rng.normal());
    (arch, p, x, y)
}

#[test]
fn minibatch_gradient_is_unbiased_over_all_subsets() {
    let (arch, p, x, y) = small_net(5, 7);
    let all: Vec<usize> = (0..5).collect();
    let (_, full) = sim::minibatch_gradient(&p, &arch, x.view(), y.view(), &all).unwrap();
    for m in 1..=5 {
        let sets = subsets(5, m);
        let mut acc = Array1::<f64>::zeros(full.len());
        for s in &sets {
            acc += &sim::minibatch_gradient(&p, &arch, x.view(), y.view(), s).unwrap().1;
        }
        acc /= sets.len() as f64;
        assert!(rel(&acc, &full) < 1e-12, "batch {m}");
    }
}

#[test]
fn gradient_noise_scales_with_finite_population_factor() {
    let n = 16;
    let (arch, p, x, y) = small_net(n, 8);
    let all: Vec<usize> = (0..n).collect();
    let (_, full) = sim::minibatch_gradient(&p, &arch, x.view(), y.view(), &all).unwrap();
    let noise = |m: usize| {
        let sets = subsets(n, m);
        let total: f64 = sets
            .iter()
            .map(|s| {
                let g = sim::minibatch_gradient(&p, &arch, x.view(), y.view(), s).unwrap().1;
                (&g - &full).mapv(|v| v * v).sum()
            })
            .sum();
        total / sets.len() as f64
    };
    let factor = |m: usize| (n - m) as f64 / (m as f64 * (n - 1) as f64);
    let (big, small) = (8, 2);
    let ratio = noise(small) / noise(big);
    let want = factor(small) / factor(big);
    assert!((ratio - want).abs() < 1e-9 * want, "{ratio} vs {want}");
}

#[test]
fn sampler_visits_every_row_once_per_epoch() {
    let mut s = sim::EpochSampler::new(10, 3, SeededRng::new(1, 2));
    for _ in 0..4 {
        let mut seen: Vec<usize> = (0..3).flat_map(|_| s.next_batch().to_vec()).collect();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 9);
    }
    let mut full = sim::EpochSampler::new(4, 4, SeededRng::new(1, 2));
    assert_eq!(full.next_batch(), &[0, 1, 2, 3]);
}

#[test]
fn tangent_kernel_is_jacobian_gram() {
    let (arch, p, x, _) = small_net(6, 9);
    let g = network::jacobian(&p, &arch, x.view()).unwrap();
    let k = lazydyn::ntk::empirical_ntk(&p, &arch, x.view()).unwrap();
    let gram = g.dot(&g.t());
    let diff = (k.as_array() - &gram).mapv(f64::abs).sum();
    assert!(diff < 1e-10, "{diff}");
    for (i, row) in x.axis_iter(Axis(0)).enumerate() {
        let gi = network::param_gradient(&p, &arch, row).unwrap();
        assert!((gi.dot(&gi) - gram[[i, i]]).abs() < 1e-10);
    }
    let e = sym_eig(&SymMatrix::new(gram).unwrap());
    assert!(e.min_eigenvalue() > -1e-10);
}
