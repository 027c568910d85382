#![allow(dead_code)]

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stden::graph::{Edge, RoadNetwork};
use stden::Tensor;

/// Random connected network: a random tree plus `extra` random arcs.
pub fn random_graph(seed: u64, n: usize, extra: usize) -> RoadNetwork {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges = Vec::new();
    for v in 1..n {
        let u = rng.gen_range(0..v);
        let (src, dst) = if rng.gen_bool(0.5) { (u, v) } else { (v, u) };
        edges.push(Edge { src, dst, weight: rng.gen_range(0.5..2.0) });
    }
    while edges.len() < n - 1 + extra {
        let (a, b) = (rng.gen_range(0..n), rng.gen_range(0..n));
        if a != b {
            edges.push(Edge { src: a, dst: b, weight: rng.gen_range(0.5..2.0) });
        }
    }
    RoadNetwork::new(n, edges).unwrap()
}

pub fn random_values(seed: u64, len: usize, scale: f64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.gen_range(-scale..scale)).collect()
}

/// Dense `B·Bᵀ` built from the incidence matrix.
pub fn dense_laplacian(net: &RoadNetwork) -> DMatrix<f64> {
    let b = net.incidence_matrix();
    let bm = DMatrix::from_fn(net.node_count(), net.edge_count(), |i, e| b[i][e]);
    &bm * bm.transpose()
}

pub fn to_dvec(t: &Tensor) -> nalgebra::DVector<f64> {
    nalgebra::DVector::from_column_slice(t.data())
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

use std::sync::Arc;
use stden::data::Normalizer;
use stden::diffengine::{grad_check, GradCheckReport};
use stden::model::Batch;
use stden::odeint::integrate;
use stden::{Model, ModelConfig, ParamStore, SolverConfig, Var};

fn store(entries: &[(&str, Vec<usize>, u64)]) -> ParamStore {
    let mut p = ParamStore::new();
    for (name, shape, seed) in entries {
        let len = shape.iter().product();
        p.insert(*name, Tensor::new(shape.clone(), random_values(*seed, len, 1.0)).unwrap()).unwrap();
    }
    p
}

/// Weighted sum so that no output coordinate is silently cancelled.
fn contract<'t>(v: Var<'t>, seed: u64) -> stden::Result<Var<'t>> {
    let shape = v.shape();
    let len = shape.iter().product();
    let w = v.tape().constant(Tensor::new(shape, random_values(seed, len, 1.0))?)?;
    v.mul(w)?.sum()
}

/// Grad-checks every tape primitive in isolation.
pub fn primitive_reports() -> Vec<(&'static str, GradCheckReport)> {
    let net = Arc::new(random_graph(3, 6, 5));
    let (n, m) = (net.node_count(), net.edge_count());
    let p = store(&[("a", vec![3, 4], 1), ("b", vec![3, 4], 2), ("c", vec![4, 2], 3), ("v", vec![4], 4), ("s", vec![], 5), ("z", vec![2, n, 2], 6), ("q", vec![m, 1], 7)]);
    let mut out = Vec::new();
    macro_rules! case {
        ($name:expr, |$t:ident, $s:ident| $body:expr) => {{
            let net = Arc::clone(&net);
            let r = grad_check(
                &p,
                |$t, $s| {
                    let _ = &net;
                    let x: Var = $body;
                    contract(x, 99)
                },
                None,
            )
            .unwrap();
            out.push(($name, r));
        }};
    }
    case!("add", |t, s| t.param(s, "a")?.add(t.param(s, "b")?)?);
    case!("add_scalar_broadcast", |t, s| t.param(s, "a")?.add(t.param(s, "s")?)?);
    case!("subtract", |t, s| t.param(s, "a")?.sub(t.param(s, "b")?)?);
    case!("hadamard", |t, s| t.param(s, "a")?.mul(t.param(s, "b")?)?);
    case!("scale", |t, s| t.param(s, "a")?.scale(-2.5)?);
    case!("matmul", |t, s| t.param(s, "a")?.matmul(t.param(s, "c")?)?);
    case!("matvec", |t, s| t.param(s, "a")?.matvec(t.param(s, "v")?)?);
    case!("tanh", |t, s| t.param(s, "a")?.tanh()?);
    case!("sigmoid", |t, s| t.param(s, "a")?.sigmoid()?);
    case!("softplus", |t, s| t.param(s, "a")?.softplus()?);
    case!("exp", |t, s| t.param(s, "a")?.exp()?);
    case!("log", |t, s| t.param(s, "a")?.mul(t.param(s, "a")?)?.add_scalar(0.5)?.log()?);
    case!("sum", |t, s| t.param(s, "a")?.tanh()?.sum()?.mul(t.param(s, "s")?)?);
    case!("mean", |t, s| t.param(s, "a")?.tanh()?.mean()?.mul(t.param(s, "s")?)?);
    case!("concat", |t, s| t.concat(&[t.param(s, "a")?, t.param(s, "b")?.tanh()?], 1)?);
    case!("slice", |t, s| t.param(s, "a")?.slice(1, 1, 3)?);
    case!("transpose", |t, s| t.param(s, "a")?.transpose()?.matmul(t.param(s, "b")?)?);
    case!("reshape", |t, s| t.param(s, "a")?.reshape(&[4, 3])?.matmul(t.param(s, "a")?)?);
    case!("broadcast", |t, s| t.param(s, "v")?.broadcast_to(&[3, 4])?.mul(t.param(s, "a")?)?);
    case!("graph_gradient", |t, s| t.param(s, "z")?.graph_gradient(&net)?.tanh()?);
    case!("graph_divergence", |t, s| t.param(s, "q")?.graph_divergence(&net)?.tanh()?);
    case!("graph_laplacian", |t, s| t.param(s, "z")?.graph_laplacian(&net)?.sigmoid()?);
    out
}

/// Loss over an RK4-unrolled tanh diffusion trajectory, checked against
/// finite differences in `rho`, `alpha` and `z0`.
pub fn rk4_trajectory_report() -> GradCheckReport {
    let net = Arc::new(random_graph(11, 7, 6));
    let n = net.node_count();
    let p = store(&[("rho", vec![1, n, 1], 21), ("alpha", vec![], 22), ("z0", vec![1, n, 1], 23)]);
    let times: Vec<f64> = (0..=5).map(f64::from).collect();
    grad_check(&p, |t, s| trajectory_loss(t, s, &net, &times), None).unwrap()
}

fn trajectory_loss<'t>(t: &'t stden::Tape, s: &ParamStore, net: &Arc<RoadNetwork>, times: &[f64]) -> stden::Result<Var<'t>> {
    let phi = t.param(s, "rho")?.softplus()?;
    let alpha = t.param(s, "alpha")?;
    let rhs = |z: &Var<'t>, _t: f64| phi.mul(alpha.mul(z.graph_laplacian(net)?)?.tanh()?)?.scale(-1.0);
    let traj = integrate(rhs, t.param(s, "z0")?, times, &SolverConfig::rk4(4))?;
    let mut loss = t.constant(Tensor::scalar(0.0))?;
    for (k, z) in traj.states.iter().enumerate().skip(1) {
        loss = loss.add(contract(*z, 40 + k as u64)?)?;
    }
    Ok(loss)
}

/// Probe step for the full model check. Some recurrent-weight gradients
/// are ~1e-7 against a loss of ~1, so the default 1e-6 step leaves
/// round-off of the same order as the gradient itself.
pub const MODEL_REL_STEP: f64 = 1e-5;

/// The full training loss (NLL + KL) of a d = 2, T = H = 3 model on a
/// 5-node, 8-edge network.
pub fn full_model_report() -> GradCheckReport {
    let net = Arc::new(
        RoadNetwork::parse("5\n0 1 1\n1 2 1\n2 3 1\n3 4 1\n4 0 1\n1 0 1\n2 4 1\n3 1 1\n").unwrap(),
    );
    let cfg = ModelConfig {
        history_len: 3,
        horizon: 3,
        latent_channels: 2,
        gru_hidden: 6,
        ..ModelConfig::default()
    };
    let model = Model::new(cfg, Arc::clone(&net), Normalizer::default(), 5).unwrap();
    let b = 2;
    let batch = Batch {
        history: Tensor::new(vec![b, 3, 8], random_values(31, b * 24, 1.5)).unwrap(),
        target: Tensor::new(vec![b, 3, 8], random_values(32, b * 24, 1.5)).unwrap(),
    };
    let eps = Tensor::new(vec![b, 5, 2], random_values(33, b * 10, 1.0)).unwrap();
    grad_check(
        model.params(),
        |t, s| Ok(model.loss_on(t, s, &batch, Some(&eps), 1.0, 0.1)?.0),
        Some(MODEL_REL_STEP),
    )
    .unwrap()
}

/// `−φ ⊙ (αΔz)` on plain tensors.
pub fn linear_rhs<'a>(net: &'a RoadNetwork, phi: &[f64], alpha: f64) -> impl Fn(&Tensor, f64) -> stden::Result<Tensor> + 'a {
    let phi = phi.to_vec();
    move |z: &Tensor, _t| {
        let mut lap = net.laplacian_tensor(z)?;
        let d = z.shape()[1];
        for (k, v) in lap.data_mut().iter_mut().enumerate() {
            *v *= -alpha * phi[k / d];
        }
        Ok(lap)
    }
}

pub fn random_phi(seed: u64, n: usize) -> Vec<f64> {
    random_values(seed, n, 1.0).into_iter().map(|u| 2f64.powf(u)).collect()
}

/// Worst relative drift of `Σ z_i/φ_i` over 100 unit intervals, relative to
/// `Σ |z_i|/φ_i` at the start.
pub fn conservation_drift(cfg: &SolverConfig, seed: u64) -> f64 {
    let net = random_graph(seed, 20, 25);
    let n = net.node_count();
    let phi = random_phi(seed + 1, n);
    let z0 = Tensor::new(vec![n, 1], random_values(seed + 2, n, 5.0)).unwrap();
    let energy = |z: &Tensor| z.data().iter().zip(&phi).map(|(v, p)| v / p).sum::<f64>();
    let scale: f64 = z0.data().iter().zip(&phi).map(|(v, p)| v.abs() / p).sum();
    let e0 = energy(&z0);
    let times: Vec<f64> = (0..=100).map(f64::from).collect();
    let traj = integrate(linear_rhs(&net, &phi, 0.3), z0, &times, cfg).unwrap();
    traj.states.iter().map(|z| (energy(z) - e0).abs() / scale).fold(0.0, f64::max)
}

/// Largest deviation of dopri5 from `expm(−α·diag(φ)·Δ·t)·z0`, divided by
/// `‖z0‖∞`, on a random 10-node network.
pub fn expm_oracle_error(seed: u64) -> f64 {
    let net = random_graph(seed, 10, 8);
    let n = net.node_count();
    let phi = random_phi(seed + 1, n);
    let alpha = 0.4;
    let z0 = Tensor::new(vec![n, 1], random_values(seed + 2, n, 3.0)).unwrap();
    let times: Vec<f64> = (0..=6).map(|k| 0.5 * f64::from(k)).collect();
    let traj = integrate(linear_rhs(&net, &phi, alpha), z0.clone(), &times, &SolverConfig::dopri5(1e-3, 1e-4)).unwrap();
    let a = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(phi.clone())) * dense_laplacian(&net) * (-alpha);
    let zmax = z0.max_abs();
    let mut worst = 0.0f64;
    for (t, z) in times.iter().zip(&traj.states) {
        let exact = (&a * *t).exp() * to_dvec(&z0);
        worst = worst.max(max_abs_diff(z.data(), exact.as_slice()) / zmax);
    }
    worst
}

/// Least-squares slope of log error against log step for RK4 on `z' = −z`
/// over `[0, 1]`.
pub fn rk4_observed_order() -> f64 {
    let exact = (-1.0f64).exp();
    let pts: Vec<(f64, f64)> = [4usize, 8, 16, 32, 64]
        .iter()
        .map(|&k| {
            let traj = integrate(|y: &Tensor, _| Ok(y.scaled(-1.0)), Tensor::scalar(1.0), &[0.0, 1.0], &SolverConfig::rk4(k)).unwrap();
            let err = (traj.states[1].item().unwrap() - exact).abs();
            ((1.0 / k as f64).ln(), err.ln())
        })
        .collect();
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / pts.len() as f64;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / pts.len() as f64;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    sxy / sxx
}

/// dopri5 NFE on the diffusion problem for each rtol in `rtols`.
pub fn nfe_by_rtol(seed: u64, rtols: &[f64]) -> Vec<usize> {
    let net = random_graph(seed, 15, 15);
    let n = net.node_count();
    let phi = random_phi(seed + 1, n);
    let z0 = Tensor::new(vec![n, 1], random_values(seed + 2, n, 3.0)).unwrap();
    let times: Vec<f64> = (0..=12).map(f64::from).collect();
    rtols
        .iter()
        .map(|&r| {
            let cfg = SolverConfig { max_nfe: 1_000_000, ..SolverConfig::dopri5(r, r * 1e-1) };
            integrate(linear_rhs(&net, &phi, 0.3), z0.clone(), &times, &cfg).unwrap().nfe
        })
        .collect()
}
