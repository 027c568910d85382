//! Synthetic road networks and flows generated from known potential-field
//! physics.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{FlowSeries, STEPS_PER_DAY};
use crate::diffengine::Tensor;
use crate::error::{Error, Result};
use crate::graph::{Edge, RoadNetwork};
use crate::model::{pef_rhs, Physics, PhysicsParams};
use crate::odeint::{integrate, SolverConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub nodes: usize,
    /// Target mean out-degree; the edge count is `round(nodes · out_degree)`.
    pub out_degree: f64,
    pub seed: u64,
    pub steps: usize,
    pub alpha: f64,
    /// `φ*` is drawn log-uniform in `[phi_min, phi_max]`.
    pub phi_min: f64,
    pub phi_max: f64,
    pub mode: Physics,
    /// Neighbour-averaging passes applied to white noise to get a smooth field.
    pub smoothness: usize,
    /// Flow std right after each excitation.
    pub amplitude: f64,
    /// Observation noise std as a fraction of the clean flow std.
    pub noise: f64,
    /// Steps between re-excitations.
    pub period: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            nodes: 50,
            out_degree: 3.0,
            seed: 0,
            steps: 14 * STEPS_PER_DAY,
            alpha: 0.2,
            phi_min: 0.5,
            phi_max: 2.0,
            mode: Physics::Tanh,
            smoothness: 5,
            amplitude: 1.0,
            noise: 0.05,
            period: STEPS_PER_DAY,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.nodes < 3 {
            return Err(Error::Config(format!("nodes must be at least 3, got {}", self.nodes)));
        }
        if !(self.alpha > 0.0) || !(self.phi_min > 0.0) || !(self.phi_max >= self.phi_min) {
            return Err(Error::Config("alpha and phi range must be positive".into()));
        }
        if !(self.amplitude > 0.0) || !(self.noise >= 0.0) || self.steps == 0 || self.period == 0 {
            return Err(Error::Config("amplitude must be positive, noise non-negative, steps and period positive".into()));
        }
        Ok(())
    }
}

/// Known dynamics behind a simulation.
pub type GroundTruth = PhysicsParams;

/// Output of [`simulate`].
#[derive(Clone, Debug)]
pub struct Simulation {
    /// `S × |E|` observed flows.
    pub flows: FlowSeries,
    /// `S × n` true potentials.
    pub potentials: FlowSeries,
    pub truth: GroundTruth,
    pub nfe: usize,
}

/// Ordering distance within which arcs are drawn.
const LOCAL_WINDOW: usize = 3;

/// Directed arcs between nodes at most `window` apart in an ordering of `n`.
fn local_pairs(n: usize, window: usize) -> usize {
    (1..=window.min(n - 1)).map(|off| n - off).sum()
}

/// Connected random digraph: a random spanning tree, extra random arcs and
/// reciprocal arcs for about a fifth of the edges. Nodes are placed in a
/// random order and arcs only join nodes a few places apart, which keeps the
/// diameter road-like.
pub fn random_network(cfg: &SynthConfig) -> Result<RoadNetwork> {
    cfg.validate()?;
    let n = cfg.nodes;
    let target = (n as f64 * cfg.out_degree).round() as usize;
    if target < n - 1 || target > n * (n - 1) {
        return Err(Error::Config(format!(
            "out_degree {} gives {target} edges; {n} nodes need between {} and {}",
            cfg.out_degree,
            n - 1,
            n * (n - 1)
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let base = ((target as f64 / 1.2).round() as usize).max(n - 1);
    // arcs join nodes close in a random ordering, like a road corridor
    let mut window = LOCAL_WINDOW.min(n - 1);
    while window < n - 1 && local_pairs(n, window) < base {
        window += 1;
    }
    // base arcs take distinct node pairs, so reverse arcs come only from the
    // reciprocal pass below (unless the graph is too dense for that)
    let distinct = base <= n * (n - 1) / 2;
    let mut present = vec![false; n * n];
    let mut arcs: Vec<(usize, usize)> = Vec::with_capacity(target);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    for k in 1..n {
        let a = order[k];
        let b = order[rng.gen_range(k.saturating_sub(window)..k)];
        let (s, d) = if rng.gen_bool(0.5) { (a, b) } else { (b, a) };
        present[s * n + d] = true;
        arcs.push((s, d));
    }
    while arcs.len() < base {
        let k = rng.gen_range(0..n - 1);
        let j = (k + rng.gen_range(1..=window)).min(n - 1);
        let (s, d) = if rng.gen_bool(0.5) { (order[k], order[j]) } else { (order[j], order[k]) };
        if !present[s * n + d] && !(distinct && present[d * n + s]) {
            present[s * n + d] = true;
            arcs.push((s, d));
        }
    }
    let mut lonely: Vec<usize> = (0..arcs.len()).filter(|&k| !present[arcs[k].1 * n + arcs[k].0]).collect();
    lonely.shuffle(&mut rng);
    for k in lonely {
        if arcs.len() >= target {
            break;
        }
        let (s, d) = arcs[k];
        if !present[d * n + s] {
            present[d * n + s] = true;
            arcs.push((d, s));
        }
    }
    while arcs.len() < target {
        let s = rng.gen_range(0..n);
        let d = rng.gen_range(0..n);
        if s != d && !present[s * n + d] {
            present[s * n + d] = true;
            arcs.push((s, d));
        }
    }
    RoadNetwork::new(n, arcs.into_iter().map(|(src, dst)| Edge { src, dst, weight: 1.0 }).collect())
}

/// Gaussian white noise low-pass filtered by `passes` rounds of
/// neighbourhood averaging, then scaled so `−∇z` has unit std.
pub fn smooth_field(net: &RoadNetwork, passes: usize, rng: &mut impl Rng) -> Vec<f64> {
    let nbrs = net.neighbours();
    let mut z: Vec<f64> = (0..net.node_count()).map(|_| rng.sample(StandardNormal)).collect();
    for _ in 0..passes {
        z = (0..z.len())
            .map(|i| (z[i] + nbrs[i].iter().map(|&j| z[j]).sum::<f64>()) / (1 + nbrs[i].len()) as f64)
            .collect();
    }
    let g: Vec<f64> = net.edges().iter().map(|e| z[e.src] - z[e.dst]).collect();
    let s = std_dev(&g);
    if s > 0.0 {
        z.iter_mut().for_each(|v| *v /= s);
    }
    z
}

fn scaled(mut z: Vec<f64>, c: f64) -> Vec<f64> {
    z.iter_mut().for_each(|v| *v *= c);
    z
}

fn std_dev(v: &[f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / v.len() as f64).sqrt()
}

/// Draws `φ*` and simulates from a fresh smooth field.
pub fn simulate(net: &RoadNetwork, cfg: &SynthConfig) -> Result<Simulation> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let (lo, hi) = (cfg.phi_min.ln(), cfg.phi_max.ln());
    let phi = (0..net.node_count()).map(|_| if hi > lo { rng.gen_range(lo..hi).exp() } else { lo.exp() }).collect();
    let truth = PhysicsParams {
        phi,
        alpha: vec![cfg.alpha],
    };
    simulate_with(net, cfg, truth, None, &mut rng)
}

/// Simulates from a given initial field and known parameters.
pub fn simulate_from(net: &RoadNetwork, cfg: &SynthConfig, truth: GroundTruth, z0: Vec<f64>) -> Result<Simulation> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    simulate_with(net, cfg, truth, Some(z0), &mut rng)
}

fn simulate_with(net: &RoadNetwork, cfg: &SynthConfig, truth: GroundTruth, z0: Option<Vec<f64>>, rng: &mut ChaCha8Rng) -> Result<Simulation> {
    let n = net.node_count();
    if truth.phi.len() != n || truth.alpha.len() != 1 || truth.phi.iter().any(|&p| !(p > 0.0)) {
        return Err(Error::Config("ground truth must have n positive volumes and one alpha".into()));
    }
    let inv_phi_sum: f64 = truth.phi.iter().map(|p| 1.0 / p).sum();
    let solver = SolverConfig {
        max_nfe: 10_000_000,
        ..SolverConfig::dopri5(1e-6, 1e-9)
    };
    let mut z = match z0 {
        Some(z) if z.len() == n => z,
        Some(z) => return Err(Error::Config(format!("initial field has {} values for {n} nodes", z.len()))),
        None => scaled(smooth_field(net, cfg.smoothness, rng), cfg.amplitude),
    };
    let mut potentials = Vec::with_capacity(cfg.steps * n);
    let mut nfe = 0;
    let mut t = 0;
    while t < cfg.steps {
        if t > 0 {
            let energy = truth.energy(&Tensor::vector(z.clone()));
            let mut w = scaled(smooth_field(net, cfg.smoothness, rng), cfg.amplitude);
            let shift = (energy - truth.energy(&Tensor::vector(w.clone()))) / inv_phi_sum;
            w.iter_mut().for_each(|v| *v += shift);
            z = w;
        }
        let seg = cfg.period.min(cfg.steps - t);
        let times: Vec<f64> = (0..seg).map(|k| k as f64).collect();
        let z0 = Tensor::new(vec![n, 1], z)?;
        let traj = integrate(|y: &Tensor, _| pef_rhs(net, &truth, cfg.mode, y), z0, &times, &solver)?;
        nfe += traj.nfe;
        for s in &traj.states {
            potentials.extend_from_slice(s.data());
        }
        z = traj.states.last().expect("non-empty").data().to_vec();
        t += seg;
    }

    let m = net.edge_count();
    let mut flows = Vec::with_capacity(cfg.steps * m);
    for row in potentials.chunks(n) {
        flows.extend(net.edges().iter().map(|e| -(row[e.src] - row[e.dst])));
    }
    if cfg.noise > 0.0 {
        let sd = cfg.noise * std_dev(&flows);
        for f in flows.iter_mut() {
            *f += sd * rng.sample::<f64, _>(StandardNormal);
        }
    }
    Ok(Simulation {
        flows: FlowSeries::new(m, flows)?,
        potentials: FlowSeries::new(n, potentials)?,
        truth,
        nfe,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(mode: Physics, noise: f64) -> SynthConfig {
        SynthConfig {
            nodes: 12,
            steps: 150,
            period: 60,
            mode,
            noise,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn tiny_network() {
        let cfg = SynthConfig {
            nodes: 3,
            out_degree: 2.0,
            ..SynthConfig::default()
        };
        let net = random_network(&cfg).unwrap();
        assert_eq!(net.edge_count(), 6);
        assert!(net.edges().iter().all(|e| e.src != e.dst));
        assert_eq!(random_network(&cfg).unwrap().edges(), net.edges());
        let too_small = SynthConfig { nodes: 2, ..cfg };
        assert!(random_network(&too_small).is_err());
    }

    #[test]
    fn default_network_size() {
        let net = random_network(&SynthConfig::default()).unwrap();
        assert_eq!(net.node_count(), 50);
        assert_eq!(net.edge_count(), 150);
        let n = net.node_count();
        let mut seen = std::collections::HashSet::new();
        let mut recip = 0;
        for e in net.edges() {
            assert!(seen.insert(e.src * n + e.dst), "duplicate arc");
        }
        for e in net.edges() {
            if seen.contains(&(e.dst * n + e.src)) {
                recip += 1;
            }
        }
        // reciprocal pairs count twice
        assert!((40..=80).contains(&recip), "{recip}");
    }

    #[test]
    fn infeasible_degree() {
        let cfg = SynthConfig {
            nodes: 4,
            out_degree: 5.0,
            ..SynthConfig::default()
        };
        assert!(random_network(&cfg).is_err());
    }

    #[test]
    fn linear_noiseless_conserves_energy() {
        let cfg = small(Physics::Linear, 0.0);
        let net = random_network(&cfg).unwrap();
        let sim = simulate(&net, &cfg).unwrap();
        let e: Vec<f64> = (0..cfg.steps)
            .map(|t| sim.truth.energy(&Tensor::vector(sim.potentials.row(t).to_vec())))
            .collect();
        let scale: f64 = sim.potentials.row(0).iter().zip(&sim.truth.phi).map(|(z, p)| z.abs() / p).sum();
        for v in &e {
            assert!((v - e[0]).abs() <= 1e-9 * scale, "{v} vs {}", e[0]);
        }
    }

    #[test]
    fn noiseless_flows_are_negative_gradients() {
        let cfg = small(Physics::Linear, 0.0);
        let net = random_network(&cfg).unwrap();
        let sim = simulate(&net, &cfg).unwrap();
        for t in [0, 77, 149] {
            let z = sim.potentials.row(t);
            let f: Vec<f64> = net.edges().iter().map(|e| -(z[e.src] - z[e.dst])).collect();
            assert_eq!(sim.flows.row(t), &f[..]);
        }
    }

    #[test]
    fn constant_field_gives_zero_flows() {
        let cfg = SynthConfig {
            steps: 40,
            ..small(Physics::Tanh, 0.0)
        };
        let net = random_network(&cfg).unwrap();
        let truth = PhysicsParams {
            phi: vec![1.0; 12],
            alpha: vec![0.2],
        };
        let sim = simulate_from(&net, &cfg, truth, vec![0.7; 12]).unwrap();
        assert!(sim.flows.values().iter().all(|&f| f == 0.0));
    }

    #[test]
    fn tanh_mode_sup_norm_decreases_between_excitations() {
        let cfg = small(Physics::Tanh, 0.0);
        let net = random_network(&cfg).unwrap();
        let sim = simulate(&net, &cfg).unwrap();
        let sup = |t: usize| sim.potentials.row(t).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for t in 1..cfg.steps {
            if t % cfg.period != 0 {
                assert!(sup(t) <= sup(t - 1) + 1e-9, "step {t}");
            }
        }
    }

    #[test]
    fn deterministic_and_unit_scale() {
        let cfg = small(Physics::Tanh, 0.05);
        let net = random_network(&cfg).unwrap();
        let a = simulate(&net, &cfg).unwrap();
        let b = simulate(&net, &cfg).unwrap();
        assert_eq!(a.flows, b.flows);
        let first: Vec<f64> = a.flows.row(0).to_vec();
        let s = std_dev(&first);
        assert!((0.8..1.25).contains(&s), "{s}");
    }
}
