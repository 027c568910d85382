//! The forecasting model and its ablations.
//!
//! Pipeline: a GRU reads the `T × |E|` flow history, an affine readout maps
//! its final state to a Gaussian over the initial node field (`μ`, `σ`),
//! the field is sampled with the reparametrization `z₀ = μ + ε ⊙ σ`,
//! evolved over `H` unit intervals by a graph ODE, and each state is
//! decoded to edge flows through the negative graph gradient.
//!
//! All tensors on the tape carry a leading batch dimension: histories are
//! `[B, T, |E|]`, node fields `[B, n, d]`, predictions `[B, H, |E|]`.

pub mod checkpoint;
pub mod physics;

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::Normalizer;
use crate::diffengine::{softplus_inv, ParamStore, Tape, Tensor, Var};
use crate::error::{shape_err, Error, Result};
use crate::graph::{NodeField, RoadNetwork};
use crate::odeint::{integrate, SolverConfig};
pub use physics::{euler_pef_step, pef_rhs, Physics, PhysicsParams};

/// Floor added to `softplus(s)` so that `σ` stays strictly positive.
pub const SIGMA_FLOOR: f64 = 1e-4;

/// Which dynamics (or none) sits between encoder and decoder.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Architecture {
    /// `−φ ⊙ tanh(α ⊙ Δz)`.
    #[default]
    Stden,
    /// Volume factor removed: `−tanh(α ⊙ Δz)`.
    IncP,
    /// Dynamics replaced by a one-hidden-layer MLP on the flattened field.
    UnkP,
    /// No latent field: an affine head maps the GRU state to all `H × |E|` outputs.
    GruDirect,
}

impl Architecture {
    pub fn name(self) -> &'static str {
        match self {
            Self::Stden => "stden",
            Self::IncP => "incp",
            Self::UnkP => "unkp",
            Self::GruDirect => "gru",
        }
    }

    pub fn has_latent_field(self) -> bool {
        !matches!(self, Self::GruDirect)
    }
}

impl std::str::FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stden" => Ok(Self::Stden),
            "incp" => Ok(Self::IncP),
            "unkp" => Ok(Self::UnkP),
            "gru" => Ok(Self::GruDirect),
            other => Err(Error::Config(format!("unknown model `{other}`"))),
        }
    }
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub history_len: usize,
    pub horizon: usize,
    pub latent_channels: usize,
    pub gru_hidden: usize,
    pub solver: SolverConfig,
    pub architecture: Architecture,
    /// Activation inside the physics dynamics (STDEN and IncP only).
    pub physics: Physics,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            history_len: 12,
            horizon: 12,
            latent_channels: 1,
            gru_hidden: 64,
            solver: SolverConfig::default(),
            architecture: Architecture::Stden,
            physics: Physics::Tanh,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.history_len == 0 || self.horizon == 0 {
            return Err(Error::Config("history_len and horizon must be at least 1".into()));
        }
        if self.latent_channels == 0 || self.gru_hidden == 0 {
            return Err(Error::Config("latent_channels and gru_hidden must be at least 1".into()));
        }
        self.solver.validate()
    }
}

/// One minibatch in normalized units.
#[derive(Clone, Debug)]
pub struct Batch {
    /// `[B, T, |E|]`
    pub history: Tensor,
    /// `[B, H, |E|]`
    pub target: Tensor,
}

/// Everything a forward pass records.
pub struct ForwardOutput<'t> {
    /// `[B, H, |E|]` normalized flows.
    pub predictions: Var<'t>,
    /// `[B, n, d]`, absent for [`Architecture::GruDirect`].
    pub mu: Option<Var<'t>>,
    pub sigma: Option<Var<'t>>,
    /// Latent states at `t₀, t₀+1, …, t₀+H`.
    pub states: Vec<Var<'t>>,
    pub nfe: usize,
}

/// Detached inference result.
#[derive(Clone, Debug)]
pub struct Prediction {
    /// `[B, H, |E|]` normalized flows.
    pub flows: Tensor,
    /// `H + 1` node fields `[B, n, d]` (empty for GRU-direct).
    pub states: Vec<Tensor>,
    pub nfe: usize,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    net: Arc<RoadNetwork>,
    params: ParamStore,
    normalizer: Normalizer,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let len = shape.iter().product();
    let data = (0..len).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

const GATES: [&str; 3] = ["z", "r", "n"];

impl Model {
    /// Builds a model with freshly initialized parameters.
    ///
    /// Weights are uniform in `±1/√fan_in`, biases zero, `φ` starts at 1,
    /// `α` at 0.1 and the decoder readout at `w = 1/d`, `b = 0`.
    pub fn new(config: ModelConfig, net: Arc<RoadNetwork>, normalizer: Normalizer, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, m) = (net.node_count(), net.edge_count());
        let (d, hid) = (config.latent_channels, config.gru_hidden);
        let mut p = ParamStore::new();
        let in_bound = 1.0 / (m as f64).sqrt();
        let hid_bound = 1.0 / (hid as f64).sqrt();
        for g in GATES {
            p.insert(format!("encoder.w_{g}"), uniform(&mut rng, &[m, hid], in_bound))?;
            p.insert(format!("encoder.u_{g}"), uniform(&mut rng, &[hid, hid], hid_bound))?;
            p.insert(format!("encoder.b_{g}"), Tensor::zeros(&[hid]))?;
        }
        match config.architecture {
            Architecture::GruDirect => {
                let out = config.horizon * m;
                p.insert("head.w", uniform(&mut rng, &[hid, out], hid_bound))?;
                p.insert("head.b", Tensor::zeros(&[out]))?;
            }
            arch => {
                for head in ["mu", "sigma"] {
                    p.insert(format!("encoder.{head}_w"), uniform(&mut rng, &[hid, n * d], hid_bound))?;
                    p.insert(format!("encoder.{head}_b"), Tensor::zeros(&[n * d]))?;
                }
                match arch {
                    Architecture::Stden => {
                        p.insert("dynamics.rho", Tensor::full(&[n], softplus_inv(1.0)))?;
                        p.insert("dynamics.alpha", Tensor::full(&[d], 0.1))?;
                    }
                    Architecture::IncP => {
                        p.insert("dynamics.alpha", Tensor::full(&[d], 0.1))?;
                    }
                    Architecture::UnkP => {
                        let (flat, wide) = (n * d, 4 * n * d);
                        p.insert("dynamics.w1", uniform(&mut rng, &[flat, wide], 1.0 / (flat as f64).sqrt()))?;
                        p.insert("dynamics.b1", Tensor::zeros(&[wide]))?;
                        p.insert("dynamics.w2", uniform(&mut rng, &[wide, flat], 1.0 / (wide as f64).sqrt()))?;
                        p.insert("dynamics.b2", Tensor::zeros(&[flat]))?;
                    }
                    Architecture::GruDirect => unreachable!(),
                }
                p.insert("decoder.w", Tensor::full(&[d], 1.0 / d as f64))?;
                p.insert("decoder.b", Tensor::scalar(0.0))?;
            }
        }
        Ok(Self {
            config,
            net,
            params: p,
            normalizer,
        })
    }

    /// Reassembles a model from stored parameters, checking every expected
    /// tensor is present with the right shape.
    pub fn from_parts(config: ModelConfig, net: Arc<RoadNetwork>, normalizer: Normalizer, params: ParamStore) -> Result<Self> {
        let template = Self::new(config.clone(), Arc::clone(&net), normalizer.clone(), 0)?;
        if template.params.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                template.params.len(),
                params.len()
            )));
        }
        for (name, p) in template.params.iter() {
            let got = params
                .get(name)
                .map_err(|_| Error::Checkpoint(format!("missing parameter `{name}`")))?;
            if got.shape() != p.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    got.shape(),
                    p.value.shape()
                )));
            }
        }
        Ok(Self {
            config,
            net,
            params,
            normalizer,
        })
    }

    /// Sets every parameter to zero except `φ`, which stays at 1, and the
    /// decoder readout, which stays at its default.
    pub fn zero_weights(&mut self) {
        for (name, p) in self.params.iter_mut() {
            if name.starts_with("encoder.") || name.starts_with("head.") || name == "dynamics.w1" || name == "dynamics.w2" {
                p.value.data_mut().iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn network(&self) -> &Arc<RoadNetwork> {
        &self.net
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn normalizer(&self) -> &Normalizer {
        &self.normalizer
    }

    /// Number of scalars in the dynamics block.
    pub fn dynamics_param_count(&self) -> usize {
        self.params.scalar_count("dynamics.")
    }

    /// Current `φ` and `α` for the physics architectures.
    pub fn physics_params(&self) -> Option<PhysicsParams> {
        let alpha = self.params.get("dynamics.alpha").ok()?.data().to_vec();
        let phi = match self.params.get("dynamics.rho") {
            Ok(rho) => rho.data().iter().map(|&r| crate::diffengine::softplus(r)).collect(),
            Err(_) => vec![1.0; self.net.node_count()],
        };
        Some(PhysicsParams { phi, alpha })
    }

    fn bind<'t>(&self, tape: &'t Tape, store: &ParamStore, trainable: bool) -> Result<BTreeMap<String, Var<'t>>> {
        let mut out = BTreeMap::new();
        for name in self.params.names() {
            let v = if trainable {
                tape.param(store, name)?
            } else {
                tape.constant(store.get(name)?.clone())?
            };
            out.insert(name.to_string(), v);
        }
        Ok(out)
    }

    fn check_history(&self, history: &Tensor) -> Result<usize> {
        let s = history.shape();
        let (t, m) = (self.config.history_len, self.net.edge_count());
        if s.len() != 3 || s[1] != t || s[2] != m {
            return Err(shape_err("history", format!("[B, {t}, {m}]"), s));
        }
        Ok(s[0])
    }

    /// Records a forward pass for a batch of normalized histories.
    ///
    /// `eps` (`[B, n, d]`) supplies the reparametrization noise; `None`
    /// means the deterministic mean path. With `trainable` unset the
    /// parameters enter as constants and nothing is differentiable.
    pub fn forward_on<'t>(&self, tape: &'t Tape, store: &ParamStore, history: &Tensor, eps: Option<&Tensor>, trainable: bool) -> Result<ForwardOutput<'t>> {
        let b = self.check_history(history)?;
        let v = self.bind(tape, store, trainable)?;
        let p = |name: &str| -> Result<Var<'t>> { v.get(name).copied().ok_or_else(|| Error::UnknownParam(name.to_string())) };
        let hidden = self.encode_gru(tape, &p, history, b)?;
        let (n, m, d, h_len) = (self.net.node_count(), self.net.edge_count(), self.config.latent_channels, self.config.horizon);

        if self.config.architecture == Architecture::GruDirect {
            let out = hidden.matmul(p("head.w")?)?.add(p("head.b")?.broadcast_to(&[b, h_len * m])?)?;
            return Ok(ForwardOutput {
                predictions: out.reshape(&[b, h_len, m])?,
                mu: None,
                sigma: None,
                states: Vec::new(),
                nfe: 0,
            });
        }

        let field = [b, n, d];
        let mu = hidden
            .matmul(p("encoder.mu_w")?)?
            .add(p("encoder.mu_b")?.broadcast_to(&[b, n * d])?)?
            .reshape(&field)?;
        let sigma = hidden
            .matmul(p("encoder.sigma_w")?)?
            .add(p("encoder.sigma_b")?.broadcast_to(&[b, n * d])?)?
            .softplus()?
            .add_scalar(SIGMA_FLOOR)?
            .reshape(&field)?;
        let z0 = match eps {
            Some(e) => {
                if e.shape() != field {
                    return Err(shape_err("eps", field, e.shape()));
                }
                sample_z0(mu, sigma, tape.constant(e.clone())?)?
            }
            None => mu,
        };

        let rhs = self.dynamics_fn(tape, &p, b)?;
        let times: Vec<f64> = (0..=h_len).map(|k| k as f64).collect();
        let traj = integrate(|z: &Var<'t>, _t| rhs(*z), z0, &times, &self.config.solver)?;

        let w = p("decoder.w")?.reshape(&[d, 1])?;
        let bias = p("decoder.b")?;
        let mut steps = Vec::with_capacity(h_len);
        for z in &traj.states[1..] {
            steps.push(decode_state(&self.net, *z, w, bias, b)?);
        }
        let predictions = tape.concat(&steps, 1)?;
        Ok(ForwardOutput {
            predictions,
            mu: Some(mu),
            sigma: Some(sigma),
            states: traj.states,
            nfe: traj.nfe,
        })
    }

    fn encode_gru<'t>(&self, tape: &'t Tape, p: &dyn Fn(&str) -> Result<Var<'t>>, history: &Tensor, b: usize) -> Result<Var<'t>> {
        let (t_len, m, hid) = (self.config.history_len, self.net.edge_count(), self.config.gru_hidden);
        // time-major copy so each step is a contiguous row block
        let mut tm = Vec::with_capacity(history.len());
        for t in 0..t_len {
            for bi in 0..b {
                let off = (bi * t_len + t) * m;
                tm.extend_from_slice(&history.data()[off..off + m]);
            }
        }
        let x_all = tape.constant(Tensor::new(vec![t_len * b, m], tm)?)?;
        let mut proj = Vec::new();
        let mut recur = Vec::new();
        for g in GATES {
            let bias = p(&format!("encoder.b_{g}"))?.broadcast_to(&[t_len * b, hid])?;
            proj.push(x_all.matmul(p(&format!("encoder.w_{g}"))?)?.add(bias)?);
            recur.push(p(&format!("encoder.u_{g}"))?);
        }
        let mut h: Option<Var<'t>> = None;
        for t in 0..t_len {
            let xs: Vec<Var<'t>> = proj.iter().map(|x| x.slice(0, t * b, (t + 1) * b)).collect::<Result<_>>()?;
            let step = match h {
                // h = 0: recurrent terms vanish and the update reduces to (1 − z) ⊙ n
                None => {
                    let z = xs[0].sigmoid()?;
                    let n = xs[2].tanh()?;
                    n.sub(z.mul(n)?)?
                }
                Some(h) => {
                    let z = xs[0].add(h.matmul(recur[0])?)?.sigmoid()?;
                    let r = xs[1].add(h.matmul(recur[1])?)?.sigmoid()?;
                    let n = xs[2].add(r.mul(h)?.matmul(recur[2])?)?.tanh()?;
                    n.add(z.mul(h.sub(n)?)?)?
                }
            };
            h = Some(step);
        }
        Ok(h.expect("history_len >= 1"))
    }

    fn dynamics_fn<'t>(&self, tape: &'t Tape, p: &dyn Fn(&str) -> Result<Var<'t>>, b: usize) -> Result<Box<dyn Fn(Var<'t>) -> Result<Var<'t>> + 't>> {
        let (n, d) = (self.net.node_count(), self.config.latent_channels);
        let field = [b, n, d];
        let net = Arc::clone(&self.net);
        let linear = self.config.physics == Physics::Linear;
        let act = move |x: Var<'t>| if linear { Ok(x) } else { x.tanh() };
        Ok(match self.config.architecture {
            Architecture::Stden => {
                let neg_phi = p("dynamics.rho")?.softplus()?.scale(-1.0)?.reshape(&[1, n, 1])?.broadcast_to(&field)?;
                let alpha = p("dynamics.alpha")?.reshape(&[1, 1, d])?.broadcast_to(&field)?;
                Box::new(move |z: Var<'t>| neg_phi.mul(act(alpha.mul(z.graph_laplacian(&net)?)?)?))
            }
            Architecture::IncP => {
                let alpha = p("dynamics.alpha")?.reshape(&[1, 1, d])?.broadcast_to(&field)?;
                Box::new(move |z: Var<'t>| act(alpha.mul(z.graph_laplacian(&net)?)?)?.scale(-1.0))
            }
            Architecture::UnkP => {
                let (w1, w2) = (p("dynamics.w1")?, p("dynamics.w2")?);
                let b1 = p("dynamics.b1")?.broadcast_to(&[b, 4 * n * d])?;
                let b2 = p("dynamics.b2")?.broadcast_to(&[b, n * d])?;
                let _ = tape;
                Box::new(move |z: Var<'t>| {
                    let hidden = z.reshape(&[b, n * d])?.matmul(w1)?.add(b1)?.tanh()?;
                    hidden.matmul(w2)?.add(b2)?.reshape(&field)
                })
            }
            Architecture::GruDirect => return Err(Error::Config("GRU-direct has no latent dynamics".into())),
        })
    }

    /// Negative log-likelihood of a batch plus the optional KL term.
    /// Returns the loss node and the solver's evaluation count.
    pub fn loss_on<'t>(&self, tape: &'t Tape, store: &ParamStore, batch: &Batch, eps: Option<&Tensor>, obs_sigma: f64, kl_weight: f64) -> Result<(Var<'t>, usize)> {
        let out = self.forward_on(tape, store, &batch.history, eps, true)?;
        if out.predictions.shape() != batch.target.shape() {
            return Err(shape_err("target", out.predictions.shape(), batch.target.shape()));
        }
        let target = tape.constant(batch.target.clone())?;
        let mut loss = crate::train::nll_loss(out.predictions, target, obs_sigma)?;
        if kl_weight > 0.0 {
            if let (Some(mu), Some(sigma)) = (out.mu, out.sigma) {
                loss = loss.add(crate::train::kl_penalty(mu, sigma)?.scale(kl_weight)?)?;
            }
        }
        Ok((loss, out.nfe))
    }

    /// Deterministic (`ε ≡ 0`) prediction for normalized histories.
    pub fn predict_normalized(&self, history: &Tensor) -> Result<Prediction> {
        self.predict_with(history, None)
    }

    pub fn predict_with(&self, history: &Tensor, eps: Option<&Tensor>) -> Result<Prediction> {
        let tape = Tape::new();
        let out = self.forward_on(&tape, &self.params, history, eps, false)?;
        Ok(Prediction {
            flows: (*out.predictions.value()).clone(),
            states: out.states.iter().map(|s| (*s.value()).clone()).collect(),
            nfe: out.nfe,
        })
    }

    /// `(μ, σ)` of the initial field for one normalized `T × |E|` history.
    pub fn encode(&self, history: &Tensor) -> Result<(NodeField, NodeField)> {
        if !self.config.architecture.has_latent_field() {
            return Err(Error::Config("GRU-direct has no latent field".into()));
        }
        let (t, m) = (self.config.history_len, self.net.edge_count());
        let h = history.clone().reshaped(&[1, t, m])?;
        let tape = Tape::new();
        let out = self.forward_on(&tape, &self.params, &h, None, false)?;
        let (n, d) = (self.net.node_count(), self.config.latent_channels);
        let mu = (*out.mu.expect("latent").value()).clone().reshaped(&[n, d])?;
        let sigma = (*out.sigma.expect("latent").value()).clone().reshaped(&[n, d])?;
        Ok((NodeField::from_tensor(mu)?, NodeField::from_tensor(sigma)?))
    }

    /// Time derivative of a single `n × d` field under the model's dynamics.
    pub fn dynamics(&self, z: &NodeField, _t: f64) -> Result<NodeField> {
        let (n, d) = (self.net.node_count(), self.config.latent_channels);
        let tape = Tape::new();
        let v = self.bind(&tape, &self.params, false)?;
        let p = |name: &str| -> Result<Var<'_>> { v.get(name).copied().ok_or_else(|| Error::UnknownParam(name.to_string())) };
        let rhs = self.dynamics_fn(&tape, &p, 1)?;
        let z = tape.constant(z.0.clone().reshaped(&[1, n, d])?)?;
        let out = rhs(z)?;
        NodeField::from_tensor((*out.value()).clone().reshaped(&[n, d])?)
    }

    /// Decodes a sequence of `n × d` fields to `len × |E|` flows.
    pub fn decode(&self, states: &[NodeField]) -> Result<Tensor> {
        let (n, d, m) = (self.net.node_count(), self.config.latent_channels, self.net.edge_count());
        let tape = Tape::new();
        let w = tape.constant(self.params.get("decoder.w")?.clone().reshaped(&[d, 1])?)?;
        let b = tape.constant(self.params.get("decoder.b")?.clone())?;
        let mut out = Vec::with_capacity(states.len() * m);
        for z in states {
            let zv = tape.constant(z.0.clone().reshaped(&[1, n, d])?)?;
            out.extend_from_slice(decode_state(&self.net, zv, w, b, 1)?.value().data());
        }
        Tensor::new(vec![states.len(), m], out)
    }
}

/// `z₀ = μ + ε ⊙ σ`.
pub fn sample_z0<'t>(mu: Var<'t>, sigma: Var<'t>, eps: Var<'t>) -> Result<Var<'t>> {
    if sigma.value().data().iter().any(|&s| s <= 0.0) {
        return Err(Error::Config("sigma must be positive".into()));
    }
    mu.add(eps.mul(sigma)?)
}

/// Flows for one batch of fields: `wᵀ(−∇z)_e + b`, shaped `[B, 1, |E|]`.
fn decode_state<'t>(net: &Arc<RoadNetwork>, z: Var<'t>, w: Var<'t>, bias: Var<'t>, b: usize) -> Result<Var<'t>> {
    let m = net.edge_count();
    let d = w.shape()[0];
    z.graph_gradient(net)?
        .reshape(&[b * m, d])?
        .matmul(w)?
        .scale(-1.0)?
        .add(bias)?
        .reshape(&[b, 1, m])
}
