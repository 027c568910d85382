//! Explicit Runge–Kutta integration of `dz/dt = F(z, t)`.
//!
//! Two methods are provided: classical fixed-step RK4 (used for training,
//! deterministic cost) and adaptive Dormand–Prince 5(4) with FSAL reuse
//! (used for inference and accuracy/cost studies).
//!
//! The integrators are generic over [`OdeState`], so the same code runs on
//! plain tensors and on tape variables. On a tape every stage is recorded
//! and the trajectory is differentiable; the step-size controller only
//! reads values, so the accepted step sequence is frozen by the forward pass.

use std::ops::Deref;
use std::rc::Rc;

use crate::diffengine::{Tensor, Var};
use crate::error::{Error, Result, SolverFailure};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SolverMethod {
    Rk4,
    Dopri5,
}

impl std::str::FromStr for SolverMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rk4" => Ok(Self::Rk4),
            "dopri5" => Ok(Self::Dopri5),
            other => Err(Error::Config(format!("unknown solver method `{other}` (expected rk4 or dopri5)"))),
        }
    }
}

impl std::fmt::Display for SolverMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Rk4 => "rk4",
            Self::Dopri5 => "dopri5",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolverConfig {
    pub method: SolverMethod,
    pub rtol: f64,
    pub atol: f64,
    /// RK4 steps per output interval.
    pub substeps_per_interval: usize,
    pub max_nfe: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            method: SolverMethod::Rk4,
            rtol: 1e-3,
            atol: 1e-4,
            substeps_per_interval: 4,
            max_nfe: 10_000,
        }
    }
}

impl SolverConfig {
    pub fn dopri5(rtol: f64, atol: f64) -> Self {
        Self {
            method: SolverMethod::Dopri5,
            rtol,
            atol,
            ..Self::default()
        }
    }

    pub fn rk4(substeps_per_interval: usize) -> Self {
        Self {
            substeps_per_interval,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rtol > 0.0 && self.atol > 0.0) {
            return Err(Error::Config("solver tolerances must be positive".into()));
        }
        if self.substeps_per_interval == 0 {
            return Err(Error::Config("substeps_per_interval must be positive".into()));
        }
        if self.max_nfe < 10 {
            return Err(Error::Config("max_nfe must be at least 10".into()));
        }
        Ok(())
    }
}

/// Solution sampled at the requested times.
#[derive(Clone, Debug)]
pub struct Trajectory<S> {
    pub times: Vec<f64>,
    pub states: Vec<S>,
    /// Dynamics evaluations consumed.
    pub nfe: usize,
    pub accepted_steps: usize,
    pub rejected_steps: usize,
}

/// Read-only view of a state's values.
pub enum Values<'a> {
    Borrowed(&'a [f64]),
    Shared(Rc<Tensor>),
}

impl Deref for Values<'_> {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        match self {
            Values::Borrowed(s) => s,
            Values::Shared(t) => t.data(),
        }
    }
}

/// Vector-space operations the integrators need.
pub trait OdeState: Clone {
    /// `self + Σ cᵢ·termsᵢ`.
    fn combine(&self, terms: &[(f64, &Self)]) -> Result<Self>;
    fn values(&self) -> Values<'_>;
}

impl OdeState for Tensor {
    fn combine(&self, terms: &[(f64, &Self)]) -> Result<Self> {
        let mut out = self.clone();
        for (c, t) in terms {
            if *c != 0.0 {
                out.axpy(*c, t)?;
            }
        }
        Ok(out)
    }

    fn values(&self) -> Values<'_> {
        Values::Borrowed(self.data())
    }
}

impl<'t> OdeState for Var<'t> {
    fn combine(&self, terms: &[(f64, &Self)]) -> Result<Self> {
        let mut acc = *self;
        for (c, t) in terms {
            if *c != 0.0 {
                acc = acc.add(t.scale(*c)?)?;
            }
        }
        Ok(acc)
    }

    fn values(&self) -> Values<'_> {
        Values::Shared(self.value())
    }
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}

fn ensure_finite<S: OdeState>(s: &S, t: f64) -> Result<()> {
    if s.values().iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Solver(SolverFailure::NonFiniteState { t }))
    }
}

/// One classical RK4 step (4 evaluations).
pub fn rk4_step<S, F>(f: &mut F, y: &S, t: f64, h: f64) -> Result<S>
where
    S: OdeState,
    F: FnMut(&S, f64) -> Result<S>,
{
    let k1 = f(y, t)?;
    let k2 = f(&y.combine(&[(0.5 * h, &k1)])?, t + 0.5 * h)?;
    let k3 = f(&y.combine(&[(0.5 * h, &k2)])?, t + 0.5 * h)?;
    let k4 = f(&y.combine(&[(h, &k3)])?, t + h)?;
    let (a, b) = (h / 6.0, h / 3.0);
    y.combine(&[(a, &k1), (b, &k2), (b, &k3), (a, &k4)])
}

// Dormand–Prince 5(4) tableau.
const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
const A2: [f64; 1] = [1.0 / 5.0];
const A3: [f64; 2] = [3.0 / 40.0, 9.0 / 40.0];
const A4: [f64; 3] = [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0];
const A5: [f64; 4] = [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0];
const A6: [f64; 5] = [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0];
/// Fifth-order weights (also the seventh stage's row; b₇ = 0).
const B: [f64; 6] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0];
/// Difference between fifth- and embedded fourth-order weights.
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

/// Result of one Dormand–Prince trial step.
pub struct Dopri5Step<S> {
    pub proposed: S,
    /// Embedded error estimate `y₅ − y₄`, elementwise.
    pub error: Vec<f64>,
    /// Derivative at the proposed state, reusable as the next `k₁`.
    pub k_last: S,
    pub nfe: usize,
}

/// One Dormand–Prince 5(4) trial step from `(t, y)` with step `h`.
///
/// When `k1 = f(y, t)` is supplied (first-same-as-last reuse) the step
/// costs 6 evaluations, otherwise 7.
pub fn dopri5_step<S, F>(f: &mut F, y: &S, t: f64, h: f64, k1: Option<&S>) -> Result<Dopri5Step<S>>
where
    S: OdeState,
    F: FnMut(&S, f64) -> Result<S>,
{
    let mut nfe = 6;
    let k1 = match k1 {
        Some(k) => k.clone(),
        None => {
            nfe += 1;
            f(y, t)?
        }
    };
    let stage = |f: &mut F, coeffs: &[f64], ks: &[&S], c: f64| -> Result<S> {
        let terms: Vec<(f64, &S)> = coeffs.iter().zip(ks).map(|(a, k)| (h * a, *k)).collect();
        f(&y.combine(&terms)?, t + c * h)
    };
    let k2 = stage(f, &A2, &[&k1], C[1])?;
    let k3 = stage(f, &A3, &[&k1, &k2], C[2])?;
    let k4 = stage(f, &A4, &[&k1, &k2, &k3], C[3])?;
    let k5 = stage(f, &A5, &[&k1, &k2, &k3, &k4], C[4])?;
    let k6 = stage(f, &A6, &[&k1, &k2, &k3, &k4, &k5], C[5])?;
    let ks = [&k1, &k2, &k3, &k4, &k5, &k6];
    let terms: Vec<(f64, &S)> = B.iter().zip(ks).map(|(b, k)| (h * b, k)).collect();
    let proposed = y.combine(&terms)?;
    let k7 = f(&proposed, t + C[6] * h)?;

    let views: Vec<Values<'_>> = [&k1, &k2, &k3, &k4, &k5, &k6, &k7].iter().map(|k| k.values()).collect();
    let len = views[0].len();
    let mut error = vec![0.0; len];
    for (e, v) in E.iter().zip(&views) {
        if *e != 0.0 {
            for (dst, x) in error.iter_mut().zip(v.iter()) {
                *dst += h * e * x;
            }
        }
    }
    drop(views);
    Ok(Dopri5Step {
        proposed,
        error,
        k_last: k7,
        nfe,
    })
}

/// Scaled error `‖err‖∞ / (atol + rtol·max(‖y‖∞, ‖y_new‖∞))`; a step is
/// accepted when this is at most 1.
pub fn scaled_error(err: &[f64], y: &[f64], y_new: &[f64], rtol: f64, atol: f64) -> f64 {
    let scale = atol + rtol * max_abs(y).max(max_abs(y_new));
    max_abs(err) / scale
}

/// Step-size factor `min(5, max(0.2, 0.9·err^(−1/5)))`.
pub fn step_factor(err: f64) -> f64 {
    if err == 0.0 {
        5.0
    } else {
        (0.9 * err.powf(-0.2)).clamp(0.2, 5.0)
    }
}

/// Integrates from `times[0]` and records the state at every entry of
/// `times`.
pub fn integrate<S, F>(mut dynamics: F, z0: S, times: &[f64], cfg: &SolverConfig) -> Result<Trajectory<S>>
where
    S: OdeState,
    F: FnMut(&S, f64) -> Result<S>,
{
    cfg.validate()?;
    if times.is_empty() || times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::Solver(SolverFailure::BadTimes));
    }
    match cfg.method {
        SolverMethod::Rk4 => integrate_rk4(&mut dynamics, z0, times, cfg),
        SolverMethod::Dopri5 => integrate_dopri5(&mut dynamics, z0, times, cfg),
    }
}

fn integrate_rk4<S, F>(f: &mut F, z0: S, times: &[f64], cfg: &SolverConfig) -> Result<Trajectory<S>>
where
    S: OdeState,
    F: FnMut(&S, f64) -> Result<S>,
{
    let mut traj = Trajectory {
        times: times.to_vec(),
        states: vec![z0.clone()],
        nfe: 0,
        accepted_steps: 0,
        rejected_steps: 0,
    };
    let mut y = z0;
    for w in times.windows(2) {
        let h = (w[1] - w[0]) / cfg.substeps_per_interval as f64;
        for s in 0..cfg.substeps_per_interval {
            if traj.nfe + 4 > cfg.max_nfe {
                return Err(Error::Solver(SolverFailure::MaxNfe { limit: cfg.max_nfe }));
            }
            let t = w[0] + s as f64 * h;
            y = rk4_step(f, &y, t, h)?;
            traj.nfe += 4;
            traj.accepted_steps += 1;
            ensure_finite(&y, t + h)?;
        }
        traj.states.push(y.clone());
    }
    Ok(traj)
}

fn integrate_dopri5<S, F>(f: &mut F, z0: S, times: &[f64], cfg: &SolverConfig) -> Result<Trajectory<S>>
where
    S: OdeState,
    F: FnMut(&S, f64) -> Result<S>,
{
    let mut traj = Trajectory {
        times: times.to_vec(),
        states: vec![z0.clone()],
        nfe: 0,
        accepted_steps: 0,
        rejected_steps: 0,
    };
    if times.len() == 1 {
        return Ok(traj);
    }
    let mut t = times[0];
    let mut y = z0;
    let mut h = 0.01 * (times[1] - times[0]);
    let mut k1 = f(&y, t)?;
    traj.nfe = 1;

    for w in times.windows(2) {
        let t_end = w[1];
        let span = w[1] - w[0];
        while t < t_end {
            let remaining = t_end - t;
            let landing = t + 1.01 * h >= t_end;
            let h_try = if landing { remaining } else { h };
            if h_try < 1e-12 * span {
                return Err(Error::Solver(SolverFailure::StepUnderflow { t, h: h_try }));
            }
            if traj.nfe + 6 > cfg.max_nfe {
                return Err(Error::Solver(SolverFailure::MaxNfe { limit: cfg.max_nfe }));
            }
            let step = dopri5_step(f, &y, t, h_try, Some(&k1))?;
            traj.nfe += step.nfe;
            let err = scaled_error(&step.error, &y.values(), &step.proposed.values(), cfg.rtol, cfg.atol);
            if !err.is_finite() {
                return Err(Error::Solver(SolverFailure::NonFiniteState { t }));
            }
            let factor = step_factor(err);
            if err <= 1.0 {
                t = if landing { t_end } else { t + h_try };
                y = step.proposed;
                k1 = step.k_last;
                traj.accepted_steps += 1;
                ensure_finite(&y, t)?;
                // a shortened landing step should not shrink the next proposal
                h = if landing && factor >= 1.0 { (h_try * factor).max(h) } else { h_try * factor };
            } else {
                traj.rejected_steps += 1;
                h = h_try * factor.min(1.0);
            }
        }
        traj.states.push(y.clone());
    }
    Ok(traj)
}
