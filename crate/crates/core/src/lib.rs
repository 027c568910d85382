//! Physics-guided traffic forecasting on road networks.
//!
//! Edge flow histories are encoded into a latent potential-energy field on
//! the nodes, the field is evolved by a graph-Laplacian ODE, and future flows
//! are decoded as negative potential gradients along edges. Everything needed
//! to train that pipeline end to end lives here: discrete graph calculus, a
//! reverse-mode tape, Runge–Kutta integrators, the model and its ablations,
//! training and evaluation, and a synthetic physics data generator.

pub mod baselines;
pub mod data;
pub mod diffengine;
mod error;
pub mod graph;
pub mod model;
pub mod odeint;
pub mod train;

pub use error::{Error, Result, SolverFailure};
pub use graph::{EdgeField, NodeField, RoadNetwork};
pub use diffengine::{ParamStore, Tape, Tensor, Var};
pub use odeint::{SolverConfig, SolverMethod, Trajectory};
pub use model::{Architecture, Model, ModelConfig};
pub use train::{MetricsRecord, TrainConfig};
