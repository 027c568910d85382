//! Potential-energy field dynamics on plain tensors.
//!
//! `dz/dt = −φ ⊙ act(α ⊙ Δz)` with `act = tanh` (learned model) or the
//! identity (linear continuity equation). `φ` is per node and shared across
//! channels, `α` is per channel.

use crate::diffengine::Tensor;
use crate::error::{shape_err, Result};
use crate::graph::RoadNetwork;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Physics {
    #[default]
    Tanh,
    Linear,
}

impl std::str::FromStr for Physics {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Self::Tanh),
            "linear" => Ok(Self::Linear),
            other => Err(crate::Error::Config(format!("unknown dynamics mode `{other}` (expected tanh or linear)"))),
        }
    }
}

impl std::fmt::Display for Physics {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Tanh => "tanh",
            Self::Linear => "linear",
        })
    }
}

/// Node volumes `φ` (length n, positive) and conductivities `α` (length d).
#[derive(Clone, Debug, PartialEq)]
pub struct PhysicsParams {
    pub phi: Vec<f64>,
    pub alpha: Vec<f64>,
}

impl PhysicsParams {
    fn check(&self, net: &RoadNetwork, z: &Tensor) -> Result<usize> {
        let shape = z.shape();
        let d = *shape.last().unwrap_or(&0);
        if shape.len() < 2 || shape[shape.len() - 2] != net.node_count() || self.phi.len() != net.node_count() || self.alpha.len() != d {
            return Err(shape_err(
                "pef dynamics",
                format!("[.., {}, {}]", self.phi.len(), self.alpha.len()),
                shape,
            ));
        }
        Ok(d)
    }

    /// Conserved quantity `Σᵢ zᵢ/φᵢ` per channel, summed over channels.
    pub fn energy(&self, z: &Tensor) -> f64 {
        let d = self.alpha.len();
        z.data()
            .chunks(d)
            .enumerate()
            .map(|(i, row)| row.iter().sum::<f64>() / self.phi[i % self.phi.len()])
            .sum()
    }
}

/// Right-hand side of the potential-energy field equation.
pub fn pef_rhs(net: &RoadNetwork, params: &PhysicsParams, physics: Physics, z: &Tensor) -> Result<Tensor> {
    let d = params.check(net, z)?;
    let n = net.node_count();
    let mut out = net.laplacian_tensor(z)?;
    for (k, v) in out.data_mut().iter_mut().enumerate() {
        let (node, c) = ((k / d) % n, k % d);
        let a = params.alpha[c] * *v;
        let act = match physics {
            Physics::Tanh => a.tanh(),
            Physics::Linear => a,
        };
        *v = -params.phi[node] * act;
    }
    Ok(out)
}

/// One explicit unit step of the linear equation: `z − φ ⊙ (α Δz)`.
pub fn euler_pef_step(net: &RoadNetwork, params: &PhysicsParams, z: &Tensor) -> Result<Tensor> {
    let rhs = pef_rhs(net, params, Physics::Linear, z)?;
    let mut out = z.clone();
    out.axpy(1.0, &rhs)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path() -> RoadNetwork {
        RoadNetwork::parse("2\n0 1 1\n").unwrap()
    }

    fn col(v: &[f64]) -> Tensor {
        Tensor::new(vec![v.len(), 1], v.to_vec()).unwrap()
    }

    #[test]
    fn tanh_rhs_on_path() {
        let p = PhysicsParams {
            phi: vec![1.0, 1.0],
            alpha: vec![0.5],
        };
        let r = pef_rhs(&path(), &p, Physics::Tanh, &col(&[3.0, 1.0])).unwrap();
        assert_eq!(r.data(), &[-(1.0f64.tanh()), 1.0f64.tanh()]);
        assert!((r.data()[0] + 0.7616).abs() < 1e-4);
    }

    #[test]
    fn doubling_phi_doubles_rhs() {
        let z = col(&[0.4, -2.0]);
        let p1 = PhysicsParams {
            phi: vec![0.7, 1.3],
            alpha: vec![0.3],
        };
        let p2 = PhysicsParams {
            phi: vec![1.4, 2.6],
            alpha: vec![0.3],
        };
        let a = pef_rhs(&path(), &p1, Physics::Tanh, &z).unwrap();
        let b = pef_rhs(&path(), &p2, Physics::Tanh, &z).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(2.0 * x, *y);
        }
    }

    #[test]
    fn euler_step_examples() {
        let p = PhysicsParams {
            phi: vec![1.0, 1.0],
            alpha: vec![0.5],
        };
        let z = euler_pef_step(&path(), &p, &col(&[3.0, 1.0])).unwrap();
        assert_eq!(z.data(), &[2.0, 2.0]);
        let c = col(&[1.5, 1.5]);
        assert_eq!(euler_pef_step(&path(), &p, &c).unwrap(), c);
    }

    #[test]
    fn euler_step_conserves_energy() {
        let net = RoadNetwork::parse("4\n0 1\n1 2\n2 3\n3 0\n0 2\n").unwrap();
        let p = PhysicsParams {
            phi: vec![0.5, 1.0, 1.7, 2.0],
            alpha: vec![0.2],
        };
        let z = col(&[1.0, -0.5, 2.0, 0.25]);
        let z1 = euler_pef_step(&net, &p, &z).unwrap();
        assert!((p.energy(&z) - p.energy(&z1)).abs() < 1e-14);
    }

    #[test]
    fn shape_mismatch() {
        let p = PhysicsParams {
            phi: vec![1.0],
            alpha: vec![0.5],
        };
        assert!(pef_rhs(&path(), &p, Physics::Tanh, &col(&[1.0, 2.0])).is_err());
    }
}
