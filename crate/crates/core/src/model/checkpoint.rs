//! Binary checkpoint format.
//!
//! ```text
//! STDEN1\n
//! <u64 LE manifest length>
//! <manifest: UTF-8 lines>
//! <f64 LE tensor data, concatenated>
//! ```
//!
//! The manifest holds `key=value` metadata lines followed by one
//! `tensor <name> <d0>x<d1>… <offset>` line per parameter; offsets count
//! 8-byte values from the start of the data block.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::sync::Arc;

use super::{Architecture, Model, ModelConfig};
use crate::data::Normalizer;
use crate::diffengine::{ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::graph::RoadNetwork;
use crate::odeint::SolverConfig;

pub const MAGIC: &[u8] = b"STDEN1\n";

fn ckpt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl Model {
    pub fn save(&self, mut w: impl Write) -> Result<()> {
        let c = &self.config;
        let mut manifest = String::new();
        let meta = [
            ("architecture", c.architecture.to_string()),
            ("physics", c.physics.to_string()),
            ("history_len", c.history_len.to_string()),
            ("horizon", c.horizon.to_string()),
            ("latent_channels", c.latent_channels.to_string()),
            ("gru_hidden", c.gru_hidden.to_string()),
            ("solver", c.solver.method.to_string()),
            ("rtol", c.solver.rtol.to_string()),
            ("atol", c.solver.atol.to_string()),
            ("substeps", c.solver.substeps_per_interval.to_string()),
            ("max_nfe", c.solver.max_nfe.to_string()),
            ("nodes", self.net.node_count().to_string()),
            ("edges", self.net.edge_count().to_string()),
            ("norm_mean", self.normalizer.mean.to_string()),
            ("norm_std", self.normalizer.std.to_string()),
        ];
        for (k, v) in meta {
            manifest.push_str(&format!("{k}={v}\n"));
        }
        let mut offset = 0;
        for (name, p) in self.params.iter() {
            let dims: Vec<String> = p.value.shape().iter().map(|d| d.to_string()).collect();
            let dims = if dims.is_empty() { "scalar".to_string() } else { dims.join("x") };
            manifest.push_str(&format!("tensor {name} {dims} {offset}\n"));
            offset += p.value.len();
        }
        w.write_all(MAGIC)?;
        w.write_all(&(manifest.len() as u64).to_le_bytes())?;
        w.write_all(manifest.as_bytes())?;
        for (_, p) in self.params.iter() {
            for v in p.value.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Loads a checkpoint for `net`; the network must match the one the
    /// model was trained on in node and edge count.
    pub fn load(mut r: impl Read, net: Arc<RoadNetwork>) -> Result<Self> {
        let mut magic = [0u8; 7];
        r.read_exact(&mut magic).map_err(|_| ckpt("file too short"))?;
        if magic != MAGIC {
            return Err(ckpt("bad magic line"));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len).map_err(|_| ckpt("truncated manifest length"))?;
        let len = u64::from_le_bytes(len) as usize;
        if len > 1 << 26 {
            return Err(ckpt("manifest length is implausible"));
        }
        let mut manifest = vec![0u8; len];
        r.read_exact(&mut manifest).map_err(|_| ckpt("truncated manifest"))?;
        let manifest = String::from_utf8(manifest).map_err(|_| ckpt("manifest is not UTF-8"))?;
        let mut data = Vec::new();
        r.read_to_end(&mut data)?;
        if data.len() % 8 != 0 {
            return Err(ckpt("data block is not a whole number of f64 values"));
        }
        let data: Vec<f64> = data.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();

        let mut meta = BTreeMap::new();
        let mut tensors = Vec::new();
        for line in manifest.lines() {
            if let Some(rest) = line.strip_prefix("tensor ") {
                let parts: Vec<&str> = rest.split(' ').collect();
                if parts.len() != 3 {
                    return Err(ckpt(format!("bad tensor line `{line}`")));
                }
                let shape: Vec<usize> = if parts[1] == "scalar" {
                    Vec::new()
                } else {
                    parts[1]
                        .split('x')
                        .map(|d| d.parse().map_err(|_| ckpt(format!("bad shape in `{line}`"))))
                        .collect::<Result<_>>()?
                };
                let offset: usize = parts[2].parse().map_err(|_| ckpt(format!("bad offset in `{line}`")))?;
                tensors.push((parts[0].to_string(), shape, offset));
            } else if let Some((k, v)) = line.split_once('=') {
                meta.insert(k.to_string(), v.to_string());
            } else if !line.is_empty() {
                return Err(ckpt(format!("unrecognized manifest line `{line}`")));
            }
        }
        let get = |k: &str| meta.get(k).cloned().ok_or_else(|| ckpt(format!("manifest lacks `{k}`")));
        fn num<T: std::str::FromStr>(k: &str, v: String) -> Result<T> {
            v.parse().map_err(|_| ckpt(format!("bad value `{v}` for `{k}`")))
        }
        let nodes: usize = num("nodes", get("nodes")?)?;
        let edges: usize = num("edges", get("edges")?)?;
        if nodes != net.node_count() || edges != net.edge_count() {
            return Err(ckpt(format!(
                "checkpoint expects {nodes} nodes and {edges} edges, network has {} and {}",
                net.node_count(),
                net.edge_count()
            )));
        }
        let config = ModelConfig {
            history_len: num("history_len", get("history_len")?)?,
            horizon: num("horizon", get("horizon")?)?,
            latent_channels: num("latent_channels", get("latent_channels")?)?,
            gru_hidden: num("gru_hidden", get("gru_hidden")?)?,
            solver: SolverConfig {
                method: get("solver")?.parse()?,
                rtol: num("rtol", get("rtol")?)?,
                atol: num("atol", get("atol")?)?,
                substeps_per_interval: num("substeps", get("substeps")?)?,
                max_nfe: num("max_nfe", get("max_nfe")?)?,
            },
            architecture: get("architecture")?.parse::<Architecture>()?,
            physics: get("physics")?.parse()?,
        };
        let normalizer = Normalizer {
            mean: num("norm_mean", get("norm_mean")?)?,
            std: num("norm_std", get("norm_std")?)?,
        };
        let mut params = ParamStore::new();
        for (name, shape, offset) in tensors {
            let len: usize = shape.iter().product();
            let end = offset.checked_add(len).filter(|&e| e <= data.len()).ok_or_else(|| ckpt(format!("tensor `{name}` runs past the data block")))?;
            params.insert(name, Tensor::new(shape, data[offset..end].to_vec())?)?;
        }
        Model::from_parts(config, net, normalizer, params)
    }
}
