//! Reference predictors: historical average and the model ablations.

use std::sync::Arc;

use crate::data::{Dataset, Normalizer, Split, STEPS_PER_DAY};
use crate::error::{Error, Result};
use crate::graph::RoadNetwork;
use crate::model::{Architecture, Model, ModelConfig};
use crate::train::Predictor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaselineKind {
    Ha,
    GruDirect,
    UnkP,
    IncP,
}

impl std::str::FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ha" => Ok(Self::Ha),
            "gru" => Ok(Self::GruDirect),
            "unkp" => Ok(Self::UnkP),
            "incp" => Ok(Self::IncP),
            other => Err(Error::Config(format!("unknown baseline `{other}`"))),
        }
    }
}

/// Per-edge, per-time-of-day training means.
#[derive(Clone, Debug, PartialEq)]
pub struct HistoricalAverage {
    period: usize,
    edges: usize,
    /// `period × edges` bucket means.
    means: Vec<f64>,
}

impl HistoricalAverage {
    /// Fits on the rows covered by the training windows. Row `t` falls in
    /// bucket `t mod 288`.
    pub fn fit(data: &Dataset) -> Result<Self> {
        let train = data.windows(Split::Train);
        if train.is_empty() {
            return Err(Error::Data("training split is empty".into()));
        }
        let rows = train.end - 1 + data.history_len() + data.horizon();
        Self::fit_rows(data.series().values(), data.edge_count(), rows, STEPS_PER_DAY)
    }

    /// Fits on the first `rows` rows of a row-major `· × edges` table.
    pub fn fit_rows(values: &[f64], edges: usize, rows: usize, period: usize) -> Result<Self> {
        if rows == 0 || edges == 0 || values.len() < rows * edges {
            return Err(Error::Data("no training rows for the historical average".into()));
        }
        let mut sums = vec![0.0; period * edges];
        let mut counts = vec![0usize; period];
        let mut global = vec![0.0; edges];
        for t in 0..rows {
            let b = t % period;
            counts[b] += 1;
            for (e, &v) in values[t * edges..(t + 1) * edges].iter().enumerate() {
                sums[b * edges + e] += v;
                global[e] += v;
            }
        }
        global.iter_mut().for_each(|g| *g /= rows as f64);
        for b in 0..period {
            for e in 0..edges {
                let k = b * edges + e;
                sums[k] = if counts[b] > 0 { sums[k] / counts[b] as f64 } else { global[e] };
            }
        }
        Ok(Self {
            period,
            edges,
            means: sums,
        })
    }

    /// Forecast for absolute time step `t`.
    pub fn predict_at(&self, t: usize) -> &[f64] {
        let b = t % self.period;
        &self.means[b * self.edges..(b + 1) * self.edges]
    }
}

impl Predictor for HistoricalAverage {
    fn name(&self) -> String {
        "ha".into()
    }

    fn predict_windows(&self, data: &Dataset, starts: &[usize]) -> Result<Vec<f64>> {
        let (t_len, h_len) = (data.history_len(), data.horizon());
        let mut out = Vec::with_capacity(starts.len() * h_len * self.edges);
        for &s in starts {
            for k in 0..h_len {
                out.extend_from_slice(self.predict_at(s + t_len + k));
            }
        }
        Ok(out)
    }
}

/// Same configuration with the dynamics swapped for an MLP.
pub fn unkp_variant(config: &ModelConfig) -> ModelConfig {
    ModelConfig {
        architecture: Architecture::UnkP,
        ..config.clone()
    }
}

/// Same configuration without the node volume factor.
pub fn incp_variant(config: &ModelConfig) -> ModelConfig {
    ModelConfig {
        architecture: Architecture::IncP,
        ..config.clone()
    }
}

/// GRU encoder with a one-shot affine head.
pub fn gru_direct(config: &ModelConfig, net: Arc<RoadNetwork>, normalizer: Normalizer, seed: u64) -> Result<Model> {
    Model::new(
        ModelConfig {
            architecture: Architecture::GruDirect,
            ..config.clone()
        },
        net,
        normalizer,
        seed,
    )
}
