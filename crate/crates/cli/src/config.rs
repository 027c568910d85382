//! `key=value` run configuration.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use stden::data::SynthConfig;
use stden::model::ModelConfig;
use stden::odeint::SolverConfig;
use stden::train::TrainConfig;

use crate::CliError;

/// Every accepted key with its default (empty means unset).
const KEYS: &[(&str, &str)] = &[
    ("graph", ""),
    ("flows", ""),
    ("checkpoint", ""),
    ("out", ""),
    ("history", ""),
    ("pef", ""),
    ("truth", ""),
    ("model", "stden"),
    ("seed", "0"),
    ("seeds", "0,1,2,3,4,5,6"),
    ("history_len", "12"),
    ("horizon", "12"),
    ("horizons", "3,6,12"),
    ("split", "test"),
    ("window", ""),
    ("latent_dim", "1"),
    ("gru_hidden", "64"),
    ("physics", "tanh"),
    ("solver", "rk4"),
    ("rtol", "0.001"),
    ("atol", "0.0001"),
    ("substeps", "4"),
    ("max_nfe", "10000"),
    ("rtol_list", "0.01,0.001,0.0001"),
    ("learning_rate", "0.001"),
    ("batch_size", "16"),
    ("max_epochs", "200"),
    ("patience", "10"),
    ("grad_clip_norm", "5"),
    ("kl_weight", "0"),
    ("obs_sigma", "1"),
    ("nodes", "50"),
    ("out_degree", "3"),
    ("steps", "4032"),
    ("alpha", "0.2"),
    ("phi_min", "0.5"),
    ("phi_max", "2"),
    ("mode", "tanh"),
    ("smoothness", "5"),
    ("amplitude", "1"),
    ("noise", "0.05"),
    ("period", "288"),
];

#[derive(Clone, Debug)]
pub struct RunConfig {
    values: BTreeMap<&'static str, String>,
}

fn cfg_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|&(k, v)| (k, v.to_string())).collect(),
        }
    }
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        let key = key.trim().replace('-', "_");
        let slot = KEYS
            .iter()
            .find(|(k, _)| *k == key)
            .map(|(k, _)| *k)
            .ok_or_else(|| cfg_err(format!("unknown config key `{key}`")))?;
        self.values.insert(slot, value.trim().to_string());
        Ok(())
    }

    /// Applies `key=value` lines; `#` starts a comment.
    pub fn merge_text(&mut self, text: &str, origin: &str) -> Result<(), CliError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| cfg_err(format!("{origin}:{}: expected key=value, found `{line}`", i + 1)))?;
            self.set(k, v).map_err(|e| cfg_err(format!("{origin}:{}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn merge_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| cfg_err(format!("cannot read config {}: {e}", path.display())))?;
        self.merge_text(&text, &path.display().to_string())
    }

    pub fn raw(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).expect("known key")
    }

    pub fn is_set(&self, key: &str) -> bool {
        !self.raw(key).is_empty()
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<T, CliError> {
        let v = self.raw(key);
        if v.is_empty() {
            return Err(cfg_err(format!("missing required key `{key}`")));
        }
        v.parse().map_err(|_| cfg_err(format!("invalid value `{v}` for `{key}`")))
    }

    pub fn list<T: FromStr>(&self, key: &str) -> Result<Vec<T>, CliError> {
        let v = self.raw(key);
        let out: Vec<T> = v
            .split(',')
            .filter(|s| !s.trim().is_empty())
            .map(|s| s.trim().parse().map_err(|_| cfg_err(format!("invalid entry `{s}` in `{key}`"))))
            .collect::<Result<_, _>>()?;
        if out.is_empty() {
            return Err(cfg_err(format!("`{key}` must list at least one value")));
        }
        Ok(out)
    }

    pub fn path(&self, key: &str) -> Result<PathBuf, CliError> {
        if !self.is_set(key) {
            return Err(cfg_err(format!("missing required key `{key}`")));
        }
        Ok(PathBuf::from(self.raw(key)))
    }

    pub fn render(&self) -> String {
        KEYS.iter().map(|(k, _)| format!("{k}={}\n", self.raw(k))).collect()
    }

    pub fn solver(&self) -> Result<SolverConfig, CliError> {
        Ok(SolverConfig {
            method: self.get::<String>("solver")?.parse().map_err(|e: stden::Error| cfg_err(e.to_string()))?,
            rtol: self.get("rtol")?,
            atol: self.get("atol")?,
            substeps_per_interval: self.get("substeps")?,
            max_nfe: self.get("max_nfe")?,
        })
    }

    pub fn model(&self) -> Result<ModelConfig, CliError> {
        let arch = self.get::<String>("model")?;
        Ok(ModelConfig {
            history_len: self.get("history_len")?,
            horizon: self.get("horizon")?,
            latent_channels: self.get("latent_dim")?,
            gru_hidden: self.get("gru_hidden")?,
            solver: self.solver()?,
            architecture: arch.parse().map_err(|e: stden::Error| cfg_err(e.to_string()))?,
            physics: self.get::<String>("physics")?.parse().map_err(|e: stden::Error| cfg_err(e.to_string()))?,
        })
    }

    /// `(history_len, horizon)`.
    pub fn model_windows(&self) -> Result<(usize, usize), CliError> {
        Ok((self.get("history_len")?, self.get("horizon")?))
    }

    pub fn train(&self) -> Result<TrainConfig, CliError> {
        Ok(TrainConfig {
            learning_rate: self.get("learning_rate")?,
            batch_size: self.get("batch_size")?,
            max_epochs: self.get("max_epochs")?,
            patience: self.get("patience")?,
            grad_clip_norm: self.get("grad_clip_norm")?,
            kl_weight: self.get("kl_weight")?,
            seeds: self.list("seeds")?,
            obs_sigma: self.get("obs_sigma")?,
        })
    }

    pub fn synth(&self) -> Result<SynthConfig, CliError> {
        Ok(SynthConfig {
            nodes: self.get("nodes")?,
            out_degree: self.get("out_degree")?,
            seed: self.get("seed")?,
            steps: self.get("steps")?,
            alpha: self.get("alpha")?,
            phi_min: self.get("phi_min")?,
            phi_max: self.get("phi_max")?,
            mode: self.get::<String>("mode")?.parse().map_err(|e: stden::Error| cfg_err(e.to_string()))?,
            smoothness: self.get("smoothness")?,
            amplitude: self.get("amplitude")?,
            noise: self.get("noise")?,
            period: self.get("period")?,
        })
    }
}
