//! Loss, optimizer, training loop and evaluation metrics.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::data::{Dataset, Split};
use crate::diffengine::{ParamStore, Tape, Tensor, Var};
use crate::error::{shape_err, Error, Result};
use crate::model::Model;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Gaussian negative log-likelihood with fixed std, averaged over entries.
pub fn nll_loss<'t>(pred: Var<'t>, target: Var<'t>, obs_sigma: f64) -> Result<Var<'t>> {
    if !(obs_sigma > 0.0) {
        return Err(Error::Config(format!("obs_sigma must be positive, got {obs_sigma}")));
    }
    if pred.shape() != target.shape() {
        return Err(shape_err("nll_loss", pred.shape(), target.shape()));
    }
    let r = pred.sub(target)?;
    r.mul(r)?
        .mean()?
        .scale(1.0 / (2.0 * obs_sigma * obs_sigma))?
        .add_scalar(obs_sigma.ln() + HALF_LN_2PI)
}

/// Mean over entries of `½(μ² + σ² − 1 − 2 ln σ)`.
pub fn kl_penalty<'t>(mu: Var<'t>, sigma: Var<'t>) -> Result<Var<'t>> {
    if sigma.value().data().iter().any(|&s| s <= 0.0) {
        return Err(Error::Config("sigma must be positive".into()));
    }
    let t = mu.mul(mu)?.add(sigma.mul(sigma)?)?.sub(sigma.log()?.scale(2.0)?)?;
    t.mean()?.add_scalar(-1.0)?.scale(0.5)
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, name: &str) -> Option<&Tensor> {
        self.m.get(name)
    }

    pub fn second_moment(&self, name: &str) -> Option<&Tensor> {
        self.v.get(name)
    }

    /// Applies one update from the gradients held in `params`.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        if params.iter().any(|(_, p)| !p.grad.all_finite()) {
            return Err(Error::NonFinite("adam gradient"));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (name, p) in params.iter_mut() {
            let m = self.m.entry(name.to_string()).or_insert_with(|| Tensor::zeros(p.value.shape()));
            let v = self.v.entry(name.to_string()).or_insert_with(|| Tensor::zeros(p.value.shape()));
            let g = p.grad.data();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for (k, x) in p.value.data_mut().iter_mut().enumerate() {
                md[k] = self.beta1 * md[k] + (1.0 - self.beta1) * g[k];
                vd[k] = self.beta2 * vd[k] + (1.0 - self.beta2) * g[k] * g[k];
                let mh = md[k] / bc1;
                let vh = vd[k] / bc2;
                *x -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub grad_clip_norm: f64,
    pub kl_weight: f64,
    pub seeds: Vec<u64>,
    pub obs_sigma: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 16,
            max_epochs: 200,
            patience: 10,
            grad_clip_norm: 5.0,
            kl_weight: 0.0,
            seeds: (0..7).collect(),
            obs_sigma: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !(self.grad_clip_norm > 0.0) || !(self.obs_sigma > 0.0) {
            return Err(Error::Config("learning_rate, grad_clip_norm and obs_sigma must be positive".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch_size and max_epochs must be at least 1".into()));
        }
        if !(self.kl_weight >= 0.0) {
            return Err(Error::Config("kl_weight must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Validation MAE in original units.
    pub val_mae: f64,
    /// Mean solver evaluations per training batch.
    pub nfe: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_mae: f64,
}

impl TrainReport {
    pub fn write_csv(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "epoch,train_loss,val_mae,nfe")?;
        for r in &self.history {
            writeln!(w, "{},{},{},{}", r.epoch, r.train_loss, r.val_mae, r.nfe)?;
        }
        Ok(())
    }
}

/// Trains `model` in place and leaves it at the best-validation parameters.
pub fn train(model: &mut Model, data: &Dataset, cfg: &TrainConfig, seed: u64) -> Result<TrainReport> {
    train_with(model, data, cfg, seed, |_, _| {})
}

/// [`train`] with a callback after every epoch; it sees the epoch's
/// record and the model as it stands after that epoch.
pub fn train_with(model: &mut Model, data: &Dataset, cfg: &TrainConfig, seed: u64, mut on_epoch: impl FnMut(&EpochRecord, &Model)) -> Result<TrainReport> {
    cfg.validate()?;
    if data.edge_count() != model.network().edge_count() {
        return Err(Error::Data(format!(
            "dataset has {} edges, model network has {}",
            data.edge_count(),
            model.network().edge_count()
        )));
    }
    let mc = model.config().clone();
    if data.history_len() != mc.history_len || data.horizon() != mc.horizon {
        return Err(Error::Config("dataset window lengths differ from the model's".into()));
    }
    let train_windows: Vec<usize> = data.windows(Split::Train).collect();
    if data.windows(Split::Val).is_empty() {
        return Err(Error::Data("validation split is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let mut adam = Adam::new(cfg.learning_rate);
    let (n, d) = (model.network().node_count(), mc.latent_channels);
    let latent = mc.architecture.has_latent_field();

    let mut history = Vec::new();
    let mut best = (f64::INFINITY, 0usize, model.params().clone());
    let mut wait = 0;
    for epoch in 1..=cfg.max_epochs {
        let mut order = train_windows.clone();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut nfe_sum, mut batches) = (0.0, 0usize, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch = data.batch(chunk)?;
            let eps = if latent {
                let len = chunk.len() * n * d;
                Some(Tensor::new(vec![chunk.len(), n, d], (0..len).map(|_| rng.sample(StandardNormal)).collect())?)
            } else {
                None
            };
            let tape = Tape::new();
            let (loss, nfe) = model.loss_on(&tape, model.params(), &batch, eps.as_ref(), cfg.obs_sigma, cfg.kl_weight)?;
            let value = tape.backward_into(loss, model.params_mut())?;
            if !value.is_finite() {
                return Err(Error::Diverged(format!("epoch {epoch}, batch {batches}: loss {value}")));
            }
            model.params_mut().clip_grad_norm(cfg.grad_clip_norm);
            adam.step(model.params_mut())
                .map_err(|_| Error::Diverged(format!("epoch {epoch}, batch {batches}: non-finite gradient")))?;
            loss_sum += value;
            nfe_sum += nfe;
            batches += 1;
        }
        let val_mae = mean_abs_error(model, data, Split::Val)?;
        if !val_mae.is_finite() {
            return Err(Error::Diverged(format!("epoch {epoch}: validation MAE {val_mae}")));
        }
        let rec = EpochRecord {
            epoch,
            train_loss: loss_sum / batches as f64,
            val_mae,
            nfe: nfe_sum as f64 / batches as f64,
        };
        on_epoch(&rec, model);
        history.push(rec);
        if val_mae < best.0 {
            best = (val_mae, epoch, model.params().clone());
            wait = 0;
        } else {
            wait += 1;
            if wait > cfg.patience {
                break;
            }
        }
    }
    *model.params_mut() = best.2;
    model.params_mut().zero_grad();
    Ok(TrainReport {
        history,
        best_epoch: best.1,
        best_val_mae: best.0,
    })
}

/// Anything that maps dataset windows to raw-unit forecasts.
pub trait Predictor {
    fn name(&self) -> String;

    /// Forecasts for the given window starts, `B × H × |E|` row-major,
    /// in original units.
    fn predict_windows(&self, data: &Dataset, starts: &[usize]) -> Result<Vec<f64>>;
}

const EVAL_CHUNK: usize = 64;

impl Predictor for Model {
    fn name(&self) -> String {
        self.config().architecture.name().to_string()
    }

    fn predict_windows(&self, data: &Dataset, starts: &[usize]) -> Result<Vec<f64>> {
        let mut out = Vec::new();
        let norm = *self.normalizer();
        for chunk in starts.chunks(EVAL_CHUNK) {
            let history = data.histories(chunk, &norm)?;
            let pred = self.predict_normalized(&history)?;
            out.extend(pred.flows.data().iter().map(|&x| norm.denormalize(x)));
        }
        Ok(out)
    }
}

/// Mean absolute error over every step of every window in a split.
pub fn mean_abs_error(p: &dyn Predictor, data: &Dataset, split: Split) -> Result<f64> {
    let starts: Vec<usize> = data.windows(split).collect();
    let pred = p.predict_windows(data, &starts)?;
    let mut sum = 0.0;
    let mut k = 0;
    for &s in &starts {
        for y in data.target_raw(s).data() {
            sum += (pred[k] - y).abs();
            k += 1;
        }
    }
    Ok(sum / k.max(1) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
    /// Percent; `None` when every target is within the zero mask.
    pub mape: Option<f64>,
}

/// Targets with `|y|` at or below this are left out of MAPE.
pub const MAPE_MASK: f64 = 1e-3;

pub fn metrics(pred: &[f64], truth: &[f64]) -> Result<Metrics> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(shape_err("metrics", truth.len(), pred.len()));
    }
    let n = pred.len() as f64;
    let (mut abs, mut sq, mut pct, mut kept) = (0.0, 0.0, 0.0, 0usize);
    for (p, y) in pred.iter().zip(truth) {
        let e = p - y;
        abs += e.abs();
        sq += e * e;
        if y.abs() > MAPE_MASK {
            pct += (e / y).abs();
            kept += 1;
        }
    }
    Ok(Metrics {
        mae: abs / n,
        rmse: (sq / n).sqrt(),
        mape: (kept > 0).then(|| pct / kept as f64 * 100.0),
    })
}

/// One line of evaluation output.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub model: String,
    /// `None` for a multi-seed mean.
    pub seed: Option<u64>,
    pub split: Split,
    /// Prediction step (one step is five minutes).
    pub horizon: usize,
    pub metrics: Metrics,
}

impl fmt::Display for MetricsRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let seed = self.seed.map_or_else(|| "mean".to_string(), |s| s.to_string());
        let mape = self.metrics.mape.map_or_else(|| "NA".to_string(), |m| m.to_string());
        write!(
            f,
            "model={} seed={} split={} horizon={} minutes={} mae={} rmse={} mape={}",
            self.model,
            seed,
            self.split,
            self.horizon,
            self.horizon * 5,
            self.metrics.mae,
            self.metrics.rmse,
            mape
        )
    }
}

impl std::str::FromStr for MetricsRecord {
    type Err = Error;

    fn from_str(line: &str) -> Result<Self> {
        let mut kv = BTreeMap::new();
        for tok in line.split_whitespace() {
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| Error::Parse { line: 1, msg: format!("`{tok}` is not key=value") })?;
            kv.insert(k, v);
        }
        let get = |k: &str| kv.get(k).copied().ok_or_else(|| Error::Parse { line: 1, msg: format!("missing `{k}`") });
        let num = |k: &str| -> Result<f64> { get(k)?.parse().map_err(|_| Error::Parse { line: 1, msg: format!("bad `{k}`") }) };
        Ok(Self {
            model: get("model")?.to_string(),
            seed: match get("seed")? {
                "mean" => None,
                s => Some(s.parse().map_err(|_| Error::Parse { line: 1, msg: "bad `seed`".into() })?),
            },
            split: get("split")?.parse()?,
            horizon: num("horizon")? as usize,
            metrics: Metrics {
                mae: num("mae")?,
                rmse: num("rmse")?,
                mape: match get("mape")? {
                    "NA" => None,
                    _ => Some(num("mape")?),
                },
            },
        })
    }
}

/// Metrics at each requested horizon step over a split.
///
/// All horizons are scored on the same set of target timestamps: for
/// timestamp `τ` and step `k`, the forecast comes from the window that
/// starts `T + k − 1` steps before `τ`. This needs at least `H` windows.
pub fn evaluate(p: &dyn Predictor, data: &Dataset, split: Split, horizons: &[usize], seed: Option<u64>) -> Result<Vec<MetricsRecord>> {
    let (t_len, h_len, m) = (data.history_len(), data.horizon(), data.edge_count());
    if let Some(&k) = horizons.iter().find(|&&k| k == 0 || k > h_len) {
        return Err(Error::Config(format!("horizon {k} outside 1..={h_len}")));
    }
    let range = data.windows(split);
    if range.len() < h_len {
        return Err(Error::Data(format!("{split} split has {} windows, evaluation needs {h_len}", range.len())));
    }
    let starts: Vec<usize> = range.clone().collect();
    let pred = p.predict_windows(data, &starts)?;
    let first_tau = range.start + t_len + h_len - 1;
    let last_tau = range.end - 1 + t_len;
    let mut out = Vec::with_capacity(horizons.len());
    for &k in horizons {
        let mut yhat = Vec::new();
        let mut y = Vec::new();
        for tau in first_tau..=last_tau {
            let s = tau + 1 - t_len - k;
            let w = s - range.start;
            let off = (w * h_len + (k - 1)) * m;
            yhat.extend_from_slice(&pred[off..off + m]);
            y.extend_from_slice(data.series().row(tau));
        }
        out.push(MetricsRecord {
            model: p.name(),
            seed,
            split,
            horizon: k,
            metrics: metrics(&yhat, &y)?,
        });
    }
    Ok(out)
}

/// Arithmetic mean of per-seed records, matched by (model, split, horizon).
/// MAPE is averaged over the seeds that report it.
pub fn mean_records(records: &[MetricsRecord]) -> Vec<MetricsRecord> {
    let mut groups: Vec<(MetricsRecord, Vec<&MetricsRecord>)> = Vec::new();
    for r in records {
        match groups.iter_mut().find(|(g, _)| g.model == r.model && g.split == r.split && g.horizon == r.horizon) {
            Some((_, v)) => v.push(r),
            None => groups.push((r.clone(), vec![r])),
        }
    }
    groups
        .into_iter()
        .map(|(head, rs)| {
            let n = rs.len() as f64;
            let mapes: Vec<f64> = rs.iter().filter_map(|r| r.metrics.mape).collect();
            MetricsRecord {
                seed: None,
                metrics: Metrics {
                    mae: rs.iter().map(|r| r.metrics.mae).sum::<f64>() / n,
                    rmse: rs.iter().map(|r| r.metrics.rmse).sum::<f64>() / n,
                    mape: (!mapes.is_empty()).then(|| mapes.iter().sum::<f64>() / mapes.len() as f64),
                },
                ..head
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b}");
    }

    fn nll(p: &[f64], t: &[f64], s: f64) -> f64 {
        let tape = Tape::new();
        let p = tape.constant(Tensor::vector(p.to_vec())).unwrap();
        let t = tape.constant(Tensor::vector(t.to_vec())).unwrap();
        nll_loss(p, t, s).unwrap().value().item().unwrap()
    }

    fn kl(mu: f64, sigma: f64) -> f64 {
        let tape = Tape::new();
        let m = tape.constant(Tensor::vector(vec![mu])).unwrap();
        let s = tape.constant(Tensor::vector(vec![sigma])).unwrap();
        kl_penalty(m, s).unwrap().value().item().unwrap()
    }

    #[test]
    fn nll_examples() {
        close(nll(&[1.0, 2.0], &[1.0, 2.0], 1.0), 0.918939, 1e-6);
        close(nll(&[2.0, 3.0], &[1.0, 2.0], 1.0), 1.418939, 1e-6);
        close(nll(&[1.0], &[1.0], 2.0), 1.612086, 1e-6);
    }

    #[test]
    fn nll_shape_mismatch() {
        let tape = Tape::new();
        let p = tape.constant(Tensor::vector(vec![1.0, 2.0])).unwrap();
        let t = tape.constant(Tensor::vector(vec![1.0])).unwrap();
        assert!(nll_loss(p, t, 1.0).is_err());
    }

    #[test]
    fn kl_examples() {
        close(kl(0.0, 1.0), 0.0, 1e-15);
        close(kl(1.0, 1.0), 0.5, 1e-15);
        close(kl(0.0, 2.0), 0.806853, 1e-6);
        let tape = Tape::new();
        let m = tape.constant(Tensor::vector(vec![0.0])).unwrap();
        let s = tape.constant(Tensor::vector(vec![-1.0])).unwrap();
        assert!(kl_penalty(m, s).is_err());
    }

    fn store(v: Vec<f64>, g: Vec<f64>) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::vector(v)).unwrap();
        s.iter_mut().next().unwrap().1.grad = Tensor::vector(g);
        s
    }

    #[test]
    fn adam_zero_gradient_is_a_no_op() {
        let mut s = store(vec![1.0, -2.0], vec![0.0, 0.0]);
        let mut a = Adam::new(0.1);
        a.step(&mut s).unwrap();
        assert_eq!(s.get("w").unwrap().data(), &[1.0, -2.0]);
        assert_eq!(a.first_moment("w").unwrap().data(), &[0.0, 0.0]);
        assert_eq!(a.second_moment("w").unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn adam_first_step_has_size_lr() {
        let mut s = store(vec![0.0, 0.0], vec![3.0, -1e-3]);
        let mut a = Adam::new(0.01);
        a.step(&mut s).unwrap();
        let w = s.get("w").unwrap().data();
        close(w[0], -0.01, 1e-10);
        close(w[1], 0.01, 1e-7);
    }

    #[test]
    fn adam_constant_gradient_moves_monotonically() {
        let mut s = store(vec![0.0], vec![2.0]);
        let mut a = Adam::new(0.01);
        a.step(&mut s).unwrap();
        let w1 = s.get("w").unwrap().data()[0];
        a.step(&mut s).unwrap();
        let w2 = s.get("w").unwrap().data()[0];
        assert!(w1 < 0.0 && w2 < w1);
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut s = store(vec![0.0], vec![f64::NAN]);
        assert!(Adam::new(0.01).step(&mut s).is_err());
    }

    #[test]
    fn metric_examples() {
        let m = metrics(&[1.0, 2.0], &[2.0, 4.0]).unwrap();
        assert_eq!(m.mae, 1.5);
        assert_eq!(m.rmse, 2.5f64.sqrt());
        assert_eq!(m.mape, Some(50.0));
        let m = metrics(&[5.0, 1.0], &[0.0, 2.0]).unwrap();
        assert_eq!(m.mape, Some(50.0));
        let m = metrics(&[3.0, 3.0], &[3.0, 3.0]).unwrap();
        assert_eq!((m.mae, m.rmse, m.mape), (0.0, 0.0, Some(0.0)));
        assert_eq!(metrics(&[1.0], &[0.0]).unwrap().mape, None);
    }

    #[test]
    fn record_round_trip() {
        let r = MetricsRecord {
            model: "ha".into(),
            seed: Some(3),
            split: Split::Test,
            horizon: 6,
            metrics: Metrics {
                mae: 0.1,
                rmse: 0.2,
                mape: None,
            },
        };
        let line = r.to_string();
        assert_eq!(line, "model=ha seed=3 split=test horizon=6 minutes=30 mae=0.1 rmse=0.2 mape=NA");
        assert_eq!(line.parse::<MetricsRecord>().unwrap(), r);
    }

    #[test]
    fn mean_of_seeds() {
        let mk = |seed, mae, mape| MetricsRecord {
            model: "stden".into(),
            seed: Some(seed),
            split: Split::Test,
            horizon: 3,
            metrics: Metrics { mae, rmse: 2.0 * mae, mape },
        };
        let m = mean_records(&[mk(0, 1.0, Some(10.0)), mk(1, 2.0, None), mk(2, 4.5, Some(20.0))]);
        assert_eq!(m.len(), 1);
        assert_eq!(m[0].seed, None);
        assert_eq!(m[0].metrics.mae, 2.5);
        assert_eq!(m[0].metrics.rmse, 5.0);
        assert_eq!(m[0].metrics.mape, Some(15.0));
    }
}
