//! Flow series, windowing, splitting and normalization, plus the synthetic
//! physics generator in [`synth`].

pub mod synth;

use std::io::{Read, Write};
use std::ops::Range;

use crate::diffengine::Tensor;
use crate::error::{Error, Result};
use crate::graph::RoadNetwork;
use crate::model::Batch;

pub use synth::{random_network, simulate, simulate_from, smooth_field, GroundTruth, SynthConfig, Simulation};

/// Time steps per day at the 5-minute interval.
pub const STEPS_PER_DAY: usize = 288;

/// Row-per-time-step table of real values (`S × columns`).
///
/// Used for edge flows (`e` columns) and node potentials (`v` columns).
#[derive(Clone, Debug, PartialEq)]
pub struct FlowSeries {
    /// Minutes between rows.
    pub interval: f64,
    columns: usize,
    values: Vec<f64>,
}

impl FlowSeries {
    pub fn new(columns: usize, values: Vec<f64>) -> Result<Self> {
        if columns == 0 || values.len() % columns != 0 {
            return Err(Error::Data(format!(
                "{} values cannot form rows of {columns} columns",
                values.len()
            )));
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite value at row {}, column {}", k / columns, k % columns)));
        }
        Ok(Self {
            interval: 5.0,
            columns,
            values,
        })
    }

    pub fn steps(&self) -> usize {
        self.values.len() / self.columns
    }

    pub fn columns(&self) -> usize {
        self.columns
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.columns..(t + 1) * self.columns]
    }

    /// Rows `range` as a `[len, columns]` tensor.
    pub fn rows(&self, range: Range<usize>) -> Tensor {
        let data = self.values[range.start * self.columns..range.end * self.columns].to_vec();
        Tensor::new(vec![range.len(), self.columns], data).expect("rows in range")
    }

    /// Reads `t,<prefix>0,<prefix>1,…` CSV. When `expected` is set the
    /// column count must match it.
    pub fn read_csv(reader: impl Read, prefix: char, expected: Option<usize>) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let header = rdr
            .headers()
            .map_err(|e| Error::Parse { line: 1, msg: e.to_string() })?
            .clone();
        if header.get(0) != Some("t") {
            return Err(Error::Parse {
                line: 1,
                msg: "header must start with `t`".into(),
            });
        }
        let columns = header.len() - 1;
        for (k, name) in header.iter().skip(1).enumerate() {
            if name != format!("{prefix}{k}") {
                return Err(Error::Parse {
                    line: 1,
                    msg: format!("column {} is `{name}`, expected `{prefix}{k}`", k + 1),
                });
            }
        }
        if let Some(n) = expected {
            if n != columns {
                return Err(Error::Data(format!("file has {columns} `{prefix}` columns, network has {n}")));
            }
        }
        let mut values = Vec::new();
        for (row, rec) in rdr.records().enumerate() {
            let line = row + 2;
            let rec = rec.map_err(|e| Error::Parse { line, msg: e.to_string() })?;
            if rec.len() != columns + 1 {
                return Err(Error::Parse {
                    line,
                    msg: format!("expected {} cells, found {}", columns + 1, rec.len()),
                });
            }
            for (col, cell) in rec.iter().enumerate().skip(1) {
                let v: f64 = cell.trim().parse().map_err(|_| Error::Parse {
                    line,
                    msg: format!("column {col}: cannot parse `{cell}` as a number"),
                })?;
                values.push(v);
            }
        }
        if values.is_empty() {
            return Err(Error::Data("series has no rows".into()));
        }
        Self::new(columns, values)
    }

    /// Writes CSV with shortest round-trip float formatting.
    pub fn write_csv(&self, writer: impl Write, prefix: char) -> Result<()> {
        self.write_csv_from(writer, prefix, 0)
    }

    /// [`write_csv`](Self::write_csv) with the `t` column starting at `first_t`.
    pub fn write_csv_from(&self, writer: impl Write, prefix: char, first_t: usize) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["t".to_string()];
        header.extend((0..self.columns).map(|k| format!("{prefix}{k}")));
        w.write_record(&header).map_err(csv_io)?;
        for t in 0..self.steps() {
            let mut rec = vec![(first_t + t).to_string()];
            rec.extend(self.row(t).iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(csv_io)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Flow CSV checked against a network's edge count.
    pub fn load_flows(reader: impl Read, net: &RoadNetwork) -> Result<Self> {
        Self::read_csv(reader, 'e', Some(net.edge_count()))
    }

    pub fn save_flows(&self, writer: impl Write) -> Result<()> {
        self.write_csv(writer, 'e')
    }
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

/// Scalar z-score statistics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalizer {
    pub mean: f64,
    pub std: f64,
}

impl Default for Normalizer {
    fn default() -> Self {
        Self { mean: 0.0, std: 1.0 }
    }
}

impl Normalizer {
    pub fn fit(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Data("cannot fit a normalizer on no data".into()));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        if !(std > 0.0) {
            return Err(Error::Data("training data has zero variance".into()));
        }
        Ok(Self { mean, std })
    }

    pub fn normalize(&self, x: f64) -> f64 {
        (x - self.mean) / self.std
    }

    pub fn denormalize(&self, x: f64) -> f64 {
        x * self.std + self.mean
    }

    pub fn normalize_tensor(&self, t: &Tensor) -> Tensor {
        t.map(|x| self.normalize(x))
    }

    pub fn denormalize_tensor(&self, t: &Tensor) -> Tensor {
        t.map(|x| self.denormalize(x))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Train => "train",
            Self::Val => "val",
            Self::Test => "test",
        })
    }
}

/// Number of stride-1 windows of length `t + h` in `steps` rows.
pub fn window_count(steps: usize, history_len: usize, horizon: usize) -> usize {
    (steps + 1).saturating_sub(history_len + horizon)
}

/// Train/validation/test window counts for `windows` windows (7:1:2,
/// floor for the first two, remainder to test).
pub fn split_counts(windows: usize) -> (usize, usize, usize) {
    let train = windows * 7 / 10;
    let val = windows / 10;
    (train, val, windows - train - val)
}

/// Windowed view over a raw flow series.
///
/// Window `s` has history rows `s..s+T` and target rows `s+T..s+T+H`.
#[derive(Clone, Debug)]
pub struct Dataset {
    series: FlowSeries,
    history_len: usize,
    horizon: usize,
    train: Range<usize>,
    val: Range<usize>,
    test: Range<usize>,
    normalizer: Normalizer,
}

impl Dataset {
    /// Windows the series with stride 1, splits start indices 7:1:2 by
    /// time and fits the normalizer on the rows the training windows touch.
    pub fn window_and_split(series: FlowSeries, history_len: usize, horizon: usize) -> Result<Self> {
        if history_len == 0 || horizon == 0 {
            return Err(Error::Config("history_len and horizon must be at least 1".into()));
        }
        let w = window_count(series.steps(), history_len, horizon);
        if w == 0 {
            return Err(Error::Data(format!(
                "series has {} steps, needs at least {}",
                series.steps(),
                history_len + horizon
            )));
        }
        let (a, b, _) = split_counts(w);
        if a == 0 {
            return Err(Error::Data(format!("{w} windows leave the training split empty")));
        }
        let fit_rows = a - 1 + history_len + horizon;
        let normalizer = Normalizer::fit(&series.values()[..fit_rows * series.columns()])?;
        Ok(Self {
            series,
            history_len,
            horizon,
            train: 0..a,
            val: a..a + b,
            test: a + b..w,
            normalizer,
        })
    }

    pub fn series(&self) -> &FlowSeries {
        &self.series
    }

    pub fn history_len(&self) -> usize {
        self.history_len
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn edge_count(&self) -> usize {
        self.series.columns()
    }

    pub fn normalizer(&self) -> &Normalizer {
        &self.normalizer
    }

    /// Window start indices of a split.
    pub fn windows(&self, split: Split) -> Range<usize> {
        match split {
            Split::Train => self.train.clone(),
            Split::Val => self.val.clone(),
            Split::Test => self.test.clone(),
        }
    }

    /// Raw (unnormalized) history `[T, |E|]` of window `s`.
    pub fn history_raw(&self, s: usize) -> Tensor {
        self.series.rows(s..s + self.history_len)
    }

    /// Raw target `[H, |E|]` of window `s`.
    pub fn target_raw(&self, s: usize) -> Tensor {
        let t0 = s + self.history_len;
        self.series.rows(t0..t0 + self.horizon)
    }

    /// Histories `[B, T, |E|]` normalized with `norm`.
    pub fn histories(&self, starts: &[usize], norm: &Normalizer) -> Result<Tensor> {
        let (t, m) = (self.history_len, self.edge_count());
        let mut hist = Vec::with_capacity(starts.len() * t * m);
        for &s in starts {
            hist.extend(self.series.values()[s * m..(s + t) * m].iter().map(|&x| norm.normalize(x)));
        }
        Tensor::new(vec![starts.len(), t, m], hist)
    }

    /// Normalized minibatch for the given window starts.
    pub fn batch(&self, starts: &[usize]) -> Result<Batch> {
        let (t, h, m) = (self.history_len, self.horizon, self.edge_count());
        let b = starts.len();
        let mut hist = Vec::with_capacity(b * t * m);
        let mut targ = Vec::with_capacity(b * h * m);
        for &s in starts {
            hist.extend(self.series.values()[s * m..(s + t) * m].iter().map(|&x| self.normalizer.normalize(x)));
            targ.extend(self.series.values()[(s + t) * m..(s + t + h) * m].iter().map(|&x| self.normalizer.normalize(x)));
        }
        Ok(Batch {
            history: Tensor::new(vec![b, t, m], hist)?,
            target: Tensor::new(vec![b, h, m], targ)?,
        })
    }
}
