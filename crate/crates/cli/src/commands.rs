use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use stden::baselines::HistoricalAverage;
use stden::data::{self, Dataset, FlowSeries, Split};
use stden::diffengine::Tensor;
use stden::model::{Model, PhysicsParams};
use stden::train::{self, evaluate as eval_split, mean_records, MetricsRecord};
use stden::{RoadNetwork, SolverConfig};

use crate::config::RunConfig;
use crate::CliError;

fn runtime(msg: impl Into<String>) -> CliError {
    CliError::Runtime(msg.into())
}

fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| runtime(format!("cannot open {}: {e}", path.display())))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| runtime(format!("cannot create {}: {e}", path.display())))
}

/// Creates the output directory and records the resolved configuration.
fn prepare_out(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let out = cfg.path("out")?;
    fs::create_dir_all(&out).map_err(|e| runtime(format!("cannot create {}: {e}", out.display())))?;
    fs::write(out.join("config.txt"), cfg.render())?;
    Ok(out)
}

fn load_graph(cfg: &RunConfig) -> Result<Arc<RoadNetwork>, CliError> {
    let path = cfg.path("graph")?;
    let net = RoadNetwork::load(open(&path)?).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
    Ok(Arc::new(net))
}

fn load_flows(cfg: &RunConfig, net: &RoadNetwork) -> Result<FlowSeries, CliError> {
    let path = cfg.path("flows")?;
    FlowSeries::load_flows(open(&path)?, net).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn load_model(path: &Path, net: &Arc<RoadNetwork>) -> Result<Model, CliError> {
    Model::load(open(path)?, Arc::clone(net)).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn write_truth(path: &Path, truth: &PhysicsParams) -> Result<(), CliError> {
    let phi: Vec<String> = truth.phi.iter().map(|v| v.to_string()).collect();
    let alpha: Vec<String> = truth.alpha.iter().map(|v| v.to_string()).collect();
    fs::write(path, format!("alpha={}\nphi={}\n", alpha.join(","), phi.join(",")))?;
    Ok(())
}

fn read_truth(path: &Path) -> Result<PhysicsParams, CliError> {
    let text = fs::read_to_string(path).map_err(|e| runtime(format!("cannot read {}: {e}", path.display())))?;
    let mut alpha = None;
    let mut phi = None;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line.split_once('=').ok_or_else(|| runtime(format!("{}: bad line `{line}`", path.display())))?;
        let vals: Vec<f64> = v
            .split(',')
            .map(|x| x.trim().parse().map_err(|_| runtime(format!("{}: bad number `{x}`", path.display()))))
            .collect::<Result<_, _>>()?;
        match k.trim() {
            "alpha" => alpha = Some(vals),
            "phi" => phi = Some(vals),
            other => return Err(runtime(format!("{}: unknown key `{other}`", path.display()))),
        }
    }
    match (phi, alpha) {
        (Some(phi), Some(alpha)) => Ok(PhysicsParams { phi, alpha }),
        _ => Err(runtime(format!("{}: needs both alpha and phi", path.display()))),
    }
}

pub fn gen_graph(cfg: &RunConfig) -> Result<(), CliError> {
    let synth = cfg.synth()?;
    let out = prepare_out(cfg)?;
    let net = data::random_network(&synth)?;
    net.save(create(&out.join("graph.txt"))?)?;
    println!("nodes={} edges={}", net.node_count(), net.edge_count());
    Ok(())
}

pub fn simulate(cfg: &RunConfig) -> Result<(), CliError> {
    let synth = cfg.synth()?;
    let out = prepare_out(cfg)?;
    let net = if cfg.is_set("graph") {
        load_graph(cfg)?
    } else {
        Arc::new(data::random_network(&synth)?)
    };
    let sim = data::simulate(&net, &synth)?;
    net.save(create(&out.join("graph.txt"))?)?;
    sim.flows.save_flows(create(&out.join("flows.csv"))?)?;
    sim.potentials.write_csv(create(&out.join("pef.csv"))?, 'v')?;
    write_truth(&out.join("truth.txt"), &sim.truth)?;
    println!("steps={} edges={} nfe={}", sim.flows.steps(), net.edge_count(), sim.nfe);
    Ok(())
}

pub fn verify_conservation(cfg: &RunConfig) -> Result<(), CliError> {
    let truth = read_truth(&cfg.path("truth")?)?;
    let pef_path = cfg.path("pef")?;
    let pef = FlowSeries::read_csv(open(&pef_path)?, 'v', Some(truth.phi.len()))?;
    let energy = |t: usize| -> f64 { pef.row(t).iter().zip(&truth.phi).map(|(z, p)| z / p).sum() };
    let scale: f64 = pef.row(0).iter().zip(&truth.phi).map(|(z, p)| z.abs() / p).sum::<f64>().max(f64::MIN_POSITIVE);
    let e0 = energy(0);
    let drift = (0..pef.steps()).map(|t| (energy(t) - e0).abs()).fold(0.0, f64::max) / scale;
    let line = format!("steps={} energy={e0} max_relative_drift={drift}", pef.steps());
    if cfg.is_set("out") {
        let out = prepare_out(cfg)?;
        fs::write(out.join("conservation.txt"), format!("{line}\n"))?;
    }
    println!("{line}");
    Ok(())
}

pub fn train(cfg: &RunConfig) -> Result<(), CliError> {
    if cfg.raw("model") == "ha" {
        return Err(CliError::Config("the historical average has nothing to train; use evaluate --model ha".into()));
    }
    let mc = cfg.model()?;
    let tc = cfg.train()?;
    let seed: u64 = cfg.get("seed")?;
    let net = load_graph(cfg)?;
    let flows = load_flows(cfg, &net)?;
    let out = prepare_out(cfg)?;
    let data = Dataset::window_and_split(flows, mc.history_len, mc.horizon)?;
    let mut model = Model::new(mc, Arc::clone(&net), *data.normalizer(), seed)?;
    let report = train::train_with(&mut model, &data, &tc, seed, |r, _| {
        eprintln!("epoch={} train_loss={} val_mae={} nfe={}", r.epoch, r.train_loss, r.val_mae, r.nfe)
    })?;
    model.save(create(&out.join("checkpoint.bin"))?)?;
    report.write_csv(create(&out.join("history.csv"))?)?;
    println!("best_epoch={} best_val_mae={}", report.best_epoch, report.best_val_mae);
    Ok(())
}

pub fn evaluate(cfg: &RunConfig) -> Result<(), CliError> {
    let net = load_graph(cfg)?;
    let flows = load_flows(cfg, &net)?;
    let split: Split = cfg.get::<String>("split")?.parse()?;
    let horizons: Vec<usize> = cfg.list("horizons")?;
    let seed: u64 = cfg.get("seed")?;
    let mut records: Vec<MetricsRecord> = Vec::new();
    if cfg.raw("model") == "ha" {
        let mc = cfg.model_windows()?;
        let out = prepare_out(cfg)?;
        let data = Dataset::window_and_split(flows, mc.0, mc.1)?;
        let ha = HistoricalAverage::fit(&data)?;
        records.extend(eval_split(&ha, &data, split, &horizons, Some(seed))?);
        return emit(&out, &records);
    }
    let paths: Vec<PathBuf> = cfg.raw("checkpoint").split(',').filter(|s| !s.is_empty()).map(PathBuf::from).collect();
    if paths.is_empty() {
        return Err(CliError::Config("missing required key `checkpoint`".into()));
    }
    let seeds: Vec<u64> = if paths.len() == 1 {
        vec![seed]
    } else {
        match cfg.list::<u64>("seeds") {
            Ok(s) if s.len() == paths.len() => s,
            _ => (0..paths.len() as u64).collect(),
        }
    };
    let out = prepare_out(cfg)?;
    for (path, s) in paths.iter().zip(seeds) {
        let model = load_model(path, &net)?;
        let (t, h) = (model.config().history_len, model.config().horizon);
        let data = Dataset::window_and_split(flows.clone(), t, h)?;
        records.extend(eval_split(&model, &data, split, &horizons, Some(s))?);
    }
    if paths.len() > 1 {
        let mean = mean_records(&records);
        records.extend(mean);
    }
    emit(&out, &records)
}

fn emit(out: &Path, records: &[MetricsRecord]) -> Result<(), CliError> {
    let mut w = create(&out.join("metrics.txt"))?;
    for r in records {
        writeln!(w, "{r}")?;
        println!("{r}");
    }
    w.flush()?;
    Ok(())
}

/// Raw `[T, |E|]` history: the last `T` rows of `history`, or the window
/// starting at `window` in `flows`.
fn history_window(cfg: &RunConfig, net: &RoadNetwork, t_len: usize) -> Result<Tensor, CliError> {
    let series = if cfg.is_set("history") {
        let path = cfg.path("history")?;
        FlowSeries::load_flows(open(&path)?, net).map_err(|e| runtime(format!("{}: {e}", path.display())))?
    } else {
        load_flows(cfg, net).map_err(|e| match e {
            CliError::Config(_) => CliError::Config("missing required key `history` (or `flows` with `window`)".into()),
            other => other,
        })?
    };
    let start = if cfg.is_set("history") {
        series.steps().checked_sub(t_len)
    } else {
        let w: usize = cfg.get("window")?;
        (w + t_len <= series.steps()).then_some(w)
    }
    .ok_or_else(|| runtime(format!("history needs {t_len} rows, series has {}", series.steps())))?;
    Ok(series.rows(start..start + t_len))
}

fn normalized_batch(model: &Model, raw: &Tensor) -> Result<Tensor, CliError> {
    let s = raw.shape().to_vec();
    Ok(model.normalizer().normalize_tensor(raw).reshaped(&[1, s[0], s[1]])?)
}

pub fn predict(cfg: &RunConfig) -> Result<(), CliError> {
    let net = load_graph(cfg)?;
    let model = load_model(&cfg.path("checkpoint")?, &net)?;
    let raw = history_window(cfg, &net, model.config().history_len)?;
    let out = prepare_out(cfg)?;
    let pred = model.predict_normalized(&normalized_batch(&model, &raw)?)?;
    let flows = model.normalizer().denormalize_tensor(&pred.flows);
    let series = FlowSeries::new(net.edge_count(), flows.into_data())?;
    series.write_csv_from(create(&out.join("predictions.csv"))?, 'e', 1)?;
    println!("steps={} nfe={}", series.steps(), pred.nfe);
    Ok(())
}

pub fn nfe_study(cfg: &RunConfig) -> Result<(), CliError> {
    let net = load_graph(cfg)?;
    let flows = load_flows(cfg, &net)?;
    let base = load_model(&cfg.path("checkpoint")?, &net)?;
    let rtols: Vec<f64> = cfg.list("rtol_list")?;
    let split: Split = cfg.get::<String>("split")?.parse()?;
    let out = prepare_out(cfg)?;
    let (t, h) = (base.config().history_len, base.config().horizon);
    let data = Dataset::window_and_split(flows, t, h)?;
    let mut w = create(&out.join("nfe_study.csv"))?;
    writeln!(w, "rtol,mean_nfe,mae")?;
    for rtol in rtols {
        let mut mc = base.config().clone();
        mc.solver = SolverConfig {
            max_nfe: mc.solver.max_nfe.max(100_000),
            ..SolverConfig::dopri5(rtol, rtol)
        };
        let model = Model::from_parts(mc, Arc::clone(&net), *base.normalizer(), base.params().clone())?;
        let (mut nfe, mut abs, mut count) = (0usize, 0.0, 0usize);
        let starts: Vec<usize> = data.windows(split).collect();
        for &s in &starts {
            let batch = data.batch(&[s])?;
            let pred = model.predict_normalized(&batch.history)?;
            nfe += pred.nfe;
            for (p, y) in pred.flows.data().iter().zip(data.target_raw(s).data()) {
                abs += (model.normalizer().denormalize(*p) - y).abs();
                count += 1;
            }
        }
        let line = format!("{rtol},{},{}", nfe as f64 / starts.len().max(1) as f64, abs / count.max(1) as f64);
        println!("{line}");
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn inspect_pef(cfg: &RunConfig) -> Result<(), CliError> {
    let net = load_graph(cfg)?;
    let model = load_model(&cfg.path("checkpoint")?, &net)?;
    if !model.config().architecture.has_latent_field() {
        return Err(CliError::Config("the gru model has no potential field to inspect".into()));
    }
    let raw = history_window(cfg, &net, model.config().history_len)?;
    let out = prepare_out(cfg)?;
    let pred = model.predict_normalized(&normalized_batch(&model, &raw)?)?;
    let norm = *model.normalizer();
    let w = model.params().get("decoder.w")?.data().to_vec();
    let b = model.params().get("decoder.b")?.item()?;
    let offset = norm.std * b + norm.mean;
    let (n, d) = (net.node_count(), model.config().latent_channels);
    let mut pw = create(&out.join("potentials.csv"))?;
    let mut fw = create(&out.join("flows.csv"))?;
    write!(pw, "step,node,potential")?;
    for c in 0..d {
        write!(pw, ",z{c}")?;
    }
    writeln!(pw)?;
    writeln!(fw, "step,edge,flow")?;
    for (k, state) in pred.states.iter().enumerate().skip(1) {
        let z = state.data();
        // potential in flow units: decoded flow is −(u_src − u_dst) + offset
        let u: Vec<f64> = (0..n).map(|i| norm.std * (0..d).map(|c| w[c] * z[i * d + c]).sum::<f64>()).collect();
        for i in 0..n {
            write!(pw, "{k},{i},{}", u[i])?;
            for c in 0..d {
                write!(pw, ",{}", z[i * d + c])?;
            }
            writeln!(pw)?;
        }
        for (e, edge) in net.edges().iter().enumerate() {
            writeln!(fw, "{k},{e},{}", -(u[edge.src] - u[edge.dst]) + offset)?;
        }
    }
    pw.flush()?;
    fw.flush()?;
    fs::write(out.join("inspect.txt"), format!("offset={offset}\nnfe={}\n", pred.nfe))?;
    println!("steps={} nodes={n} edges={} offset={offset}", pred.states.len() - 1, net.edge_count());
    Ok(())
}
