use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use stden::odeint::integrate;
use stden::{Architecture, NodeField, SolverConfig, Tape, Tensor};
use stden_bench::Fixture;

fn operators(c: &mut Criterion) {
    let fx = Fixture::new(1);
    let n = fx.net.node_count();
    let z = NodeField::new(&fx.net, 1, (0..n).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
    c.bench_function("laplacian_apply n=50", |b| b.iter(|| fx.net.laplacian_apply(black_box(&z)).unwrap()));
    let zb = Tensor::new(vec![16, n, 1], (0..16 * n).map(|i| (i as f64 * 0.11).cos()).collect()).unwrap();
    c.bench_function("laplacian batch 16", |b| b.iter(|| fx.net.laplacian_tensor(black_box(&zb)).unwrap()));
}

fn training_step(c: &mut Criterion) {
    let fx = Fixture::new(16);
    let mut group = c.benchmark_group("loss forward+backward, batch 16");
    group.sample_size(20);
    for arch in [Architecture::Stden, Architecture::IncP, Architecture::UnkP, Architecture::GruDirect] {
        let model = fx.model(arch);
        group.bench_with_input(BenchmarkId::from_parameter(arch.name()), &model, |b, m| {
            b.iter(|| {
                let tape = Tape::new();
                let (loss, _) = m.loss_on(&tape, m.params(), &fx.batch, None, 1.0, 0.0).unwrap();
                tape.backward(loss).unwrap()
            })
        });
    }
    group.finish();
}

fn solvers(c: &mut Criterion) {
    let fx = Fixture::new(1);
    let model = fx.model(Architecture::Stden);
    let n = fx.net.node_count();
    let z0 = Tensor::new(vec![n, 1], (0..n).map(|i| (i as f64 * 0.7).sin()).collect()).unwrap();
    let times: Vec<f64> = (0..=12).map(f64::from).collect();
    let rhs = |z: &Tensor, t: f64| -> stden::Result<Tensor> {
        let f = NodeField::from_tensor(z.clone())?;
        Ok(model.dynamics(&f, t)?.0)
    };
    let mut group = c.benchmark_group("integrate 12 intervals");
    for (label, cfg) in [("rk4x4", SolverConfig::rk4(4)), ("dopri5 1e-3", SolverConfig::dopri5(1e-3, 1e-4)), ("dopri5 1e-6", SolverConfig::dopri5(1e-6, 1e-7))] {
        group.bench_function(label, |b| b.iter(|| integrate(rhs, black_box(z0.clone()), &times, &cfg).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, operators, training_step, solvers);
criterion_main!(benches);
