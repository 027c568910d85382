mod common;

use proptest::prelude::*;
use stden::data::{random_network, simulate, split_counts, window_count, Dataset, FlowSeries, Split, SynthConfig};
use stden::{Error, RoadNetwork};

fn series(steps: usize, cols: usize) -> FlowSeries {
    FlowSeries::new(cols, common::random_values(steps as u64, steps * cols, 4.0)).unwrap()
}

proptest! {
    #[test]
    fn test_windows_never_see_training_targets(steps in 60usize..3000, t in 1usize..13, h in 1usize..13) {
        let d = Dataset::window_and_split(series(steps, 2), t, h).unwrap();
        let (train, val, test) = (d.windows(Split::Train), d.windows(Split::Val), d.windows(Split::Test));
        // contiguous, ordered, covering every window
        prop_assert_eq!(train.start, 0);
        prop_assert_eq!(train.end, val.start);
        prop_assert_eq!(val.end, test.start);
        prop_assert_eq!(test.end, window_count(steps, t, h));
        let last_train_target = train.end - 1 + t + h - 1;
        if val.len() + 1 >= t + h {
            prop_assert!(test.start > last_train_target);
        }
    }

    #[test]
    fn split_sizes_follow_seven_one_two(w in 1usize..100_000) {
        let (a, b, c) = split_counts(w);
        prop_assert_eq!(a + b + c, w);
        prop_assert_eq!(a, w * 7 / 10);
        prop_assert_eq!(b, w / 10);
    }
}

#[test]
fn default_dataset_has_no_leakage() {
    let cfg = SynthConfig::default();
    let d = Dataset::window_and_split(series(cfg.steps, 3), 12, 12).unwrap();
    let train_end = d.windows(Split::Train).end - 1 + 24;
    assert!(d.windows(Split::Test).start > train_end);
    assert_eq!(d.windows(Split::Train).len() + d.windows(Split::Val).len() + d.windows(Split::Test).len(), cfg.steps - 23);
}

#[test]
fn normalizer_uses_training_rows_only() {
    let mut s = series(200, 2).values().to_vec();
    let base = Dataset::window_and_split(FlowSeries::new(2, s.clone()).unwrap(), 12, 12).unwrap();
    // rewriting rows only test windows touch leaves the statistics alone
    let n = s.len();
    s[n - 10..].iter_mut().for_each(|v| *v = 1e6);
    let changed = Dataset::window_and_split(FlowSeries::new(2, s).unwrap(), 12, 12).unwrap();
    assert_eq!(base.normalizer(), changed.normalizer());
}

#[test]
fn flows_and_graph_survive_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig { steps: 300, ..SynthConfig::default() };
    let net = random_network(&cfg).unwrap();
    let sim = simulate(&net, &cfg).unwrap();

    let gpath = dir.path().join("graph.txt");
    net.save(std::fs::File::create(&gpath).unwrap()).unwrap();
    let back = RoadNetwork::load(std::io::BufReader::new(std::fs::File::open(&gpath).unwrap())).unwrap();
    assert_eq!(back.edges(), net.edges());

    let fpath = dir.path().join("flows.csv");
    sim.flows.save_flows(std::fs::File::create(&fpath).unwrap()).unwrap();
    let flows = FlowSeries::load_flows(std::fs::File::open(&fpath).unwrap(), &back).unwrap();
    assert_eq!(flows.values(), sim.flows.values());
}

#[test]
fn csv_edge_count_must_match_network() {
    let net = RoadNetwork::parse("3\n0 1 1\n1 2 1\n").unwrap();
    let text = "t,e0,e1,e2\n0,1,2,3\n";
    assert!(FlowSeries::load_flows(text.as_bytes(), &net).is_err());
    let text = "t,e0,e1\n0,1,\n";
    match FlowSeries::load_flows(text.as_bytes(), &net) {
        Err(Error::Parse { line, msg }) => {
            assert_eq!(line, 2);
            assert!(msg.contains("e1") || msg.contains("column"), "{msg}");
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn noiseless_linear_simulation_reconstructs_flows_from_potentials() {
    let cfg = SynthConfig {
        steps: 600,
        noise: 0.0,
        mode: stden::model::Physics::Linear,
        ..SynthConfig::default()
    };
    let net = random_network(&cfg).unwrap();
    let sim = simulate(&net, &cfg).unwrap();
    let (n, m) = (net.node_count(), net.edge_count());
    for t in 0..cfg.steps {
        let z = stden::NodeField::scalar_field(sim.potentials.row(t).to_vec());
        let g = net.gradient(&z).unwrap();
        for e in 0..m {
            assert_eq!(sim.flows.row(t)[e], -g.values()[e]);
        }
    }
    let energy = |t: usize| (0..n).map(|i| sim.potentials.row(t)[i] / sim.truth.phi[i]).sum::<f64>();
    let scale: f64 = (0..n).map(|i| sim.potentials.row(0)[i].abs() / sim.truth.phi[i]).sum();
    for t in 0..cfg.steps {
        assert!((energy(t) - energy(0)).abs() <= 1e-9 * scale);
    }
}
