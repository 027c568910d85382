mod common;

use common::{dense_laplacian, max_abs_diff, random_graph, random_values};
use proptest::prelude::*;
use stden::graph::Weighting;
use stden::{NodeField, RoadNetwork, Tensor};

fn field(net: &RoadNetwork, d: usize, seed: u64) -> NodeField {
    NodeField::new(net, d, random_values(seed, net.node_count() * d, 3.0)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn laplacian_is_div_of_grad(seed in 0u64..10_000, n in 2usize..30, extra in 0usize..40, d in 1usize..4) {
        let net = random_graph(seed, n, extra);
        let z = field(&net, d, seed ^ 0x55);
        let lap = net.laplacian_apply(&z).unwrap();
        let comp = net.divergence(&net.gradient(&z).unwrap()).unwrap();
        prop_assert_eq!(lap.values(), comp.values());
    }

    #[test]
    fn constants_are_in_the_kernel(seed in 0u64..10_000, n in 2usize..30, c in -50.0f64..50.0) {
        let net = random_graph(seed, n, n);
        let z = NodeField::scalar_field(vec![c; n]);
        prop_assert!(net.gradient(&z).unwrap().values().iter().all(|&v| v == 0.0));
        prop_assert!(net.laplacian_apply(&z).unwrap().values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn laplacian_sums_to_zero_per_channel(seed in 0u64..10_000, n in 2usize..30, d in 1usize..4) {
        let net = random_graph(seed, n, 2 * n);
        let z = field(&net, d, seed + 1);
        let lap = net.laplacian_apply(&z).unwrap();
        let zmax = z.values().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for c in 0..d {
            let s: f64 = (0..n).map(|i| lap.values()[i * d + c]).sum();
            prop_assert!(s.abs() <= 1e-12 * zmax, "channel {} sum {}", c, s);
        }
    }

    #[test]
    fn gradient_and_divergence_are_adjoint(seed in 0u64..10_000, n in 2usize..25) {
        let net = random_graph(seed, n, n);
        let z = field(&net, 1, seed + 2);
        let q = Tensor::new(vec![net.edge_count(), 1], random_values(seed + 3, net.edge_count(), 2.0)).unwrap();
        let lhs = net.gradient(&z).unwrap().0.dot(&q);
        let rhs = z.0.dot(&net.divergence_tensor(&q).unwrap());
        prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()));
    }

    #[test]
    fn negating_z_negates_gradient(seed in 0u64..10_000, n in 2usize..25) {
        let net = random_graph(seed, n, n);
        let z = field(&net, 2, seed);
        let neg = NodeField(z.0.scaled(-1.0));
        let g = net.gradient(&z).unwrap();
        let gn = net.gradient(&neg).unwrap();
        prop_assert!(g.values().iter().zip(gn.values()).all(|(a, b)| *a == -*b));
    }

    #[test]
    fn reversing_an_edge_flips_only_its_row(seed in 0u64..10_000, n in 3usize..20, pick in 0usize..1000) {
        let net = random_graph(seed, n, n);
        let id = pick % net.edge_count();
        let rev = net.with_reversed_edge(id).unwrap();
        let z = field(&net, 1, seed);
        let (g, gr) = (net.gradient(&z).unwrap(), rev.gradient(&z).unwrap());
        for e in 0..net.edge_count() {
            let expect = if e == id { -g.values()[e] } else { g.values()[e] };
            prop_assert_eq!(gr.values()[e], expect);
        }
    }
}

#[test]
fn laplacian_matches_dense_incidence_product() {
    for seed in 0..20 {
        let net = random_graph(seed, 12, 15);
        let z = field(&net, 1, seed);
        let dense = dense_laplacian(&net) * common::to_dvec(&z.0);
        let lap = net.laplacian_apply(&z).unwrap();
        assert!(max_abs_diff(lap.values(), dense.as_slice()) < 1e-12);
    }
}

#[test]
fn laplacian_is_positive_semidefinite() {
    for seed in 0..10 {
        let net = random_graph(seed, 15, 20);
        let eig = dense_laplacian(&net).symmetric_eigenvalues();
        assert!(eig.iter().all(|&l| l > -1e-10), "{eig}");
        // one zero eigenvalue for a connected graph
        assert_eq!(eig.iter().filter(|&&l| l.abs() < 1e-9).count(), 1);
    }
}

#[test]
fn weighted_mode_uses_weight_diagonal() {
    let net = random_graph(7, 10, 10).with_weighting(Weighting::Weighted);
    let b = net.incidence_matrix();
    let dense = dense_laplacian(&net);
    for e in 0..net.edge_count() {
        let edge = net.edges()[e];
        assert!((b[edge.src][e] - edge.weight.sqrt()).abs() < 1e-15);
    }
    let z = field(&net, 1, 3);
    let lap = net.laplacian_apply(&z).unwrap();
    assert!(max_abs_diff(lap.values(), (dense * common::to_dvec(&z.0)).as_slice()) < 1e-12);
}

#[test]
fn hand_examples() {
    let path = RoadNetwork::parse("2\n0 1 1.0\n").unwrap();
    let z = NodeField::scalar_field(vec![3.0, 1.0]);
    assert_eq!(path.gradient(&z).unwrap().values(), &[2.0]);
    assert_eq!(path.laplacian_apply(&z).unwrap().values(), &[2.0, -2.0]);

    let tri = RoadNetwork::parse("3\n0 1 1\n1 2 1\n2 0 1\n").unwrap();
    let g = tri.gradient(&NodeField::scalar_field(vec![1.0, 0.0, 0.0])).unwrap();
    assert_eq!(g.values(), &[1.0, 0.0, -1.0]);
    let ones = Tensor::new(vec![3, 1], vec![1.0; 3]).unwrap();
    assert_eq!(tri.divergence_tensor(&ones).unwrap().data(), &[0.0, 0.0, 0.0]);
}

#[test]
fn invalid_files_are_rejected() {
    assert!(RoadNetwork::parse("2\n0 0 1.0\n").is_err());
    assert!(RoadNetwork::parse("3\n0 1 1.0\n").is_err());
    assert!(RoadNetwork::parse("2\n0 5 1.0\n").is_err());
    assert!(RoadNetwork::parse("2\nzero one\n").is_err());
}
