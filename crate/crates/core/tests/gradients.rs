mod common;

use stden::diffengine::grad_check;
use stden::train::nll_loss;
use stden::{ParamStore, Tape, Tensor};

#[test]
fn every_primitive_matches_finite_differences() {
    for (name, r) in common::primitive_reports() {
        assert!(r.max_rel_error < 1e-6, "{name}: {r:?}");
    }
}

#[test]
fn rk4_unrolled_trajectory_gradient() {
    let r = common::rk4_trajectory_report();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
}

#[test]
fn full_model_loss_gradient() {
    let r = common::full_model_report();
    assert!(r.max_rel_error < 1e-4, "{r:?}");
    assert!(r.coordinates > 100);
}

#[test]
fn backward_is_linear() {
    let mut p = ParamStore::new();
    p.insert("x", Tensor::vector(common::random_values(1, 6, 2.0))).unwrap();
    let grad_of = |a: f64, b: f64| {
        let tape = Tape::new();
        let x = tape.param(&p, "x").unwrap();
        let f = x.tanh().unwrap().sum().unwrap();
        let g = x.mul(x).unwrap().mean().unwrap();
        let loss = f.scale(a).unwrap().add(g.scale(b).unwrap()).unwrap();
        tape.backward(loss).unwrap().param("x").unwrap().clone()
    };
    let (gf, gg, mix) = (grad_of(1.0, 0.0), grad_of(0.0, 1.0), grad_of(2.5, -0.75));
    for i in 0..6 {
        let expect = 2.5 * gf.data()[i] - 0.75 * gg.data()[i];
        assert!((mix.data()[i] - expect).abs() <= 1e-12 * expect.abs().max(1.0));
    }
}

#[test]
fn fan_out_sums_contributions() {
    let mut p = ParamStore::new();
    p.insert("w", Tensor::vector(vec![0.3, -0.8])).unwrap();
    let r = grad_check(
        &p,
        |t, s| {
            let w = t.param(s, "w")?;
            w.mul(w)?.add(w.tanh()?)?.add(w.exp()?)?.sum()
        },
        None,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-7, "{r:?}");
    let tape = Tape::new();
    let w = tape.param(&p, "w").unwrap();
    let g = tape.backward(w.add(w).unwrap().add(w).unwrap().sum().unwrap()).unwrap();
    assert_eq!(g.param("w").unwrap().data(), &[3.0, 3.0]);
}

#[test]
fn gradients_are_bit_identical_across_runs() {
    let run = || {
        let r = common::full_model_report();
        (r.max_rel_error, r.worst)
    };
    assert_eq!(run(), run());
}

#[test]
fn nll_gradient_equals_half_mse_gradient() {
    let mut p = ParamStore::new();
    p.insert("y", Tensor::vector(common::random_values(8, 10, 3.0))).unwrap();
    let target = Tensor::vector(common::random_values(9, 10, 3.0));
    let grad = |use_nll: bool| {
        let tape = Tape::new();
        let y = tape.param(&p, "y").unwrap();
        let t = tape.constant(target.clone()).unwrap();
        let loss = if use_nll {
            nll_loss(y, t, 1.0).unwrap()
        } else {
            let d = y.sub(t).unwrap();
            d.mul(d).unwrap().mean().unwrap().scale(0.5).unwrap()
        };
        tape.backward(loss).unwrap().param("y").unwrap().clone()
    };
    assert_eq!(grad(true).data(), grad(false).data());
}
