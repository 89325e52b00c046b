//! Every registered primitive, composed with a fixed random linear functional,
//! is checked against central differences at three random points.

use numerics::primitives::random_tensor;
use numerics::{grad_check, primitive_cases, Graph};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn every_primitive_within_tolerance() {
    let mut failures = Vec::new();
    for case in primitive_cases() {
        let err = case.check(3, 1000, 1e-5).unwrap();
        if err > 1e-5 {
            failures.push(format!("{}: {err:e}", case.name));
        }
    }
    assert!(failures.is_empty(), "{failures:?}");
}

#[test]
fn registry_covers_the_kernel_set() {
    let names: Vec<_> = primitive_cases().iter().map(|c| c.name).collect();
    for required in [
        "matmul lhs",
        "add",
        "scale",
        "softmax",
        "layer_norm",
        "tanh",
        "gelu",
        "gather_rows",
        "masked_fill",
        "max_axis 0",
        "mean",
        "sum",
    ] {
        assert!(names.contains(&required), "{required} missing");
    }
}

#[test]
fn softmax_composed_with_linear_functional_on_a_vector() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let point = random_tensor(&mut rng, &[1, 5]);
    let w = random_tensor(&mut rng, &[1, 5]);
    let err = grad_check(
        |g, x| {
            let s = g.softmax(x)?;
            let p = g.mul_const(s, w.clone())?;
            g.sum(p)
        },
        &point,
        1e-4,
    )
    .unwrap();
    assert!(err <= 1e-6, "{err:e}");
}

#[test]
fn two_paths_accumulate() {
    // d/dx [tanh(x) + x^2] = (1 - tanh^2) + 2x
    let x0 = [0.3, -1.2];
    let mut g = Graph::new();
    let x = g.param(numerics::Tensor::row(&x0));
    let a = g.tanh(x).unwrap();
    let b = g.square(x).unwrap();
    let s = g.add(a, b).unwrap();
    let total = g.sum(s).unwrap();
    let grads = g.backward(total).unwrap();
    for (got, &v) in grads.get(x).unwrap().data().iter().zip(&x0) {
        let want = 1.0 - v.tanh().powi(2) + 2.0 * v;
        assert!((got - want).abs() < 1e-14);
    }
}

#[test]
fn kernels_are_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut g = Graph::new();
        let a = g.param(random_tensor(&mut rng, &[6, 7]));
        let b = g.constant(random_tensor(&mut rng, &[7, 6]));
        let c = g.matmul(a, b).unwrap();
        let d = g.softmax(c).unwrap();
        let e = g.layer_norm(d, 1e-5).unwrap();
        let f = g.gelu(e).unwrap();
        let s = g.sum(f).unwrap();
        let grads = g.backward(s).unwrap();
        (g.value(f).clone(), grads.get(a).unwrap().clone())
    };
    let (v1, g1) = run();
    let (v2, g2) = run();
    assert_eq!(v1.data(), v2.data());
    assert_eq!(g1.data(), g2.data());
}
