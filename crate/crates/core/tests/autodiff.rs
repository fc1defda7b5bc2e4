use ael_core::gradcheck::{gradient_relative_error, random_graph};
use ael_core::rng;
use proptest::prelude::*;

#[test]
fn random_graphs_match_finite_differences() {
    let mut r = rng::stream(rng::derive(0, "autodiff"));
    for i in 0..100 {
        let (g, out) = random_graph(&mut r).unwrap();
        let err = gradient_relative_error(&g, out, 1e-6).unwrap();
        assert!(err < 1e-6, "graph {i}: relative error {err:e}");
    }
}

#[test]
fn evaluate_is_bitwise_pure() {
    let mut r = rng::stream(5);
    for _ in 0..10 {
        let (g, out) = random_graph(&mut r).unwrap();
        let a = g.evaluate(&Default::default()).unwrap();
        let b = g.evaluate(&Default::default()).unwrap();
        assert_eq!(a.value(out).data()[0].to_bits(), b.value(out).data()[0].to_bits());
        assert_eq!(a.value(out).data()[0].to_bits(), g.value(out).data()[0].to_bits());
    }
}

proptest! {
    #[test]
    fn softmax_sums_to_one(v in proptest::collection::vec(-30.0f64..30.0, 1..12)) {
        let mut g = ael_core::Graph::new();
        let x = g.input("x", ael_core::Tensor::vector(v)).unwrap();
        let p = g.softmax(x).unwrap();
        let p = g.value(p);
        prop_assert!((p.sum() - 1.0).abs() < 1e-12);
        prop_assert!(p.data().iter().all(|&q| q > 0.0));
    }
}
