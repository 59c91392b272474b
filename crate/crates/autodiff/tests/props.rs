use proptest::prelude::*;
use sarreg_autodiff::{Graph, Tensor};

fn plane(h: usize, w: usize) -> impl Strategy<Value = Tensor<f64>> {
    proptest::collection::vec(-2.0f64..2.0, h * w).prop_map(move |v| Tensor::new(&[1, 1, h, w], v))
}

proptest! {
    #[test]
    fn zero_field_warp_is_identity((h, w) in (2usize..9, 2usize..9), seed in 0u64..1000) {
        let img = Tensor::new(&[1, 1, h, w], (0..h * w).map(|i| ((i as u64 * 2654435761 + seed) % 1000) as f64 / 999.0).collect());
        let g = Graph::new();
        let out = g.constant(img.clone()).warp(g.constant(Tensor::zeros(&[1, 2, h, w])));
        let value = out.value();
        prop_assert_eq!(value.data(), img.data());
    }

    #[test]
    fn sigmoid_and_clamp_stay_in_range(x in plane(4, 5)) {
        let g = Graph::new();
        let v = g.constant(x);
        prop_assert!(v.sigmoid().value().data().iter().all(|&s| (0.0..=1.0).contains(&s)));
        prop_assert!(v.clamp(-0.5, 0.25).value().data().iter().all(|&s| (-0.5..=0.25).contains(&s)));
    }

    #[test]
    fn mean_gradient_is_uniform(x in plane(3, 6)) {
        let g = Graph::new();
        let v = g.param(x);
        let grads = g.backward(v.mean());
        prop_assert!(grads.get_or_zero(v).data().iter().all(|&d| (d - 1.0 / 18.0).abs() < 1e-15));
    }

    #[test]
    fn joint_histogram_is_a_distribution(a in plane(4, 4), b in plane(4, 4)) {
        let g = Graph::new();
        let squash = |t: Tensor<f64>| t.map(|v| (v + 2.0) / 4.0);
        let hist = g.constant(squash(a)).joint_histogram(g.constant(squash(b)), 8);
        let total: f64 = hist.value().data().iter().sum();
        prop_assert!(hist.value().data().iter().all(|&p| p >= 0.0));
        prop_assert!((total - 1.0).abs() < 1e-12);
    }
}
