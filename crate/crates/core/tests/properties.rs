use proptest::prelude::*;

use matchattn::bsm::{bilinear_softmax_forward, bilinear_softmax_reference, bilinear_weights};
use matchattn::decoder::consistency_check;
use matchattn::harness::bench::loglog_slope;
use matchattn::harness::io::{decode_flo, decode_pfm, encode_flo, encode_pfm};
use matchattn::harness::metrics::compute_metrics;
use matchattn::{with_precision, Precision, Tensor};

fn window() -> impl Strategy<Value = usize> {
    prop_oneof![Just(1usize), Just(3), Just(5), Just(7)]
}

fn sims(w: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-30.0f64..30.0, (w + 1) * (w + 1))
}

fn f32_values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()).prop_map(|v| v as f64), n)
}

proptest! {
    #[test]
    fn bilinear_softmax_is_a_distribution(
        (w, sim) in window().prop_flat_map(|w| (Just(w), sims(w))),
        fx in 0.0f64..1.0,
        fy in 0.0f64..1.0,
    ) {
        let (a, r) = with_precision(Precision::F64, || {
            (bilinear_softmax_forward(&sim, (fx, fy), w).unwrap(), bilinear_softmax_reference(&sim, (fx, fy), w).unwrap())
        });
        prop_assert!(a.weights.iter().all(|&v| v >= 0.0));
        prop_assert!((a.total() - 1.0).abs() < 1e-12);
        for (x, y) in a.weights.iter().zip(&r.weights) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn bilinear_weights_partition_unity(fx in 0.0f64..1.0, fy in 0.0f64..1.0) {
        let b = bilinear_weights(fx, fy);
        prop_assert!(b.iter().all(|&v| v >= 0.0));
        prop_assert!((b.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn pfm_round_trip((shape, data) in (1usize..9, 1usize..9, prop_oneof![Just(1usize), Just(3)]).prop_flat_map(|(h, w, c)| {
        let shape = if c == 1 { vec![h, w] } else { vec![h, w, 3] };
        (Just(shape), f32_values(h * w * c))
    })) {
        with_precision(Precision::F64, || {
            let t = Tensor::new(shape, data).unwrap();
            let back = decode_pfm(&encode_pfm(&t).unwrap()).unwrap();
            assert_eq!(back.shape(), t.shape());
            assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        });
    }

    #[test]
    fn flo_round_trip((h, w, data) in (1usize..9, 1usize..9).prop_flat_map(|(h, w)| (Just(h), Just(w), f32_values(h * w * 2)))) {
        with_precision(Precision::F64, || {
            let t = Tensor::new(vec![h, w, 2], data).unwrap();
            let back = decode_flo(&encode_flo(&t).unwrap()).unwrap();
            assert_eq!(back.shape(), t.shape());
            assert!(back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        });
    }

    #[test]
    fn uniform_stereo_pair_is_consistent(h in 1usize..6, w in 2usize..12, d in 0usize..4) {
        let d = d.min(w - 1) as f64;
        let f = |v: f64| Tensor::from_fn([h, w, 2], |i| if i % 2 == 0 { v } else { 0.0 }).unwrap();
        let (m0, m1, e0, _) = consistency_check(&f(-d), &f(d), 0.5).unwrap();
        prop_assert!(e0.data().iter().all(|&e| e == 0.0));
        prop_assert!(m0.data().iter().chain(m1.data()).all(|&m| m == 1.0));
    }

    #[test]
    fn perfect_prediction_scores_zero(h in 1usize..6, w in 1usize..6, v in -20.0f64..20.0) {
        let gt = Tensor::from_fn([h, w, 2], |i| v + i as f64 * 0.25).unwrap();
        let m = compute_metrics(&gt, &gt, None, None).unwrap();
        prop_assert_eq!(m.all.epe, 0.0);
        prop_assert_eq!(m.all.count, h * w);
    }

    #[test]
    fn slope_of_power_law(k in 0.5f64..2.5, c in 0.1f64..10.0) {
        let pts: Vec<(f64, f64)> = [16.0, 64.0, 256.0, 1024.0].iter().map(|&n: &f64| (n, c * n.powf(k))).collect();
        prop_assert!((loglog_slope(&pts).unwrap() - k).abs() < 1e-9);
    }
}
