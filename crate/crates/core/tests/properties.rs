//! Property-based invariants of the tensor primitives, the ACCDOA codec and
//! the optimizer.

mod support;

use proptest::prelude::*;
use rand::Rng;
use seld_core::accdoa::{decode, encode, round_trip_check};
use seld_core::tensor::{archive, AdamConfig, AdamState, Graph, Tensor};
use support::{rand_range, rand_tensor, random_labels, rng};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(96))]

    #[test]
    fn softmax_rows_are_distributions(seed in any::<u64>(), scale in 0.1f64..500.0, axis in 0usize..3) {
        let x = rand_range(&[3, 4, 5], -scale, scale, &mut rng(seed));
        let mut g = Graph::new();
        let v = g.constant(x);
        let y = g.softmax(v, axis).unwrap();
        let y = g.value(y);
        prop_assert!(y.data().iter().all(|&p| (0.0..=1.0).contains(&p)));
        let s = [3usize, 4, 5];
        let stride: usize = s[axis + 1..].iter().product();
        let outer: usize = s[..axis].iter().product();
        for o in 0..outer {
            for i in 0..stride {
                let total: f64 = (0..s[axis]).map(|k| y.data()[(o * s[axis] + k) * stride + i]).sum();
                prop_assert!((total - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_rows_are_standardized(seed in any::<u64>(), scale in 0.01f64..100.0) {
        let x = rand_range(&[4, 7], -scale, scale, &mut rng(seed));
        let mut g = Graph::new();
        let v = g.constant(x);
        let gamma = g.constant(Tensor::ones(&[7]));
        let beta = g.constant(Tensor::zeros(&[7]));
        let y = g.layer_norm(v, gamma, beta, 1e-5).unwrap();
        for (row, input) in g.value(y).data().chunks(7).zip(g.value(v).data().chunks(7)) {
            let stats = |r: &[f64]| {
                let m = r.iter().sum::<f64>() / 7.0;
                (m, r.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / 7.0)
            };
            let (mean, var) = stats(row);
            let (_, v_in) = stats(input);
            prop_assert!(mean.abs() < 1e-10);
            // eps shrinks the variance to v/(v+eps) exactly
            prop_assert!((var - v_in / (v_in + 1e-5)).abs() < 1e-9);
            if v_in >= 10.0 {
                prop_assert!((var - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn matmul_is_associative(seed in any::<u64>()) {
        let mut r = rng(seed);
        let (a, b, c) = (rand_tensor(&[3, 4], &mut r), rand_tensor(&[4, 5], &mut r), rand_tensor(&[5, 2], &mut r));
        let mut g = Graph::new();
        let [a, b, c] = [a, b, c].map(|t| g.constant(t));
        let ab = g.matmul(a, b).unwrap();
        let left = g.matmul(ab, c).unwrap();
        let bc = g.matmul(b, c).unwrap();
        let right = g.matmul(a, bc).unwrap();
        let (l, rr) = (g.value(left), g.value(right));
        let norm = l.data().iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-300);
        prop_assert!(l.max_abs_diff(rr) / norm < 1e-9);
    }

    #[test]
    fn adam_zero_gradient_leaves_parameters(seed in any::<u64>(), steps in 1usize..5) {
        let p0 = rand_tensor(&[3, 3], &mut rng(seed));
        let mut p = p0.clone();
        let mut opt = AdamState::new(AdamConfig::default(), &[&p]);
        for _ in 0..steps {
            opt.step(&mut [&mut p], &[Tensor::zeros(&[3, 3])]).unwrap();
        }
        prop_assert_eq!(p, p0);
        prop_assert_eq!(opt.step_count(), steps as u64);
    }

    #[test]
    fn decode_is_scale_monotone(seed in any::<u64>(), s in 1.0f64..4.0, tau in 0.05f64..0.95) {
        let pred = rand_tensor(&[5, 12, 3], &mut rng(seed));
        let mut scaled = pred.clone();
        scaled.data_mut().iter_mut().for_each(|v| *v *= s);
        let a = decode(&pred, tau).unwrap();
        let b = decode(&scaled, tau).unwrap();
        for f in 0..5 {
            for c in 0..12 {
                if a.is_active(f, c) {
                    prop_assert!(b.is_active(f, c));
                    let d = a.doa(f, c);
                    prop_assert!(((d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt() - 1.0).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn archive_round_trips(seed in any::<u64>(), rank in 0usize..4) {
        let mut r = rng(seed);
        let shape: Vec<usize> = (0..rank).map(|_| r.gen_range(1..4)).collect();
        let entries = vec![("a.b".to_string(), rand_tensor(&shape, &mut r)), ("c".to_string(), Tensor::scalar(r.gen()))];
        let mut buf = Vec::new();
        archive::write(&mut buf, &entries).unwrap();
        prop_assert_eq!(archive::read(buf.as_slice()).unwrap(), entries);
    }
}

#[test]
fn accdoa_round_trip_on_random_labels() {
    for i in 0..1000u64 {
        let labels = random_labels(i, 50, (i % 10) as f64 / 20.0);
        for tau in [0.1, 0.5, 0.9] {
            assert!(
                round_trip_check(&labels, tau).unwrap(),
                "instance {i} tau {tau}"
            );
            let back = decode(&encode(&labels).unwrap(), tau).unwrap();
            assert_eq!(back.count_active(), labels.count_active());
        }
    }
}
