//! Analytic gradients against central finite differences for every
//! differentiable primitive and the composite layers built from them.

mod support;

use seld_core::model::{gru_bidirectional, mhsa, self_attention, GruWeights};
use seld_core::tensor::{Graph, Tensor, Var};
use support::{grad_cases, gradcheck, rand_tensor, rng, GRAD_TOL};

const INSTANCES: u64 = 20;

#[test]
fn every_primitive_matches_finite_differences() {
    for case in grad_cases() {
        for i in 0..INSTANCES {
            let inputs = (case.inputs)(&mut rng(1000 + i));
            let err = gradcheck(&inputs, case.build).unwrap();
            assert!(
                err < GRAD_TOL,
                "{} instance {i}: relative error {err:e}",
                case.name
            );
        }
    }
}

#[test]
fn self_attention_gradients() {
    for i in 0..INSTANCES {
        let mut r = rng(2000 + i);
        let inputs = vec![
            rand_tensor(&[2, 4, 3], &mut r),
            rand_tensor(&[3, 2], &mut r),
            rand_tensor(&[3, 2], &mut r),
            rand_tensor(&[3, 3], &mut r),
        ];
        let err = gradcheck(&inputs, |g, v| {
            self_attention(g, v[0], v[1], v[2], v[3], true)
        })
        .unwrap();
        assert!(err < GRAD_TOL, "instance {i}: {err:e}");
    }
}

#[test]
fn mhsa_gradients() {
    for i in 0..INSTANCES {
        let mut r = rng(3000 + i);
        let mut inputs = vec![rand_tensor(&[1, 3, 4], &mut r)];
        for _ in 0..6 {
            inputs.push(rand_tensor(&[4, 2], &mut r));
        }
        inputs.push(rand_tensor(&[4, 4], &mut r));
        let err = gradcheck(&inputs, |g, v| {
            mhsa(
                g,
                v[0],
                &[[v[1], v[2], v[3]], [v[4], v[5], v[6]]],
                v[7],
                true,
            )
        })
        .unwrap();
        assert!(err < GRAD_TOL, "instance {i}: {err:e}");
    }
}

fn gru_from(v: &[Var]) -> GruWeights {
    GruWeights {
        wz: v[0],
        wr: v[1],
        wh: v[2],
        uz: v[3],
        ur: v[4],
        uh: v[5],
        bz: v[6],
        br: v[7],
        bh: v[8],
    }
}

fn gru_inputs(r: &mut rand_chacha::ChaCha8Rng, d: usize, h: usize) -> Vec<Tensor> {
    let mut v = Vec::new();
    for _ in 0..3 {
        v.push(rand_tensor(&[d, h], r));
    }
    for _ in 0..3 {
        v.push(rand_tensor(&[h, h], r));
    }
    for _ in 0..3 {
        v.push(rand_tensor(&[h], r));
    }
    v
}

#[test]
fn gru_bidirectional_gradients() {
    for i in 0..INSTANCES {
        let mut r = rng(4000 + i);
        let mut inputs = vec![rand_tensor(&[2, 3, 2], &mut r)];
        inputs.extend(gru_inputs(&mut r, 2, 3));
        inputs.extend(gru_inputs(&mut r, 2, 3));
        let err = gradcheck(&inputs, |g: &mut Graph, v: &[Var]| {
            gru_bidirectional(g, v[0], &gru_from(&v[1..10]), &gru_from(&v[10..19]))
        })
        .unwrap();
        assert!(err < GRAD_TOL, "instance {i}: {err:e}");
    }
}
