//! Attention, head and network behaviour checked against independent dense
//! evaluations and structural identities.

mod support;

use rand::seq::SliceRandom;
use seld_core::model::{mhsa, self_attention, Bound, Mode, ModelConfig, SeldModel};
use seld_core::tensor::{archive, AdamConfig, Graph, Tensor};
use support::{brute_attention, dense_mm, rand_tensor, rng};

fn run_attention(h: &Tensor, wq: &Tensor, wk: &Tensor, wv: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let vs = [h, wq, wk, wv].map(|t| g.constant(t.clone()));
    let y = self_attention(&mut g, vs[0], vs[1], vs[2], vs[3], true).unwrap();
    g.value(y).clone()
}

#[test]
fn self_attention_matches_brute_force() {
    let mut r = rng(11);
    for _ in 0..50 {
        use rand::Rng;
        let (t, i, k, o) = (
            r.gen_range(1..6),
            r.gen_range(1..5),
            r.gen_range(1..4),
            r.gen_range(1..4),
        );
        let h = rand_tensor(&[1, t, i], &mut r);
        let wq = rand_tensor(&[i, k], &mut r);
        let wk = rand_tensor(&[i, k], &mut r);
        let wv = rand_tensor(&[i, o], &mut r);
        let y = run_attention(&h, &wq, &wk, &wv);
        let want = brute_attention(h.data(), wq.data(), wk.data(), wv.data(), t, i, k, o);
        for (a, b) in y.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-10);
        }
    }
}

#[test]
fn single_step_attention_is_value_projection() {
    let mut r = rng(12);
    for _ in 0..20 {
        let h = rand_tensor(&[1, 1, 5], &mut r);
        let (wq, wk, wv) = (
            rand_tensor(&[5, 3], &mut r),
            rand_tensor(&[5, 3], &mut r),
            rand_tensor(&[5, 4], &mut r),
        );
        let y = run_attention(&h, &wq, &wk, &wv);
        let want = dense_mm(h.data(), wv.data(), 1, 5, 4);
        for (a, b) in y.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn zero_query_gives_uniform_attention() {
    let mut r = rng(13);
    let h = rand_tensor(&[1, 4, 3], &mut r);
    let wv = rand_tensor(&[3, 2], &mut r);
    let y = run_attention(
        &h,
        &Tensor::zeros(&[3, 2]),
        &rand_tensor(&[3, 2], &mut r),
        &wv,
    );
    let v = dense_mm(h.data(), wv.data(), 4, 3, 2);
    let mean = [
        (0..4).map(|t| v[t * 2]).sum::<f64>() / 4.0,
        (0..4).map(|t| v[t * 2 + 1]).sum::<f64>() / 4.0,
    ];
    for t in 0..4 {
        assert!((y.data()[t * 2] - mean[0]).abs() < 1e-12);
        assert!((y.data()[t * 2 + 1] - mean[1]).abs() < 1e-12);
    }
}

fn eye(n: usize) -> Tensor {
    Tensor::eye(n)
}

#[test]
fn mhsa_structural_identities() {
    let mut r = rng(14);
    let h = rand_tensor(&[2, 3, 4], &mut r);
    let w: Vec<Tensor> = (0..6).map(|_| rand_tensor(&[4, 4], &mut r)).collect();

    // one head with identity projection
    let mut g = Graph::new();
    let hv = g.constant(h.clone());
    let ws: Vec<_> = w.iter().map(|t| g.constant(t.clone())).collect();
    let id = g.constant(eye(4));
    let single = self_attention(&mut g, hv, ws[0], ws[1], ws[2], true).unwrap();
    let m1 = mhsa(&mut g, hv, &[[ws[0], ws[1], ws[2]]], id, true).unwrap();
    assert!(g.value(single).max_abs_diff(g.value(m1)) < 1e-15);

    // second head silenced by a zero value matrix and a [I; 0] projection
    let zero = g.constant(Tensor::zeros(&[4, 4]));
    let mut stacked = eye(4).into_data();
    stacked.extend(vec![0.0; 16]);
    let ip = g.constant(Tensor::new(&[8, 4], stacked).unwrap());
    let m2 = mhsa(
        &mut g,
        hv,
        &[[ws[0], ws[1], ws[2]], [ws[3], ws[4], zero]],
        ip,
        true,
    )
    .unwrap();
    assert!(g.value(single).max_abs_diff(g.value(m2)) < 1e-15);

    // swapping heads together with the projection row blocks
    let wp = rand_tensor(&[8, 4], &mut r);
    let mut swapped = wp.data()[16..].to_vec();
    swapped.extend_from_slice(&wp.data()[..16]);
    let wpv = g.constant(wp);
    let wps = g.constant(Tensor::new(&[8, 4], swapped).unwrap());
    let a = mhsa(
        &mut g,
        hv,
        &[[ws[0], ws[1], ws[2]], [ws[3], ws[4], ws[5]]],
        wpv,
        true,
    )
    .unwrap();
    let b = mhsa(
        &mut g,
        hv,
        &[[ws[3], ws[4], ws[5]], [ws[0], ws[1], ws[2]]],
        wps,
        true,
    )
    .unwrap();
    assert!(g.value(a).max_abs_diff(g.value(b)) < 1e-12);
}

fn small_mhsa(n: usize, p: bool, ln: bool) -> ModelConfig {
    ModelConfig::mhsa(n, 2, p, ln)
}

fn run_sa_stack(model: &SeldModel, h: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let p = Bound::bind(&mut g, model.params(), false);
    let hv = g.constant(h.clone());
    let y = model.sa_stack(&mut g, &p, hv).unwrap();
    g.value(y).clone()
}

fn permute_rows(h: &Tensor, perm: &[usize]) -> Tensor {
    let s = h.shape();
    let (t, d) = (s[1], s[2]);
    let mut out = vec![0.0; h.numel()];
    for b in 0..s[0] {
        for (dst, &src) in perm.iter().enumerate() {
            out[(b * t + dst) * d..][..d].copy_from_slice(&h.data()[(b * t + src) * d..][..d]);
        }
    }
    Tensor::new(s, out).unwrap()
}

#[test]
fn attention_stack_permutation_equivariance() {
    let mut r = rng(15);
    for (ln, seed) in [(false, 1u64), (true, 2)] {
        let model = SeldModel::new(small_mhsa(2, false, ln), seed).unwrap();
        let h = rand_tensor(&[1, 50, 128], &mut r);
        let mut perm: Vec<usize> = (0..50).collect();
        perm.shuffle(&mut r);
        let lhs = run_sa_stack(&model, &permute_rows(&h, &perm));
        let rhs = permute_rows(&run_sa_stack(&model, &h), &perm);
        assert!(lhs.max_abs_diff(&rhs) < 1e-10, "LN={ln}");
    }
    // a learnt position table breaks the symmetry
    let model = SeldModel::new(small_mhsa(1, true, false), 3).unwrap();
    let h = rand_tensor(&[1, 50, 128], &mut r);
    let mut perm: Vec<usize> = (0..50).collect();
    perm.shuffle(&mut r);
    let lhs = run_sa_stack(&model, &permute_rows(&h, &perm));
    let rhs = permute_rows(&run_sa_stack(&model, &h), &perm);
    assert!(lhs.max_abs_diff(&rhs) > 1e-6);
}

#[test]
fn zero_position_table_equals_no_position_table() {
    let mut with_p = SeldModel::new(small_mhsa(2, true, true), 4).unwrap();
    with_p
        .params_mut()
        .get_mut("posemb")
        .unwrap()
        .data_mut()
        .fill(0.0);
    let mut without = SeldModel::new(small_mhsa(2, false, true), 4).unwrap();
    for (name, t) in with_p.params().iter() {
        if let Some(dst) = without.params_mut().get_mut(name) {
            *dst = t.clone();
        }
    }
    let h = rand_tensor(&[2, 50, 128], &mut rng(16));
    assert_eq!(run_sa_stack(&with_p, &h), run_sa_stack(&without, &h));
}

/// Row-wise layer norm with unit gain and zero bias.
fn plain_layer_norm(x: &Tensor) -> Tensor {
    let d = *x.shape().last().unwrap();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(d) {
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        for v in row.iter_mut() {
            *v = (*v - mean) / (var + 1e-5).sqrt();
        }
    }
    out
}

#[test]
fn zero_second_block_passes_normalized_residual() {
    let mut model = SeldModel::new(small_mhsa(2, false, true), 5).unwrap();
    let one_block = {
        let mut m = SeldModel::new(small_mhsa(1, false, true), 5).unwrap();
        for (name, t) in model.params().iter() {
            if let Some(dst) = m.params_mut().get_mut(name) {
                *dst = t.clone();
            }
        }
        m
    };
    for name in [
        "sa.b2.h1.wq",
        "sa.b2.h1.wk",
        "sa.b2.h1.wv",
        "sa.b2.h2.wq",
        "sa.b2.h2.wk",
        "sa.b2.h2.wv",
        "sa.b2.wp",
    ] {
        model
            .params_mut()
            .get_mut(name)
            .unwrap()
            .data_mut()
            .fill(0.0);
    }
    let h = rand_tensor(&[1, 50, 128], &mut rng(17));
    let h1 = run_sa_stack(&one_block, &h);
    let h2 = run_sa_stack(&model, &h);
    assert!(h2.max_abs_diff(&plain_layer_norm(&h1)) < 1e-9);
}

#[test]
fn bare_single_block_is_mhsa() {
    let model = SeldModel::new(small_mhsa(1, false, false), 6).unwrap();
    let h = rand_tensor(&[1, 50, 128], &mut rng(18));
    let mut g = Graph::new();
    let p = Bound::bind(&mut g, model.params(), false);
    let hv = g.constant(h.clone());
    let heads =
        [1, 2].map(|m| ["wq", "wk", "wv"].map(|w| p.var(&format!("sa.b1.h{m}.{w}")).unwrap()));
    let direct = mhsa(&mut g, hv, &heads, p.var("sa.b1.wp").unwrap(), true).unwrap();
    assert_eq!(g.value(direct), &run_sa_stack(&model, &h));
}

fn run_head(model: &SeldModel, h: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let p = Bound::bind(&mut g, model.params(), false);
    let hv = g.constant(h.clone());
    let y = model.head(&mut g, &p, hv).unwrap();
    g.value(y).clone()
}

#[test]
fn head_matches_dense_evaluation() {
    let model = SeldModel::new(ModelConfig::default(), 7).unwrap();
    let h = rand_tensor(&[1, 1, 128], &mut rng(19));
    let p = model.params();
    let get = |n: &str| p.get(n).unwrap().data().to_vec();
    let mut y1 = dense_mm(h.data(), &get("fc1.w"), 1, 128, 128);
    for (a, b) in y1.iter_mut().zip(get("fc1.b")) {
        *a += b;
    }
    let mut y2 = dense_mm(&y1, &get("fc2.w"), 1, 128, 36);
    for (a, b) in y2.iter_mut().zip(get("fc2.b")) {
        *a = (*a + b).tanh();
    }
    let y = run_head(&model, &h);
    assert_eq!(y.shape(), &[1, 1, 12, 3]);
    for (a, b) in y.data().iter().zip(&y2) {
        assert!((a - b).abs() < 1e-12);
    }
    let mut zeroed = model.clone();
    for n in ["fc1.w", "fc1.b", "fc2.w", "fc2.b"] {
        zeroed.params_mut().get_mut(n).unwrap().data_mut().fill(0.0);
    }
    assert!(run_head(&zeroed, &h).data().iter().all(|&v| v == 0.0));
}

#[test]
fn forward_shape_and_range() {
    let mut r = rng(20);
    for cfg in [ModelConfig::mhsa(1, 2, true, true), ModelConfig::baseline()] {
        let model = SeldModel::new(cfg, 8).unwrap();
        for b in [1, 2] {
            let x = rand_range(&[b, 7, 250, 64], -3.0, 3.0, &mut r);
            let y = model.predict(&x).unwrap();
            assert_eq!(y.shape(), &[b, 50, 12, 3]);
            assert!(y.data().iter().all(|v| v.abs() < 1.0));
            assert_eq!(
                model.predict(&x).unwrap(),
                y,
                "eval forward must be deterministic"
            );
        }
    }
}

fn rand_range(shape: &[usize], lo: f64, hi: f64, r: &mut rand_chacha::ChaCha8Rng) -> Tensor {
    support::rand_range(shape, lo, hi, r)
}

#[test]
fn cnn_geometry_and_zero_input() {
    let model = SeldModel::new(ModelConfig::default(), 9).unwrap();
    for t in [250, 500] {
        let mut g = Graph::new();
        let p = Bound::bind(&mut g, model.params(), false);
        let x = g.constant(Tensor::zeros(&[1, 7, t, 64]));
        let mut bn = Vec::new();
        let y = model
            .cnn_extractor(&mut g, &p, x, Mode::Eval, &mut bn)
            .unwrap();
        assert_eq!(g.shape(y), &[1, t / 5, 128]);
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn zero_gru_output_is_constant_over_time() {
    let mut model = SeldModel::new(ModelConfig::baseline(), 10).unwrap();
    let names: Vec<String> = model
        .params()
        .iter()
        .map(|(n, _)| n.to_string())
        .filter(|n| n.starts_with("gru."))
        .collect();
    for n in names {
        model.params_mut().get_mut(&n).unwrap().data_mut().fill(0.0);
    }
    let x = rand_range(&[1, 7, 250, 64], -1.0, 1.0, &mut rng(21));
    let y = model.predict(&x).unwrap();
    let first = &y.data()[..36];
    for frame in y.data().chunks(36) {
        assert_eq!(frame, first);
    }
}

fn table1_configs() -> Vec<ModelConfig> {
    let m = ModelConfig::mhsa;
    vec![
        ModelConfig::baseline(),
        m(1, 4, false, false),
        m(1, 8, false, false),
        m(1, 12, false, false),
        m(2, 8, false, false),
        m(3, 8, false, false),
        m(2, 8, false, true),
        m(3, 8, false, true),
        m(2, 12, false, true),
        m(3, 12, false, true),
        m(3, 8, false, true).with_attn_dims(vec![128, 256, 128]),
        m(3, 8, false, true).with_attn_dims(vec![128, 64, 128]),
        m(2, 8, true, true),
        m(3, 8, true, true),
        m(3, 8, true, true).with_attn_dims(vec![128, 256, 128]),
    ]
}

#[test]
fn param_count_matches_serialized_weights() {
    for cfg in table1_configs() {
        let model = SeldModel::new(cfg.clone(), 0).unwrap();
        let mut buf = Vec::new();
        archive::write(&mut buf, &model.to_entries()).unwrap();
        let entries = archive::read(buf.as_slice()).unwrap();
        let trainable: usize = entries
            .iter()
            .filter(|(n, _)| {
                !n.ends_with(".rmean") && !n.ends_with(".rvar") && !n.starts_with("featstat.")
            })
            .map(|(_, t)| t.numel())
            .sum();
        assert_eq!(trainable, cfg.param_count(), "{}", cfg.id());
        assert_eq!(model.param_count(), cfg.param_count());
        let back = SeldModel::from_entries(cfg.clone(), entries).unwrap();
        assert_eq!(back.to_entries(), model.to_entries());
    }
}

#[test]
fn one_adam_step_lowers_the_loss_for_every_table_config() {
    let (x, target) = support::synthetic_batch(2, 22);
    for cfg in table1_configs() {
        let mut model = SeldModel::new(cfg.clone(), 1).unwrap();
        // The first Adam update is a ±lr sign step on every weight; at the
        // training rate of 1e-3 that overshoots for some wide configs, so
        // gradient flow is checked in the small-step regime.
        let mut opt = model.new_optimizer(AdamConfig {
            lr: 1e-5,
            ..AdamConfig::default()
        });
        let before = model.loss(&x, &target, Mode::Train).unwrap();
        let reported = model.train_step(&mut opt, &x, &target).unwrap();
        assert_eq!(before, reported);
        let after = model.loss(&x, &target, Mode::Train).unwrap();
        assert!(after < before, "{}: {before} -> {after}", cfg.id());
    }
}

#[test]
fn training_is_bit_reproducible() {
    let mut r = rng(23);
    let x = rand_range(&[2, 7, 250, 64], -1.0, 1.0, &mut r);
    let target = rand_range(&[2, 50, 12, 3], -0.5, 0.5, &mut r);
    let run = || {
        let mut model = SeldModel::new(ModelConfig::mhsa(1, 2, true, true), 5).unwrap();
        let mut opt = model.new_optimizer(AdamConfig::default());
        for _ in 0..3 {
            model.train_step(&mut opt, &x, &target).unwrap();
        }
        model.to_entries()
    };
    assert_eq!(run(), run());
}
