//! Shared test oracles: finite-difference gradient checking and small
//! random-instance helpers.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seld_core::accdoa::FrameLabels;
use seld_core::dsp::{FoaClip, SAMPLE_RATE};
use seld_core::synth;
use seld_core::tensor::{Graph, Tensor, Var};
use seld_core::Result;

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Entries uniform in [−1, 1].
pub fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::uniform(shape, 1.0, rng)
}

/// Entries uniform in [lo, hi].
pub fn rand_range(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(lo..=hi)).collect()).unwrap()
}

/// Builds `build(inputs)` on a fresh graph and reduces it to the scalar
/// `Σ out ⊙ probe`, where `probe` is a fixed random tensor, so every output
/// element carries a distinct weight.
fn scalar_loss<F>(inputs: &[Tensor], probe_seed: u64, build: &F) -> Result<(Graph, Vec<Var>, Var)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    let shape = g.shape(out).to_vec();
    let probe = g.constant(rand_tensor(&shape, &mut rng(probe_seed)));
    let weighted = g.mul(out, probe)?;
    let loss = g.sum(weighted);
    Ok((g, vars, loss))
}

/// Relative error `‖a − n‖ / max(‖a‖, ‖n‖, 1e−12)` between the analytic
/// gradient and the central finite-difference gradient over all inputs.
pub fn gradcheck<F>(inputs: &[Tensor], build: F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let probe_seed = 0xfd;
    let (mut g, vars, loss) = scalar_loss(inputs, probe_seed, &build)?;
    g.backward(loss)?;
    let analytic: Vec<f64> = vars
        .iter()
        .flat_map(|&v| g.grad(v).expect("params require grad").into_data())
        .collect();
    let eval = |ins: &[Tensor]| -> Result<f64> {
        let (g, _, loss) = scalar_loss(ins, probe_seed, &build)?;
        Ok(g.value(loss).data()[0])
    };
    let mut numeric = Vec::with_capacity(analytic.len());
    let mut work = inputs.to_vec();
    for i in 0..inputs.len() {
        for j in 0..inputs[i].numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + FD_STEP;
            let plus = eval(&work)?;
            work[i].data_mut()[j] = orig - FD_STEP;
            let minus = eval(&work)?;
            work[i].data_mut()[j] = orig;
            numeric.push((plus - minus) / (2.0 * FD_STEP));
        }
    }
    let diff: f64 = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na: f64 = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn: f64 = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    Ok(diff / na.max(nn).max(1e-12))
}

/// Random unit vector, uniform on the sphere.
pub fn unit_vector(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let z: f64 = rng.gen_range(-1.0..=1.0);
    let phi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let r = (1.0 - z * z).sqrt();
    [r * phi.cos(), r * phi.sin(), z]
}

/// A named set of differentiable primitives, each with a generator of
/// random inputs and the graph construction under test.
pub struct GradCase {
    pub name: &'static str,
    pub inputs: fn(&mut ChaCha8Rng) -> Vec<Tensor>,
    pub build: fn(&mut Graph, &[Var]) -> Result<Var>,
}

fn relu_input(r: &mut ChaCha8Rng) -> Vec<Tensor> {
    // keep entries away from the kink at 0
    let mut t = rand_tensor(&[3, 4], r);
    for v in t.data_mut() {
        if v.abs() < 0.05 {
            *v += 0.1;
        }
    }
    vec![t]
}

fn pool_input(r: &mut ChaCha8Rng) -> Vec<Tensor> {
    // distinct values so the argmax is stable under the finite step
    let n = 2 * 2 * 4 * 6;
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
    for i in (1..n).rev() {
        let j = r.gen_range(0..=i);
        vals.swap(i, j);
    }
    vec![Tensor::new(&[2, 2, 4, 6], vals).unwrap()]
}

pub fn grad_cases() -> Vec<GradCase> {
    vec![
        GradCase {
            name: "matmul",
            inputs: |r| vec![rand_tensor(&[3, 4], r), rand_tensor(&[4, 2], r)],
            build: |g, v| g.matmul(v[0], v[1]),
        },
        GradCase {
            name: "batch_matmul",
            inputs: |r| vec![rand_tensor(&[2, 3, 4], r), rand_tensor(&[2, 4, 3], r)],
            build: |g, v| g.batch_matmul(v[0], v[1], false),
        },
        GradCase {
            name: "batch_matmul_transposed",
            inputs: |r| vec![rand_tensor(&[2, 3, 4], r), rand_tensor(&[2, 5, 4], r)],
            build: |g, v| g.batch_matmul(v[0], v[1], true),
        },
        GradCase {
            name: "add",
            inputs: |r| vec![rand_tensor(&[2, 3], r), rand_tensor(&[2, 3], r)],
            build: |g, v| g.add(v[0], v[1]),
        },
        GradCase {
            name: "sub",
            inputs: |r| vec![rand_tensor(&[2, 3], r), rand_tensor(&[2, 3], r)],
            build: |g, v| g.sub(v[0], v[1]),
        },
        GradCase {
            name: "mul",
            inputs: |r| vec![rand_tensor(&[2, 3], r), rand_tensor(&[2, 3], r)],
            build: |g, v| g.mul(v[0], v[1]),
        },
        GradCase {
            name: "add_broadcast",
            inputs: |r| vec![rand_tensor(&[2, 3, 4], r), rand_tensor(&[3, 4], r)],
            build: |g, v| g.add_broadcast(v[0], v[1]),
        },
        GradCase {
            name: "scale",
            inputs: |r| vec![rand_tensor(&[5], r)],
            build: |g, v| Ok(g.scale(v[0], -1.7)),
        },
        GradCase {
            name: "relu",
            inputs: relu_input,
            build: |g, v| Ok(g.relu(v[0])),
        },
        GradCase {
            name: "sigmoid",
            inputs: |r| vec![rand_range(&[3, 4], -3.0, 3.0, r)],
            build: |g, v| Ok(g.sigmoid(v[0])),
        },
        GradCase {
            name: "tanh",
            inputs: |r| vec![rand_range(&[3, 4], -2.0, 2.0, r)],
            build: |g, v| Ok(g.tanh(v[0])),
        },
        GradCase {
            name: "softmax_last",
            inputs: |r| vec![rand_range(&[2, 3, 4], -2.0, 2.0, r)],
            build: |g, v| g.softmax(v[0], 2),
        },
        GradCase {
            name: "softmax_middle",
            inputs: |r| vec![rand_range(&[2, 3, 4], -2.0, 2.0, r)],
            build: |g, v| g.softmax(v[0], 1),
        },
        GradCase {
            name: "conv2d",
            inputs: |r| {
                vec![
                    rand_tensor(&[2, 2, 4, 5], r),
                    rand_tensor(&[3, 2, 3, 3], r),
                    rand_tensor(&[3], r),
                ]
            },
            build: |g, v| g.conv2d(v[0], v[1], v[2]),
        },
        GradCase {
            name: "batch_norm_train",
            inputs: |r| {
                vec![
                    rand_tensor(&[3, 2, 2, 3], r),
                    rand_range(&[2], 0.5, 1.5, r),
                    rand_tensor(&[2], r),
                ]
            },
            build: |g, v| Ok(g.batch_norm_train(v[0], v[1], v[2], 1e-5)?.0),
        },
        GradCase {
            name: "batch_norm_eval",
            inputs: |r| {
                vec![
                    rand_tensor(&[2, 2, 2, 3], r),
                    rand_tensor(&[2], r),
                    rand_tensor(&[2], r),
                ]
            },
            build: |g, v| g.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2], &[0.5, 2.0], 1e-5),
        },
        GradCase {
            name: "max_pool2d",
            inputs: pool_input,
            build: |g, v| g.max_pool2d(v[0], (2, 3)),
        },
        GradCase {
            name: "layer_norm",
            inputs: |r| {
                vec![
                    rand_tensor(&[2, 3, 5], r),
                    rand_tensor(&[5], r),
                    rand_tensor(&[5], r),
                ]
            },
            build: |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5),
        },
        GradCase {
            name: "reshape",
            inputs: |r| vec![rand_tensor(&[2, 6], r)],
            build: |g, v| g.reshape(v[0], &[3, 4]),
        },
        GradCase {
            name: "permute",
            inputs: |r| vec![rand_tensor(&[2, 3, 4], r)],
            build: |g, v| g.permute(v[0], &[2, 0, 1]),
        },
        GradCase {
            name: "narrow",
            inputs: |r| vec![rand_tensor(&[3, 5, 2], r)],
            build: |g, v| g.narrow(v[0], 1, 1, 3),
        },
        GradCase {
            name: "concat",
            inputs: |r| vec![rand_tensor(&[2, 2, 3], r), rand_tensor(&[2, 4, 3], r)],
            build: |g, v| g.concat(&[v[0], v[1]], 1),
        },
        GradCase {
            name: "sum",
            inputs: |r| vec![rand_tensor(&[2, 3], r)],
            build: |g, v| Ok(g.sum(v[0])),
        },
        GradCase {
            name: "mean",
            inputs: |r| vec![rand_tensor(&[2, 3], r)],
            build: |g, v| Ok(g.mean(v[0])),
        },
        GradCase {
            name: "mse",
            inputs: |r| vec![rand_tensor(&[2, 3], r), rand_tensor(&[2, 3], r)],
            build: |g, v| g.mse(v[0], v[1]),
        },
    ]
}

/// First 250-frame chunk of `n` synthesized clips: standardized features
/// `[n, 7, 250, 64]` and ACCDOA targets `[n, 50, 12, 3]`.
pub fn synthetic_batch(n: usize, seed: u64) -> (Tensor, Tensor) {
    use seld_core::{accdoa, dsp, synth};
    let spec = synth::SceneSpec {
        seed,
        n_clips: n,
        ..Default::default()
    };
    let fb = dsp::MelFilterbank::default();
    let clips = synth::render_scene(&spec).unwrap();
    let raw: Vec<Tensor> = clips
        .iter()
        .map(|c| dsp::extract_raw_features(&c.audio, &fb).unwrap())
        .collect();
    let stats = dsp::FeatureStats::fit(&raw).unwrap();
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for (clip, mut x) in clips.iter().zip(raw) {
        stats.apply(&mut x).unwrap();
        let frames = x.shape()[1];
        for ch in 0..7 {
            xs.extend_from_slice(&x.data()[ch * frames * 64..][..250 * 64]);
        }
        ys.extend(
            accdoa::encode(&clip.labels.window(0, 50))
                .unwrap()
                .into_data(),
        );
    }
    (
        Tensor::new(&[n, 7, 250, 64], xs).unwrap(),
        Tensor::new(&[n, 50, 12, 3], ys).unwrap(),
    )
}

/// Row-major dense `a[m×k] · b[k×n]` by explicit loops.
pub fn dense_mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut s = 0.0;
            for p in 0..k {
                s += a[i * k + p] * b[p * n + j];
            }
            c[i * n + j] = s;
        }
    }
    c
}

/// Step-by-step single-head attention on one `T×I` sequence: explicit score
/// matrix, explicit row softmax, explicit weighted sum.
pub fn brute_attention(
    h: &[f64],
    wq: &[f64],
    wk: &[f64],
    wv: &[f64],
    t: usize,
    i: usize,
    k: usize,
    o: usize,
) -> Vec<f64> {
    let q = dense_mm(h, wq, t, i, k);
    let kk = dense_mm(h, wk, t, i, k);
    let v = dense_mm(h, wv, t, i, o);
    let mut out = vec![0.0; t * o];
    for r in 0..t {
        let scores: Vec<f64> = (0..t)
            .map(|c| (0..k).map(|p| q[r * k + p] * kk[c * k + p]).sum::<f64>() / (k as f64).sqrt())
            .collect();
        let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
        let z: f64 = e.iter().sum();
        for c in 0..t {
            for p in 0..o {
                out[r * o + p] += e[c] / z * v[c * o + p];
            }
        }
    }
    out
}

/// Cheapest assignment of `min(rows, cols)` pairs by enumerating every
/// injective map from the smaller side to the larger.
pub fn brute_force_assignment(cost: &[f64], rows: usize, cols: usize) -> f64 {
    fn go(
        cost: &[f64],
        rows: usize,
        cols: usize,
        r: usize,
        used: &mut Vec<bool>,
        transposed: bool,
    ) -> f64 {
        let (n_small, n_big) = if transposed {
            (cols, rows)
        } else {
            (rows, cols)
        };
        if r == n_small {
            return 0.0;
        }
        let mut best = f64::INFINITY;
        for c in 0..n_big {
            if !used[c] {
                used[c] = true;
                let w = if transposed {
                    cost[c * cols + r]
                } else {
                    cost[r * cols + c]
                };
                best = best.min(w + go(cost, rows, cols, r + 1, used, transposed));
                used[c] = false;
            }
        }
        best
    }
    let transposed = rows > cols;
    go(
        cost,
        rows,
        cols,
        0,
        &mut vec![false; rows.max(cols)],
        transposed,
    )
}

/// Random ACCDOA-valid label set: each (frame, class) active with
/// probability `density`, with a uniform random direction.
pub fn random_labels(seed: u64, frames: usize, density: f64) -> FrameLabels {
    let mut r = rng(seed);
    let mut l = FrameLabels::empty(frames, 12);
    for f in 0..frames {
        for c in 0..12 {
            if r.gen_bool(density) {
                l.set_active(f, c, unit_vector(&mut r)).unwrap();
            }
        }
    }
    l
}

pub fn plane_wave(d: [f64; 3], mono: &[f64]) -> FoaClip {
    let (az, el) = synth::angles(d);
    let foa = synth::encode_foa(mono, az, el).unwrap();
    FoaClip::new(foa.to_vec(), SAMPLE_RATE).unwrap()
}

/// Normalized intensity `(x, y, z)` at `(frame, band)`.
pub fn intensity_at(x: &Tensor, frame: usize, band: usize) -> [f64; 3] {
    let (t, f) = (x.shape()[1], x.shape()[2]);
    [4, 5, 6].map(|ch| x.data()[(ch * t + frame) * f + band])
}

/// The mel band holding the most W-channel energy over `frames`.
pub fn loudest_band(x: &Tensor, frames: std::ops::Range<usize>) -> usize {
    let f = x.shape()[2];
    (0..f)
        .max_by(|&a, &b| {
            let e = |band: usize| frames.clone().map(|t| x.data()[t * f + band]).sum::<f64>();
            e(a).total_cmp(&e(b))
        })
        .unwrap()
}
