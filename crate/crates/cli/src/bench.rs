//! Eval-mode inference throughput of an attention model against the
//! recurrent baseline.

use crate::error::CliError;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use seld_core::model::{ModelConfig, SeldModel};
use seld_core::tensor::{Graph, Tensor};
use serde::{Deserialize, Serialize};
use std::time::Instant;

#[derive(Clone, Debug)]
pub struct BenchOptions {
    pub batch: usize,
    /// Timed batches per model.
    pub batches: usize,
    pub warmup: usize,
    /// Worker threads; `1` is the single-thread reference mode.
    pub threads: usize,
    /// Also time the attention stack at T' and 2·T'.
    pub scaling: bool,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            batch: 32,
            batches: 100,
            warmup: 2,
            threads: 1,
            scaling: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Throughput {
    pub config_id: String,
    pub params: usize,
    pub seconds: f64,
    pub chunks_per_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingReport {
    pub label_frames: [usize; 2],
    pub seconds: [f64; 2],
    /// Time ratio for doubling T'; below 4 means the quadratic attention
    /// term does not dominate at these sizes.
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub batch: usize,
    pub feature_frames: usize,
    pub batches: usize,
    pub threads: usize,
    pub mhsa: Throughput,
    pub baseline: Throughput,
    /// MHSA throughput divided by baseline throughput.
    pub ratio: f64,
    pub mhsa_scaling: Option<ScalingReport>,
}

fn random_input(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape")
}

/// One eval-mode forward of `x`, with the batch split across the current
/// thread pool.
fn predict_split(model: &SeldModel, x: &Tensor, threads: usize) -> Result<(), CliError> {
    let s = x.shape().to_vec();
    if threads <= 1 || s[0] == 1 {
        model.predict(x)?;
        return Ok(());
    }
    let per = s[1] * s[2] * s[3];
    let step = s[0].div_ceil(threads);
    let parts: Vec<Tensor> = x
        .data()
        .chunks(step * per)
        .map(|d| Tensor::new(&[d.len() / per, s[1], s[2], s[3]], d.to_vec()).expect("shape"))
        .collect();
    parts
        .par_iter()
        .try_for_each(|p| model.predict(p).map(|_| ()))?;
    Ok(())
}

fn time_model(model: &SeldModel, opts: &BenchOptions) -> Result<Throughput, CliError> {
    let c = model.config();
    let x = random_input(
        &[opts.batch, c.in_channels, c.feature_frames(), c.n_mels],
        0xbe7c,
    );
    for _ in 0..opts.warmup {
        predict_split(model, &x, opts.threads)?;
    }
    let t0 = Instant::now();
    for _ in 0..opts.batches {
        predict_split(model, &x, opts.threads)?;
    }
    let seconds = t0.elapsed().as_secs_f64();
    Ok(Throughput {
        config_id: c.id(),
        params: model.param_count(),
        seconds,
        chunks_per_s: (opts.batch * opts.batches) as f64 / seconds,
    })
}

/// Mean wall-clock of the attention stack alone on `[batch, T', width]`.
fn time_attention(
    config: &ModelConfig,
    label_frames: usize,
    batch: usize,
    reps: usize,
) -> Result<f64, CliError> {
    let cfg = ModelConfig {
        label_frames,
        ..config.clone()
    };
    let model = SeldModel::new(cfg, 0)?;
    let h = random_input(
        &[batch, label_frames, model.config().feature_width()],
        0x5ca1,
    );
    let run = || -> Result<(), CliError> {
        let mut g = Graph::new();
        let p = seld_core::model::Bound::bind(&mut g, model.params(), false);
        let hv = g.constant(h.clone());
        model.sa_stack(&mut g, &p, hv)?;
        Ok(())
    };
    run()?;
    let t0 = Instant::now();
    for _ in 0..reps {
        run()?;
    }
    Ok(t0.elapsed().as_secs_f64() / reps as f64)
}

pub fn scaling_report(
    config: &ModelConfig,
    batch: usize,
    reps: usize,
) -> Result<ScalingReport, CliError> {
    let t = config.label_frames;
    let seconds = [
        time_attention(config, t, batch, reps)?,
        time_attention(config, 2 * t, batch, reps)?,
    ];
    Ok(ScalingReport {
        label_frames: [t, 2 * t],
        seconds,
        ratio: seconds[1] / seconds[0],
    })
}

/// Times both models on identical random batches. The two models must share
/// the input geometry.
pub fn run(
    mhsa: &SeldModel,
    baseline: &SeldModel,
    opts: &BenchOptions,
) -> Result<BenchReport, CliError> {
    let (a, b) = (mhsa.config(), baseline.config());
    if (a.in_channels, a.feature_frames(), a.n_mels)
        != (b.in_channels, b.feature_frames(), b.n_mels)
    {
        return Err(CliError::Usage(
            "benchmarked models take different input shapes".into(),
        ));
    }
    if opts.batch == 0 || opts.batches == 0 || opts.threads == 0 {
        return Err(CliError::Usage(
            "batch, batches and threads must be positive".into(),
        ));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.threads)
        .build()
        .map_err(|e| CliError::Internal(format!("thread pool: {e}")))?;
    pool.install(|| {
        let m = time_model(mhsa, opts)?;
        let g = time_model(baseline, opts)?;
        let mhsa_scaling = if opts.scaling && a.n_blocks > 0 {
            Some(scaling_report(a, opts.batch, 3)?)
        } else {
            None
        };
        Ok(BenchReport {
            batch: opts.batch,
            feature_frames: a.feature_frames(),
            batches: opts.batches,
            threads: opts.threads,
            ratio: m.chunks_per_s / g.chunks_per_s,
            mhsa: m,
            baseline: g,
            mhsa_scaling,
        })
    })
}
